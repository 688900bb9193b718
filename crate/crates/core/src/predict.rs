//! Median next-event prediction, duration prediction, evaluation metrics and
//! the Historical Average baseline.

use std::fmt;

use rayon::prelude::*;

use crate::dataset::{Dataset, Split, WindowSample};
use crate::error::{Error, Result};
use crate::intensity::{HazardQuery, IntensityHead, LOG_FLOOR};
use crate::diffmath::ParamSet;
use crate::model::Stgnpp;
use crate::synthgen::{transition_nll, GroundTruthIntensity};

/// Initial bisection bracket in hours.
pub const TAU_MAX_HOURS: f64 = 6.0;
/// Maximum number of bracket doublings.
pub const MAX_DOUBLINGS: u32 = 10;
/// Absolute bisection tolerance in hours.
pub const BISECTION_TOL_HOURS: f64 = 1e-6;
pub const MIN_DURATION_MIN: f64 = 1.0;

/// τ with `Λ(elapsed + τ) - Λ(elapsed) = ln 2`: the median waiting time given
/// that nothing happened during the first `elapsed` hours.
pub fn median_after(q: &HazardQuery, elapsed: f64, tau_max: f64) -> Result<f64> {
    if !(tau_max > 0.0) || !(elapsed >= 0.0) {
        return Err(Error::Domain(format!("bad bracket: tau_max {tau_max}, elapsed {elapsed}")));
    }
    let base = q.cumulative(elapsed);
    let target = std::f64::consts::LN_2;
    let excess = |tau: f64| q.cumulative(elapsed + tau) - base - target;
    let mut hi = tau_max;
    let mut doublings = 0;
    while excess(hi) < 0.0 {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::DivergentHazard { cap: hi });
        }
        hi *= 2.0;
        doublings += 1;
    }
    let mut lo = 0.0;
    while hi - lo > BISECTION_TOL_HOURS {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Median inter-event time (hours) after an event with hidden state `h`.
pub fn predict_time(
    head: &IntensityHead,
    params: &ParamSet,
    h: &[f64],
    tod: usize,
    dow: usize,
    tau_max: f64,
) -> Result<f64> {
    let q = head.query(params, h, tod, dow)?;
    median_after(&q, 0.0, tau_max)
}

/// Duration prediction in minutes, floored at one minute.
pub fn predict_duration(head: &IntensityHead, params: &ParamSet, h: &[f64]) -> f64 {
    (head.duration_hours(params, h) * 60.0).max(MIN_DURATION_MIN)
}

/// Next-event prediction for one link, relative to the window end.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub link: usize,
    pub t_next: f64,
    pub d_next: f64,
}

/// Predictions for every link with at least one event in the window.
pub fn predict_window(model: &Stgnpp, dataset: &Dataset, sample: &WindowSample) -> Result<Vec<Prediction>> {
    let hidden = model.hidden(sample, &dataset.graph.adjacency)?;
    let end = sample.end_minutes();
    let mut out = Vec::new();
    for (link, list) in sample.events.iter().enumerate() {
        let Some(last) = list.last() else { continue };
        let h = hidden.row(link, list.len() - 1);
        let q = model
            .head
            .query(&model.params, h, last.time_of_day(), last.day_of_week())?;
        let elapsed = (end - last.t_occ) / 60.0;
        let tau = match median_after(&q, elapsed, TAU_MAX_HOURS) {
            Ok(t) => t,
            Err(Error::DivergentHazard { cap }) => {
                log::warn!("link {link}: hazard never reaches ln 2, using {cap} h");
                cap
            }
            Err(e) => return Err(e),
        };
        out.push(Prediction {
            link,
            t_next: tau * 60.0,
            d_next: predict_duration(&model.head, &model.params, h),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    /// Mean per-transition negative log-likelihood (time in hours).
    pub nll: f64,
    pub mae_t: f64,
    pub mae_d: f64,
    /// Predictions scored for MAE.
    pub n_eval: usize,
    /// Links with history but no next event within the horizon.
    pub n_excluded: usize,
    pub n_transitions: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nll={}", self.nll)?;
        writeln!(f, "mae_t={}", self.mae_t)?;
        writeln!(f, "mae_d={}", self.mae_d)?;
        writeln!(f, "n_eval={}", self.n_eval)?;
        writeln!(f, "n_excluded={}", self.n_excluded)?;
        writeln!(f, "n_transitions={}", self.n_transitions)
    }
}

impl MetricsReport {
    /// Parses the `metric=value` form written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad metrics line `{line}`")))?;
            let bad = |_| Error::Data(format!("bad value for {k}: `{v}`"));
            match k.trim() {
                "nll" => r.nll = v.trim().parse().map_err(bad)?,
                "mae_t" => r.mae_t = v.trim().parse().map_err(bad)?,
                "mae_d" => r.mae_d = v.trim().parse().map_err(bad)?,
                "n_eval" => r.n_eval = v.trim().parse().map_err(|_| Error::Data(format!("bad n_eval `{v}`")))?,
                "n_excluded" => {
                    r.n_excluded = v.trim().parse().map_err(|_| Error::Data(format!("bad n_excluded `{v}`")))?
                }
                "n_transitions" => {
                    r.n_transitions = v.trim().parse().map_err(|_| Error::Data(format!("bad n_transitions `{v}`")))?
                }
                other => return Err(Error::Data(format!("unknown metric `{other}`"))),
            }
        }
        Ok(r)
    }
}

/// One scored prediction, minutes from the window end.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub end_slot: usize,
    pub link: usize,
    pub true_t: f64,
    pub pred_t: f64,
    pub true_d: f64,
    pub pred_d: f64,
}

/// Scores predictions against the next event after the window end.
/// Returns the scored rows and the number of excluded links.
pub fn score(dataset: &Dataset, end_slot: usize, preds: &[Prediction]) -> (Vec<ScoredPrediction>, usize) {
    let end = end_slot as f64 * crate::synthgen::SLOT_MINUTES;
    let mut rows = Vec::with_capacity(preds.len());
    let mut excluded = 0;
    for p in preds {
        match dataset.next_event(p.link, end) {
            Some(e) => rows.push(ScoredPrediction {
                end_slot,
                link: p.link,
                true_t: e.t_occ - end,
                pred_t: p.t_next,
                true_d: e.duration,
                pred_d: p.d_next,
            }),
            None => excluded += 1,
        }
    }
    (rows, excluded)
}

/// Per-transition NLL terms of one window from plain forward evaluation.
pub fn window_nll_terms(model: &Stgnpp, sample: &WindowSample, hidden: &crate::model::WindowHidden) -> Result<Vec<f64>> {
    let b = &sample.batch;
    let mut out = Vec::new();
    for (n, i) in b.transitions() {
        let origin = b.at(n, i);
        let q = model
            .head
            .query(&model.params, hidden.row(n, i), b.time_of_day[origin], b.day_of_week[origin])?;
        let (tau, _) = b.transition_target(n, i);
        out.push(q.cumulative(tau) - q.density(tau).max(LOG_FLOOR).ln());
    }
    Ok(out)
}

fn summarise(nll_terms: &[f64], rows: &[ScoredPrediction], excluded: usize) -> Result<MetricsReport> {
    if nll_terms.is_empty() && rows.is_empty() {
        return Err(Error::EmptyBatch("split has nothing to evaluate".into()));
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if c == 0 {
            f64::NAN
        } else {
            s / c as f64
        }
    };
    Ok(MetricsReport {
        nll: mean(&mut nll_terms.iter().copied()),
        mae_t: mean(&mut rows.iter().map(|r| (r.pred_t - r.true_t).abs())),
        mae_d: mean(&mut rows.iter().map(|r| (r.pred_d - r.true_d).abs())),
        n_eval: rows.len(),
        n_excluded: excluded,
        n_transitions: nll_terms.len(),
    })
}

/// Metrics of `model` over every window of `split`, plus the scored rows.
pub fn evaluate_detailed(model: &Stgnpp, dataset: &Dataset, split: Split) -> Result<(MetricsReport, Vec<ScoredPrediction>)> {
    let ends = dataset.window_ends(split);
    if ends.is_empty() {
        return Err(Error::EmptyBatch(format!("{split:?} split has no complete window")));
    }
    let per_window: Vec<(Vec<f64>, Vec<ScoredPrediction>, usize)> = ends
        .par_iter()
        .map(|&end| {
            let sample = dataset.sample(end)?;
            let hidden = model.hidden(&sample, &dataset.graph.adjacency)?;
            let terms = window_nll_terms(model, &sample, &hidden)?;
            let preds = predict_window(model, dataset, &sample)?;
            let (rows, excluded) = score(dataset, end, &preds);
            Ok((terms, rows, excluded))
        })
        .collect::<Result<_>>()?;
    let mut terms = Vec::new();
    let mut rows = Vec::new();
    let mut excluded = 0;
    for (t, r, x) in per_window {
        terms.extend(t);
        rows.extend(r);
        excluded += x;
    }
    let report = summarise(&terms, &rows, excluded)?;
    Ok((report, rows))
}

pub fn evaluate(model: &Stgnpp, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    Ok(evaluate_detailed(model, dataset, split)?.0)
}

/// Historical Average: per-link training means of the inter-event time and
/// the duration, with global means for links without training history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    pub mean_gap_hours: Vec<f64>,
    pub mean_duration_min: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let (gaps, durations) = dataset.split_statistics(Split::Train);
        let all_gaps: Vec<f64> = gaps.iter().flatten().copied().collect();
        let all_durs: Vec<f64> = durations.iter().flatten().copied().collect();
        if all_gaps.is_empty() || all_durs.is_empty() {
            return Err(Error::EmptyBatch("training split has no inter-event gaps".into()));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (g0, d0) = (mean(&all_gaps), mean(&all_durs));
        Ok(Self {
            mean_gap_hours: gaps.iter().map(|g| if g.is_empty() { g0 } else { mean(g) }).collect(),
            mean_duration_min: durations.iter().map(|d| if d.is_empty() { d0 } else { mean(d) }).collect(),
        })
    }

    pub fn predict(&self, link: usize) -> Prediction {
        Prediction {
            link,
            t_next: self.mean_gap_hours[link] * 60.0,
            d_next: self.mean_duration_min[link],
        }
    }
}

/// Historical Average evaluated on the same windows and links as `evaluate`.
/// Its NLL treats each link as a Poisson process at the training rate.
pub fn baseline_ha(dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    Ok(baseline_ha_detailed(dataset, split)?.0)
}

pub fn baseline_ha_detailed(dataset: &Dataset, split: Split) -> Result<(MetricsReport, Vec<ScoredPrediction>)> {
    let ha = HistoricalAverage::fit(dataset)?;
    let ends = dataset.window_ends(split);
    if ends.is_empty() {
        return Err(Error::EmptyBatch(format!("{split:?} split has no complete window")));
    }
    let mut terms = Vec::new();
    let mut rows = Vec::new();
    let mut excluded = 0;
    for end in ends {
        let sample = dataset.sample(end)?;
        let b = &sample.batch;
        for (n, i) in b.transitions() {
            let m = ha.mean_gap_hours[n];
            terms.push(b.transition_target(n, i).0 / m + m.ln());
        }
        let preds: Vec<Prediction> = (0..dataset.n_links())
            .filter(|&n| !sample.events[n].is_empty())
            .map(|n| ha.predict(n))
            .collect();
        let (r, x) = score(dataset, end, &preds);
        rows.extend(r);
        excluded += x;
    }
    Ok((summarise(&terms, &rows, excluded)?, rows))
}

/// Mean ground-truth NLL over the same transitions that `evaluate` scores.
pub fn oracle_transition_nll(dataset: &Dataset, split: Split, truth: &GroundTruthIntensity) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for end in dataset.window_ends(split) {
        let sample = dataset.sample(end)?;
        for (n, i) in sample.batch.transitions() {
            let from = sample.events[n][i].t_occ_hours();
            let to = from + sample.batch.transition_target(n, i).0;
            sum += transition_nll(truth, &dataset.graph, &dataset.events, n, from, to);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch(format!("{split:?} split has no transitions")));
    }
    Ok(sum / count as f64)
}
