//! Ground-truth conditional intensity of the generator and its exact
//! likelihood / median.

use super::events::{CongestionEvent, LinkEvents};
use super::road::RoadGraph;
use crate::error::{Error, Result};

pub const SLOTS_PER_DAY: usize = 288;
pub const SLOT_MINUTES: f64 = 5.0;
pub const SLOT_HOURS: f64 = SLOT_MINUTES / 60.0;

/// Morning 07:00-10:00 and evening 17:00-20:00.
pub fn is_peak_slot(tod: usize) -> bool {
    let hour = tod / 12;
    (7..10).contains(&hour) || (17..20).contains(&hour)
}

/// Log-normal event durations in minutes, stretched during peak hours.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationModel {
    /// Mean of the log-duration (log minutes).
    pub log_mean: f64,
    pub log_sd: f64,
    pub peak_multiplier: f64,
}

impl Default for DurationModel {
    fn default() -> Self {
        Self {
            log_mean: 15f64.ln(),
            log_sd: 0.5,
            peak_multiplier: 1.5,
        }
    }
}

/// `λ_n(t) = μ_n · profile(t mod 24h) · (1 + β Σ_{m ∈ nb(n)} Σ_{t_m < t} e^{-γ (t - t_m)})`,
/// with time in hours.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthIntensity {
    /// Events per hour for each link.
    pub base_rates: Vec<f64>,
    /// 288 multiplicative factors, one per 5-minute slot of the day.
    pub profile: Vec<f64>,
    pub beta: f64,
    /// Excitation decay rate, 1/hour.
    pub gamma: f64,
    pub durations: DurationModel,
}

impl GroundTruthIntensity {
    pub fn flat_profile() -> Vec<f64> {
        vec![1.0; SLOTS_PER_DAY]
    }

    /// `factor` during peak hours, 1 elsewhere.
    pub fn peak_profile(factor: f64) -> Vec<f64> {
        (0..SLOTS_PER_DAY)
            .map(|s| if is_peak_slot(s) { factor } else { 1.0 })
            .collect()
    }

    /// `night` from 00:00 to 06:00, `peak` during peak hours, 1 elsewhere.
    pub fn night_peak_profile(night: f64, peak: f64) -> Vec<f64> {
        (0..SLOTS_PER_DAY)
            .map(|s| match s {
                s if s < 72 => night,
                s if is_peak_slot(s) => peak,
                _ => 1.0,
            })
            .collect()
    }

    pub fn homogeneous(n_links: usize, rate: f64) -> Self {
        Self {
            base_rates: vec![rate; n_links],
            profile: Self::flat_profile(),
            beta: 0.0,
            gamma: 1.0,
            durations: DurationModel::default(),
        }
    }

    pub fn validate(&self, n_links: usize) -> Result<()> {
        if self.base_rates.len() != n_links {
            return Err(Error::Param(format!(
                "{} base rates for {n_links} links",
                self.base_rates.len()
            )));
        }
        if self.base_rates.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Param("base rates must be positive and finite".into()));
        }
        if self.profile.len() != SLOTS_PER_DAY || self.profile.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Param("profile needs 288 positive finite values".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Param(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Param(format!("gamma must be > 0, got {}", self.gamma)));
        }
        let d = &self.durations;
        if !(d.log_sd >= 0.0 && d.log_mean.is_finite() && d.peak_multiplier > 0.0) {
            return Err(Error::Param("invalid duration model".into()));
        }
        Ok(())
    }

    /// Profile value in effect at `t` hours.
    pub fn profile_at(&self, t: f64) -> f64 {
        self.profile[slot_of_day(t)]
    }

    /// Intensity of `link` at `t` hours from direct summation over the
    /// neighbours' events strictly before `t`.
    pub fn intensity(&self, graph: &RoadGraph, events: &[LinkEvents], link: usize, t: f64) -> f64 {
        let mut excitation = 0.0;
        if self.beta > 0.0 {
            for m in graph.neighbors(link) {
                for e in &events[m] {
                    let tm = e.t_occ_hours();
                    if tm < t {
                        excitation += (-self.gamma * (t - tm)).exp();
                    }
                }
            }
        }
        self.base_rates[link] * self.profile_at(t) * (1.0 + self.beta * excitation)
    }

    /// `∫_a^b λ_link` in closed form, piecewise over profile slots and the
    /// sorted neighbour event times `neighbor_times`.
    pub fn cumulative(&self, link: usize, neighbor_times: &[f64], a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mu = self.base_rates[link];
        let g = self.gamma;
        // Decayed excitation at `a`, counting events at or before `a`.
        let mut next = neighbor_times.partition_point(|&t| t <= a);
        let mut s = if self.beta > 0.0 {
            neighbor_times[..next].iter().map(|&t| (-g * (a - t)).exp()).sum()
        } else {
            0.0
        };
        let mut total = 0.0;
        let mut cur = a;
        while cur < b {
            let slot_end = slot_boundary_after(cur);
            let mut end = slot_end.min(b);
            if self.beta > 0.0 && next < neighbor_times.len() && neighbor_times[next] < end {
                end = neighbor_times[next];
            }
            let len = end - cur;
            let p = self.profile_at(cur);
            let mut piece = len;
            if self.beta > 0.0 {
                piece += self.beta * s * (-(-g * len).exp_m1()) / g;
                s *= (-g * len).exp();
                while next < neighbor_times.len() && neighbor_times[next] <= end {
                    s += 1.0;
                    next += 1;
                }
            }
            total += mu * p * piece;
            cur = end;
        }
        total
    }
}

/// Slot of the day containing `t` hours.
pub fn slot_of_day(t: f64) -> usize {
    let slots = (t / SLOT_HOURS).floor();
    (slots.rem_euclid(SLOTS_PER_DAY as f64) as usize).min(SLOTS_PER_DAY - 1)
}

/// Smallest slot boundary strictly after `t` hours.
fn slot_boundary_after(t: f64) -> f64 {
    let k = (t / SLOT_HOURS).floor() + 1.0;
    let mut b = k * SLOT_HOURS;
    if b <= t {
        b = (k + 1.0) * SLOT_HOURS;
    }
    b
}

fn neighbor_times(graph: &RoadGraph, events: &[LinkEvents], link: usize, before: f64) -> Vec<f64> {
    let mut times: Vec<f64> = graph
        .neighbors(link)
        .into_iter()
        .flat_map(|m| events[m].iter().map(CongestionEvent::t_occ_hours))
        .filter(|&t| t < before)
        .collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Time interval in hours.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeWindow {
    pub start: f64,
    pub end: f64,
}

impl TimeWindow {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

/// Negative log-likelihood of one link's events inside `window`.
pub fn link_nll(
    gt: &GroundTruthIntensity,
    graph: &RoadGraph,
    events: &[LinkEvents],
    link: usize,
    window: TimeWindow,
) -> f64 {
    let times = neighbor_times(graph, events, link, f64::INFINITY);
    let mut nll = gt.cumulative(link, &times, window.start, window.end);
    for e in &events[link] {
        let t = e.t_occ_hours();
        if window.contains(t) {
            nll -= gt.intensity(graph, events, link, t).ln();
        }
    }
    nll
}

/// Exact negative log-likelihood `-Σ log λ(t_i) + ∫ λ dt` of all links' events
/// over `window` under the generator.
pub fn oracle_nll(
    gt: &GroundTruthIntensity,
    graph: &RoadGraph,
    events: &[LinkEvents],
    window: TimeWindow,
) -> f64 {
    (0..graph.n_links)
        .map(|n| link_nll(gt, graph, events, n, window))
        .sum()
}

/// NLL of the single transition `from → to` on `link`: the hazard accumulated
/// over `(from, to]` minus the log-intensity at the arrival.
pub fn transition_nll(
    gt: &GroundTruthIntensity,
    graph: &RoadGraph,
    events: &[LinkEvents],
    link: usize,
    from: f64,
    to: f64,
) -> f64 {
    let times = neighbor_times(graph, events, link, f64::INFINITY);
    gt.cumulative(link, &times, from, to) - gt.intensity(graph, events, link, to).ln()
}

pub const ORACLE_MEDIAN_RTOL: f64 = 1e-9;

/// Median waiting time (hours) from `t` until the next event on `link`,
/// assuming no further events anywhere: the root of `∫_t^{t+τ} λ = ln 2`.
pub fn oracle_median(
    gt: &GroundTruthIntensity,
    graph: &RoadGraph,
    history: &[LinkEvents],
    link: usize,
    t: f64,
) -> f64 {
    let times: Vec<f64> = neighbor_times(graph, history, link, f64::INFINITY)
        .into_iter()
        .filter(|&x| x <= t)
        .collect();
    let target = std::f64::consts::LN_2;
    let hazard = |tau: f64| gt.cumulative(link, &times, t, t + tau);
    let mut lo = 0.0;
    let mut hi = 1.0 / gt.base_rates[link];
    while hazard(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > ORACLE_MEDIAN_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if hazard(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
