use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use super::road::RoadGraph;
use super::truth::{is_peak_slot, GroundTruthIntensity, SLOTS_PER_DAY, SLOT_HOURS, SLOT_MINUTES};
use crate::error::{Error, Result};

/// One congestion episode on a link. Times are minutes from the dataset
/// epoch, which is a Monday at 00:00.
#[derive(Clone, Debug, PartialEq)]
pub struct CongestionEvent {
    pub link: usize,
    pub t_occ: f64,
    pub duration: f64,
}

pub type LinkEvents = Vec<CongestionEvent>;

impl CongestionEvent {
    pub fn new(link: usize, t_occ: f64, duration: f64) -> Self {
        Self {
            link,
            t_occ,
            duration,
        }
    }

    pub fn t_occ_hours(&self) -> f64 {
        self.t_occ / 60.0
    }

    pub fn end(&self) -> f64 {
        self.t_occ + self.duration
    }

    /// 5-minute slots overlapped by `[t_occ, t_occ + duration)`.
    pub fn slot_range(&self) -> RangeInclusive<usize> {
        let first = (self.t_occ / SLOT_MINUTES).floor() as usize;
        let last = ((self.end() / SLOT_MINUTES).ceil() as usize).max(first + 1) - 1;
        first..=last
    }

    pub fn time_of_day(&self) -> usize {
        (self.t_occ / SLOT_MINUTES).floor() as usize % SLOTS_PER_DAY
    }

    pub fn day_of_week(&self) -> usize {
        (self.t_occ / (24.0 * 60.0)).floor() as usize % 7
    }
}

/// Checks per-link ordering and non-overlap.
pub fn validate_events(events: &[LinkEvents]) -> Result<()> {
    for (n, list) in events.iter().enumerate() {
        for e in list {
            if e.link != n {
                return Err(Error::Data(format!("event of link {} stored under link {n}", e.link)));
            }
            if !(e.duration > 0.0) || !e.t_occ.is_finite() || e.t_occ < 0.0 {
                return Err(Error::Data(format!("invalid event on link {n} at {}", e.t_occ)));
            }
        }
        for w in list.windows(2) {
            if !(w[1].t_occ > w[0].t_occ) || w[1].t_occ < w[0].end() {
                return Err(Error::Data(format!(
                    "events on link {n} at {} and {} overlap or are unordered",
                    w[0].t_occ, w[1].t_occ
                )));
            }
        }
    }
    Ok(())
}

fn draw_duration<R: Rng>(gt: &GroundTruthIntensity, t_hours: f64, rng: &mut R) -> f64 {
    let d = &gt.durations;
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    let mut minutes = (d.log_mean + d.log_sd * z).exp();
    let tod = ((t_hours / SLOT_HOURS).floor() as usize) % SLOTS_PER_DAY;
    if is_peak_slot(tod) {
        minutes *= d.peak_multiplier;
    }
    minutes
}

/// Draws congestion events for every link by multivariate Ogata thinning.
///
/// The dominating rate is recomputed after each candidate, at every profile
/// breakpoint and after every accepted arrival; excitation only decays between
/// arrivals, so it stays valid until the next breakpoint. An arrival on a link
/// that is still congested extends the running event instead of starting a
/// new one, and does not excite the neighbours.
pub fn simulate_events(
    graph: &RoadGraph,
    gt: &GroundTruthIntensity,
    horizon_hours: f64,
    seed: u64,
) -> Result<Vec<LinkEvents>> {
    let n = graph.n_links;
    gt.validate(n)?;
    if !(horizon_hours > 0.0 && horizon_hours.is_finite()) {
        return Err(Error::Param(format!("horizon must be positive, got {horizon_hours}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Links excited by an event on link m.
    let mut excites: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in &graph.edges {
        excites[d].push(s);
    }
    let mut excitation = vec![0.0; n];
    // (start, end) in hours of each link's running and past events.
    let mut spans: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut rates = vec![0.0; n];
    let mut t = 0.0f64;

    let advance = |excitation: &mut [f64], dt: f64| {
        if gt.beta > 0.0 && dt > 0.0 {
            let f = (-gt.gamma * dt).exp();
            excitation.iter_mut().for_each(|e| *e *= f);
        }
    };
    let fill_rates = |rates: &mut [f64], excitation: &[f64], at: f64| -> f64 {
        let p = gt.profile_at(at);
        let mut total = 0.0;
        for (i, r) in rates.iter_mut().enumerate() {
            *r = gt.base_rates[i] * p * (1.0 + gt.beta * excitation[i]);
            total += *r;
        }
        total
    };

    while t < horizon_hours {
        let k = (t / SLOT_HOURS).floor() + 1.0;
        let mut breakpoint = k * SLOT_HOURS;
        if breakpoint <= t {
            breakpoint = (k + 1.0) * SLOT_HOURS;
        }
        let bound = fill_rates(&mut rates, &excitation, t);
        let wait = if bound > 0.0 {
            Exp::new(bound)
                .map_err(|e| Error::Consistency(format!("thinning bound {bound}: {e}")))?
                .sample(&mut rng)
        } else {
            f64::INFINITY
        };
        let cand = t + wait;
        if cand >= breakpoint {
            advance(&mut excitation, breakpoint - t);
            t = breakpoint;
            continue;
        }
        if cand >= horizon_hours {
            break;
        }
        advance(&mut excitation, cand - t);
        t = cand;
        let total = fill_rates(&mut rates, &excitation, t);
        if total > bound * (1.0 + 1e-12) {
            return Err(Error::Consistency(format!(
                "intensity {total} exceeds thinning bound {bound} at t = {t}"
            )));
        }
        let u: f64 = rng.random::<f64>() * bound;
        if u >= total {
            continue;
        }
        let mut acc = 0.0;
        let mut link = n - 1;
        for (i, &r) in rates.iter().enumerate() {
            acc += r;
            if u < acc {
                link = i;
                break;
            }
        }
        let dur_h = draw_duration(gt, t, &mut rng) / 60.0;
        match spans[link].last_mut() {
            Some(last) if t < last.1 => last.1 = last.1.max(t + dur_h),
            _ => {
                spans[link].push((t, t + dur_h));
                for &m in &excites[link] {
                    excitation[m] += 1.0;
                }
            }
        }
    }

    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(link, list)| {
            list.into_iter()
                .map(|(s, e)| CongestionEvent::new(link, s * 60.0, (e - s) * 60.0))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::road::gen_graph;

    #[test]
    fn slot_range_covers_overlapped_slots() {
        let e = CongestionEvent::new(0, 7.0, 10.0);
        assert_eq!(e.slot_range(), 1..=3);
        let e = CongestionEvent::new(0, 10.0, 5.0);
        assert_eq!(e.slot_range(), 2..=2);
        let e = CongestionEvent::new(0, 10.0, 0.5);
        assert_eq!(e.slot_range(), 2..=2);
    }

    #[test]
    fn periodic_features() {
        let e = CongestionEvent::new(0, 3.0 * 1440.0 + 8.0 * 60.0 + 2.0, 1.0);
        assert_eq!(e.day_of_week(), 3);
        assert_eq!(e.time_of_day(), 96);
    }

    #[test]
    fn vanishing_rate_gives_no_events() {
        let g = gen_graph(3, 1.0, 1).unwrap();
        let gt = GroundTruthIntensity::homogeneous(3, 1e-9);
        let ev = simulate_events(&g, &gt, 24.0, 9).unwrap();
        assert!(ev.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn simulation_is_deterministic_and_well_formed() {
        let g = gen_graph(6, 2.0, 4).unwrap();
        let mut gt = GroundTruthIntensity::homogeneous(6, 1.5);
        gt.beta = 0.5;
        gt.gamma = 2.0;
        gt.profile = GroundTruthIntensity::peak_profile(2.0);
        let a = simulate_events(&g, &gt, 72.0, 3).unwrap();
        let b = simulate_events(&g, &gt, 72.0, 3).unwrap();
        assert_eq!(a, b);
        validate_events(&a).unwrap();
        assert!(a.iter().map(Vec::len).sum::<usize>() > 100);
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = gen_graph(2, 1.0, 1).unwrap();
        let gt = GroundTruthIntensity::homogeneous(2, 1.0);
        assert!(simulate_events(&g, &gt, 0.0, 1).is_err());
        let mut bad = gt.clone();
        bad.gamma = 0.0;
        assert!(simulate_events(&g, &bad, 1.0, 1).is_err());
    }
}
