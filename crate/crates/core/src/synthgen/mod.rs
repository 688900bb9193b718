//! Synthetic road network, congestion events with a known conditional
//! intensity, and speed/condition series derived from those events.

mod events;
mod road;
mod speeds;
mod truth;

pub use events::{simulate_events, validate_events, CongestionEvent, LinkEvents};
pub use road::{gen_graph, RoadGraph};
pub use speeds::{gen_speeds, labels_from_events, TrafficStateWindow};
pub use truth::{
    is_peak_slot, link_nll, oracle_median, oracle_nll, slot_of_day, transition_nll, DurationModel,
    GroundTruthIntensity, TimeWindow, ORACLE_MEDIAN_RTOL, SLOTS_PER_DAY, SLOT_HOURS, SLOT_MINUTES,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named generator presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Flat profile, no excitation, 2 events/hour on every link. Events last
    /// a few seconds so that merging leaves the Poisson arrivals intact.
    Homogeneous,
    /// Per-link rates in [0.6, 1.2]/h, quiet nights (0.25x before 06:00),
    /// 2x peak hours, neighbour excitation with beta = 0.3 and a 30-minute
    /// decay time.
    Standard,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(Scenario::Homogeneous),
            "standard" => Ok(Scenario::Standard),
            other => Err(Error::Param(format!("unknown scenario `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Homogeneous => "homogeneous",
            Scenario::Standard => "standard",
        })
    }
}

impl Scenario {
    pub fn intensity(self, n_links: usize, seed: u64) -> GroundTruthIntensity {
        match self {
            Scenario::Homogeneous => GroundTruthIntensity {
                base_rates: vec![2.0; n_links],
                profile: GroundTruthIntensity::flat_profile(),
                beta: 0.0,
                gamma: 1.0,
                durations: DurationModel {
                    log_mean: 0.1f64.ln(),
                    log_sd: 0.3,
                    peak_multiplier: 1.0,
                },
            },
            Scenario::Standard => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
                GroundTruthIntensity {
                    base_rates: (0..n_links).map(|_| rng.random_range(0.6..1.2)).collect(),
                    profile: GroundTruthIntensity::night_peak_profile(0.25, 2.0),
                    beta: 0.3,
                    gamma: 2.0,
                    durations: DurationModel::default(),
                }
            }
        }
    }
}

/// Everything the generator produces for one run.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub graph: RoadGraph,
    pub truth: GroundTruthIntensity,
    pub events: Vec<LinkEvents>,
    pub states: TrafficStateWindow,
    pub horizon_hours: f64,
    pub seed: u64,
}

pub const DEFAULT_AVG_DEGREE: f64 = 2.5;

/// Graph, events and speeds for `days` days of `scenario` traffic.
pub fn simulate(scenario: Scenario, n_links: usize, days: f64, seed: u64) -> Result<Simulation> {
    let degree = DEFAULT_AVG_DEGREE.min(n_links.saturating_sub(1) as f64);
    let graph = gen_graph(n_links, degree, seed)?;
    let truth = scenario.intensity(n_links, seed);
    simulate_with(graph, truth, days, seed)
}

pub fn simulate_with(
    graph: RoadGraph,
    truth: GroundTruthIntensity,
    days: f64,
    seed: u64,
) -> Result<Simulation> {
    if !(days > 0.0) {
        return Err(Error::Param(format!("days must be positive, got {days}")));
    }
    let horizon_hours = days * 24.0;
    let events = simulate_events(&graph, &truth, horizon_hours, seed)?;
    let states = gen_speeds(&events, horizon_hours, seed);
    Ok(Simulation {
        graph,
        truth,
        events,
        states,
        horizon_hours,
        seed,
    })
}
