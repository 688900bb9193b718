use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::events::LinkEvents;
use super::truth::SLOT_MINUTES;
use crate::error::{Error, Result};

/// Per-link speed (km/h) and binary congestion labels on the 5-minute grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficStateWindow {
    pub n_links: usize,
    pub n_slots: usize,
    /// Row-major `[n_links, n_slots]`.
    pub speeds: Vec<f64>,
    pub condition: Vec<u8>,
    pub free_flow: Vec<f64>,
}

impl TrafficStateWindow {
    pub fn speed(&self, link: usize, slot: usize) -> f64 {
        self.speeds[link * self.n_slots + slot]
    }

    pub fn condition(&self, link: usize, slot: usize) -> u8 {
        self.condition[link * self.n_slots + slot]
    }

    /// Sub-window of `len` slots ending (exclusively) at `end_slot`.
    pub fn window(&self, end_slot: usize, len: usize) -> Result<TrafficStateWindow> {
        if end_slot > self.n_slots || len > end_slot {
            return Err(Error::Index(format!(
                "window of {len} slots ending at {end_slot} outside [0, {})",
                self.n_slots
            )));
        }
        let start = end_slot - len;
        let mut speeds = Vec::with_capacity(self.n_links * len);
        let mut condition = Vec::with_capacity(self.n_links * len);
        for n in 0..self.n_links {
            let row = n * self.n_slots;
            speeds.extend_from_slice(&self.speeds[row + start..row + end_slot]);
            condition.extend_from_slice(&self.condition[row + start..row + end_slot]);
        }
        Ok(TrafficStateWindow {
            n_links: self.n_links,
            n_slots: len,
            speeds,
            condition,
            free_flow: self.free_flow.clone(),
        })
    }
}

/// Condition labels implied by the events: a slot is congested when it
/// overlaps any event of that link.
pub fn labels_from_events(events: &[LinkEvents], n_slots: usize) -> Vec<u8> {
    let mut cond = vec![0u8; events.len() * n_slots];
    for (n, list) in events.iter().enumerate() {
        for e in list {
            for s in e.slot_range() {
                if s < n_slots {
                    cond[n * n_slots + s] = 1;
                }
            }
        }
    }
    cond
}

/// Speed series with a daily sinusoid and noise around each link's free-flow
/// speed; inside an event the speed drops by 40-70% at onset and recovers
/// linearly over the last third of the event.
pub fn gen_speeds(events: &[LinkEvents], horizon_hours: f64, seed: u64) -> TrafficStateWindow {
    let n_links = events.len();
    let n_slots = (horizon_hours * 60.0 / SLOT_MINUTES).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let free_flow: Vec<f64> = (0..n_links).map(|_| rng.random_range(45.0..75.0)).collect();
    let mut speeds = vec![0.0; n_links * n_slots];
    let mut condition = vec![0u8; n_links * n_slots];
    for n in 0..n_links {
        let vf = free_flow[n];
        let row = &mut speeds[n * n_slots..(n + 1) * n_slots];
        for (s, v) in row.iter_mut().enumerate() {
            let hour = s as f64 * SLOT_MINUTES / 60.0;
            let daily = 0.9 + 0.06 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin();
            *v = vf * daily + noise.sample(&mut rng);
        }
        for e in &events[n] {
            let drop = rng.random_range(0.4..0.7);
            let slots: Vec<usize> = e.slot_range().filter(|&s| s < n_slots).collect();
            let len = slots.len();
            let recovery = len / 3;
            for (j, &s) in slots.iter().enumerate() {
                let from_end = len - j;
                let weight = if from_end <= recovery {
                    from_end as f64 / (recovery + 1) as f64
                } else {
                    1.0
                };
                let v = vf * (1.0 - drop * weight) + 0.5 * noise.sample(&mut rng);
                row[s] = v.clamp(1.0, vf - 0.5);
                condition[n * n_slots + s] = 1;
            }
        }
    }
    TrafficStateWindow {
        n_links,
        n_slots,
        speeds,
        condition,
        free_flow,
    }
}
