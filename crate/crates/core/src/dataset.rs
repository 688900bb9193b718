//! Sliding six-hour windows over a simulated or loaded dataset, split
//! chronologically into train/validation/test ranges.

use crate::encoder::SpatioTemporalIndex;
use crate::error::{Error, Result};
use crate::eventseq::EventSequenceBatch;
use crate::synthgen::{validate_events, CongestionEvent, LinkEvents, RoadGraph, Simulation, TrafficStateWindow, SLOT_MINUTES};

/// Slots between consecutive window ends (one hour).
pub const WINDOW_STRIDE: usize = 12;
/// How far past the window end the next event may lie and still count.
pub const NEXT_EVENT_HORIZON_MIN: f64 = 24.0 * 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Traffic states and events of one window, laid out for the model.
#[derive(Clone, Debug)]
pub struct WindowSample {
    /// Exclusive end slot in dataset coordinates.
    pub end_slot: usize,
    pub states: TrafficStateWindow,
    pub indexes: Vec<Vec<SpatioTemporalIndex>>,
    pub batch: EventSequenceBatch,
    /// The window's events per link, in dataset time.
    pub events: Vec<LinkEvents>,
}

impl WindowSample {
    pub fn end_minutes(&self) -> f64 {
        self.end_slot as f64 * SLOT_MINUTES
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: RoadGraph,
    pub events: Vec<LinkEvents>,
    pub states: TrafficStateWindow,
    pub window_slots: usize,
    pub fractions: SplitFractions,
}

impl Dataset {
    pub fn new(
        graph: RoadGraph,
        events: Vec<LinkEvents>,
        states: TrafficStateWindow,
        window_slots: usize,
        fractions: SplitFractions,
    ) -> Result<Self> {
        fractions.validate()?;
        if events.len() != graph.n_links || states.n_links != graph.n_links {
            return Err(Error::Data(format!(
                "graph has {} links, events {}, speeds {}",
                graph.n_links,
                events.len(),
                states.n_links
            )));
        }
        if window_slots == 0 {
            return Err(Error::Param("window_slots must be at least 1".into()));
        }
        validate_events(&events)?;
        Ok(Self {
            graph,
            events,
            states,
            window_slots,
            fractions,
        })
    }

    pub fn from_simulation(sim: &Simulation, window_slots: usize, fractions: SplitFractions) -> Result<Self> {
        Self::new(
            sim.graph.clone(),
            sim.events.clone(),
            sim.states.clone(),
            window_slots,
            fractions,
        )
    }

    pub fn n_links(&self) -> usize {
        self.graph.n_links
    }

    /// `[start, end)` slot range of a split.
    pub fn split_range(&self, split: Split) -> (usize, usize) {
        let n = self.states.n_slots;
        let f = &self.fractions;
        let a = (n as f64 * f.train).round() as usize;
        let b = (n as f64 * (f.train + f.validation)).round() as usize;
        match split {
            Split::Train => (0, a),
            Split::Validation => (a, b),
            Split::Test => (b, n),
        }
    }

    /// Exclusive end slot of the split that contains `slot`.
    pub fn containing_split_end(&self, slot: usize) -> usize {
        [Split::Train, Split::Validation, Split::Test]
            .iter()
            .map(|&s| self.split_range(s).1)
            .find(|&b| slot < b)
            .unwrap_or(self.states.n_slots)
    }

    /// End slots of the windows lying entirely inside `split`.
    pub fn window_ends(&self, split: Split) -> Vec<usize> {
        let (start, end) = self.split_range(split);
        (start + self.window_slots..=end).step_by(WINDOW_STRIDE).collect()
    }

    /// The window of `window_slots` slots ending (exclusive) at `end_slot`.
    pub fn sample(&self, end_slot: usize) -> Result<WindowSample> {
        let t_len = self.window_slots;
        let states = self.states.window(end_slot, t_len)?;
        let start = end_slot - t_len;
        let (t0, t1) = (start as f64 * SLOT_MINUTES, end_slot as f64 * SLOT_MINUTES);
        let n = self.n_links();
        let limit = self.containing_split_end(end_slot - 1) as f64 * SLOT_MINUTES;
        let mut events: Vec<LinkEvents> = Vec::with_capacity(n);
        let mut following: Vec<Option<&CongestionEvent>> = Vec::with_capacity(n);
        for list in &self.events {
            let from = list.partition_point(|e| e.t_occ < t0);
            let to = list.partition_point(|e| e.t_occ < t1);
            events.push(list[from..to].to_vec());
            following.push(list.get(to).filter(|e| to > from && e.t_occ < limit));
        }
        let l_max = events.iter().map(Vec::len).max().unwrap_or(0);
        let mut batch = EventSequenceBatch::empty(n, l_max);
        for (link, next) in following.iter().enumerate() {
            if let Some(e) = next {
                let last = events[link].last().expect("next event implies a last event");
                batch.next_gap[link] = Some((e.t_occ - last.t_occ) / 60.0);
                batch.next_duration[link] = e.duration;
            }
        }
        let mut indexes = Vec::with_capacity(n);
        for (link, list) in events.iter().enumerate() {
            let mut idx = Vec::with_capacity(list.len());
            for (i, e) in list.iter().enumerate() {
                let k = batch.at(link, i);
                batch.mask[k] = true;
                batch.durations[k] = e.duration.min(t1 - e.t_occ);
                batch.target_durations[k] = e.duration;
                batch.inter_event[k] = if i == 0 { 0.0 } else { (e.t_occ - list[i - 1].t_occ) / 60.0 };
                batch.time_of_day[k] = e.time_of_day();
                batch.day_of_week[k] = e.day_of_week();
                let slots: Vec<usize> = e
                    .slot_range()
                    .filter(|&s| s >= start && s < end_slot)
                    .map(|s| s - start)
                    .collect();
                idx.push(SpatioTemporalIndex::new(link, slots));
            }
            indexes.push(idx);
        }
        Ok(WindowSample {
            end_slot,
            states,
            indexes,
            batch,
            events,
        })
    }

    /// First event on `link` starting at or after `t_min` and no later than
    /// the next-event horizon.
    pub fn next_event(&self, link: usize, t_min: f64) -> Option<&CongestionEvent> {
        let list = &self.events[link];
        let i = list.partition_point(|e| e.t_occ < t_min);
        list.get(i).filter(|e| e.t_occ - t_min <= NEXT_EVENT_HORIZON_MIN)
    }

    /// Gaps (hours) between consecutive events that both start inside the
    /// split, per link, and the durations (minutes) of those events.
    pub fn split_statistics(&self, split: Split) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (a, b) = self.split_range(split);
        let (t0, t1) = (a as f64 * SLOT_MINUTES, b as f64 * SLOT_MINUTES);
        let mut gaps = Vec::with_capacity(self.n_links());
        let mut durations = Vec::with_capacity(self.n_links());
        for list in &self.events {
            let inside: Vec<&CongestionEvent> = list.iter().filter(|e| e.t_occ >= t0 && e.t_occ < t1).collect();
            gaps.push(inside.windows(2).map(|w| (w[1].t_occ - w[0].t_occ) / 60.0).collect());
            durations.push(inside.iter().map(|e| e.duration).collect());
        }
        (gaps, durations)
    }
}
