//! Congestion-event embedding and the continuous GRU (GRU-flow between
//! events, discrete GRU at events).

use rand::Rng;

use crate::diffmath::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub flow_layers: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { flow_layers: 2 }
    }
}

/// Per-link padded event sequences of one window, `[N, Lmax]` row-major.
///
/// `inter_event[n][i]` is the gap in hours from event `i - 1` to event `i`
/// (0 for the first event and for padding). `durations` are the minutes
/// observed inside the window and feed the embedding; `target_durations` are
/// the full event durations used as regression labels.
///
/// `next_gap`/`next_duration` (one per link) describe the first event after
/// the window, when it is known: it closes the transition that starts at the
/// link's last event in the window.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequenceBatch {
    pub n_links: usize,
    pub l_max: usize,
    pub durations: Vec<f64>,
    pub target_durations: Vec<f64>,
    pub inter_event: Vec<f64>,
    pub time_of_day: Vec<usize>,
    pub day_of_week: Vec<usize>,
    pub mask: Vec<bool>,
    /// Hours from the last event in the window to the following event.
    pub next_gap: Vec<Option<f64>>,
    /// Minutes.
    pub next_duration: Vec<f64>,
}

impl EventSequenceBatch {
    pub fn empty(n_links: usize, l_max: usize) -> Self {
        let len = n_links * l_max;
        Self {
            n_links,
            l_max,
            durations: vec![0.0; len],
            target_durations: vec![0.0; len],
            inter_event: vec![0.0; len],
            time_of_day: vec![0; len],
            day_of_week: vec![0; len],
            mask: vec![false; len],
            next_gap: vec![None; n_links],
            next_duration: vec![0.0; n_links],
        }
    }

    pub fn at(&self, link: usize, i: usize) -> usize {
        link * self.l_max + i
    }

    /// Number of real events on `link`.
    pub fn len_of(&self, link: usize) -> usize {
        self.mask[link * self.l_max..(link + 1) * self.l_max]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    /// Real transitions `(link, i)` from event `i` to the next event, which
    /// is event `i + 1` or, for the last event, the one after the window.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        (0..self.n_links)
            .flat_map(|n| {
                let len = self.len_of(n);
                let last = if self.next_gap[n].is_some() { len } else { len.saturating_sub(1) };
                (0..last).map(move |i| (n, i))
            })
            .collect()
    }

    /// Gap (hours) and next-event duration (minutes) of transition `(link, i)`.
    pub fn transition_target(&self, link: usize, i: usize) -> (f64, f64) {
        if i + 1 < self.len_of(link) {
            let k = self.at(link, i + 1);
            (self.inter_event[k], self.target_durations[k])
        } else {
            let gap = self.next_gap[link].expect("transition past the last event needs a next event");
            (gap, self.next_duration[link])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.n_links * self.l_max;
        if self.next_gap.len() != self.n_links || self.next_duration.len() != self.n_links {
            return Err(Error::Data(format!("next-event fields must have {} entries", self.n_links)));
        }
        let lens = [
            self.durations.len(),
            self.target_durations.len(),
            self.inter_event.len(),
            self.time_of_day.len(),
            self.day_of_week.len(),
            self.mask.len(),
        ];
        if lens.iter().any(|&l| l != len) {
            return Err(Error::Data(format!("event batch fields must all have {len} entries")));
        }
        for n in 0..self.n_links {
            let real = self.len_of(n);
            if let Some(gap) = self.next_gap[n] {
                if real == 0 || !(gap >= 0.0) || !(self.next_duration[n] > 0.0) {
                    return Err(Error::Data(format!("link {n}: bad next event")));
                }
            }
            for i in 0..self.l_max {
                let k = self.at(n, i);
                if self.mask[k] != (i < real) {
                    return Err(Error::Data(format!("link {n}: padding must trail real events")));
                }
                if self.mask[k] {
                    if !(self.inter_event[k] >= 0.0) || !(self.durations[k] > 0.0) {
                        return Err(Error::Data(format!("link {n} event {i}: bad gap or duration")));
                    }
                    if self.time_of_day[k] >= 288 || self.day_of_week[k] >= 7 {
                        return Err(Error::Data(format!("link {n} event {i}: periodic index out of range")));
                    }
                } else if self.inter_event[k] != 0.0 {
                    return Err(Error::Data(format!("link {n}: padded gap must be 0")));
                }
            }
        }
        Ok(())
    }

    /// Appends `extra` padded positions to every link.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = Self::empty(self.n_links, self.l_max + extra);
        out.next_gap = self.next_gap.clone();
        out.next_duration = self.next_duration.clone();
        for n in 0..self.n_links {
            for i in 0..self.l_max {
                let (src, dst) = (self.at(n, i), out.at(n, i));
                out.durations[dst] = self.durations[src];
                out.target_durations[dst] = self.target_durations[src];
                out.inter_event[dst] = self.inter_event[src];
                out.time_of_day[dst] = self.time_of_day[src];
                out.day_of_week[dst] = self.day_of_week[src];
                out.mask[dst] = self.mask[src];
            }
        }
        out
    }
}

/// One GRU-flow layer:
/// `F(τ, h) = h + tanh(τ W_τ) ⊙ (1 - z) ⊙ (g - h)` with gates on `[τ, h]`.
#[derive(Clone, Debug)]
pub struct GruFlowLayer {
    pub w_tau: ParamId,
    pub z: Linear,
    pub r: Linear,
    pub g: Linear,
}

impl GruFlowLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_tau: params.add_glorot(format!("{name}.w_tau"), 1, d, rng)?,
            z: Linear::new(params, &format!("{name}.z"), d + 1, d, true, rng)?,
            r: Linear::new(params, &format!("{name}.r"), d + 1, d, true, rng)?,
            g: Linear::new(params, &format!("{name}.g"), d + 1, d, true, rng)?,
        })
    }

    /// `h` is `[B, D]`, `tau` is `[B, 1]` in hours.
    pub fn forward(&self, gr: &mut Graph, params: &ParamSet, h: Var, tau: Var) -> Result<Var> {
        let x = gr.concat_last(&[tau, h])?;
        let z = self.z.forward(gr, params, x)?;
        let z = gr.sigmoid(z);
        let r = self.r.forward(gr, params, x)?;
        let r = gr.sigmoid(r);
        let rh = gr.mul(r, h)?;
        let xr = gr.concat_last(&[tau, rh])?;
        let cand = self.g.forward(gr, params, xr)?;
        let cand = gr.tanh(cand);
        let wt = gr.param(params, self.w_tau);
        let phi = gr.matmul(tau, wt)?;
        let phi = gr.tanh(phi);
        let keep = gr.neg(z);
        let keep = gr.add_scalar(keep, 1.0);
        let delta = gr.sub(cand, h)?;
        let step = gr.mul(keep, delta)?;
        let step = gr.mul(phi, step)?;
        gr.add(h, step)
    }
}

/// Standard GRU cell: `h' = z ⊙ h + (1 - z) ⊙ g`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub z: Linear,
    pub r: Linear,
    pub g: Linear,
}

impl GruCell {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            z: Linear::new(params, &format!("{name}.z"), 2 * d, d, true, rng)?,
            r: Linear::new(params, &format!("{name}.r"), 2 * d, d, true, rng)?,
            g: Linear::new(params, &format!("{name}.g"), 2 * d, d, true, rng)?,
        })
    }

    pub fn forward(&self, gr: &mut Graph, params: &ParamSet, x: Var, h: Var) -> Result<Var> {
        let xh = gr.concat_last(&[x, h])?;
        let z = self.z.forward(gr, params, xh)?;
        let z = gr.sigmoid(z);
        let r = self.r.forward(gr, params, xh)?;
        let r = gr.sigmoid(r);
        let rh = gr.mul(r, h)?;
        let xr = gr.concat_last(&[x, rh])?;
        let cand = self.g.forward(gr, params, xr)?;
        let cand = gr.tanh(cand);
        let kept = gr.mul(z, h)?;
        let keep = gr.neg(z);
        let keep = gr.add_scalar(keep, 1.0);
        let fresh = gr.mul(keep, cand)?;
        gr.add(kept, fresh)
    }
}

/// Event embedding plus the GRU-flow stack and the discrete cell.
#[derive(Clone, Debug)]
pub struct ContinuousGru {
    pub embed: Linear,
    pub flows: Vec<GruFlowLayer>,
    pub cell: GruCell,
    pub d_model: usize,
}

impl ContinuousGru {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &FlowConfig, d: usize, rng: &mut R) -> Result<Self> {
        if cfg.flow_layers == 0 {
            return Err(Error::Param("flow_layers must be at least 1".into()));
        }
        Ok(Self {
            embed: Linear::new(params, "events.embed", d + 1, d, true, rng)?,
            flows: (0..cfg.flow_layers)
                .map(|l| GruFlowLayer::new(params, &format!("events.flow{l}"), d, rng))
                .collect::<Result<_>>()?,
            cell: GruCell::new(params, "events.cell", d, rng)?,
            d_model: d,
        })
    }

    /// `W_e · [Hc, duration] + b_e` with durations in hours; `[N, Lmax, D]`.
    pub fn event_embed(&self, g: &mut Graph, params: &ParamSet, hc: Var, batch: &EventSequenceBatch) -> Result<Var> {
        let hours: Vec<f64> = batch.durations.iter().map(|m| m / 60.0).collect();
        let d = g.constant(Tensor::new(&[batch.n_links, batch.l_max, 1], hours)?);
        let x = g.concat_last(&[hc, d])?;
        self.embed.forward(g, params, x)
    }

    /// All flow layers at the same elapsed time `tau` (`[B, 1]` hours).
    pub fn flow(&self, g: &mut Graph, params: &ParamSet, h: Var, tau: Var) -> Result<Var> {
        if g.value(tau).data().iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Domain("flow time must be non-negative".into()));
        }
        let mut h = h;
        for layer in &self.flows {
            h = layer.forward(g, params, h, tau)?;
        }
        Ok(h)
    }

    /// Hidden state after each event, `[N, Lmax, D]`; padded positions carry
    /// the last real state forward internally and output zeros.
    pub fn unroll(&self, g: &mut Graph, params: &ParamSet, batch: &EventSequenceBatch, he: Var) -> Result<Var> {
        let (n, l_max, d) = (batch.n_links, batch.l_max, self.d_model);
        if g.shape(he) != [n, l_max, d] {
            return Err(Error::shape("unroll", g.shape(he), &[n, l_max, d]));
        }
        if l_max == 0 {
            return g.reshape(he, &[n, 0, d]);
        }
        let mut h = g.constant(Tensor::zeros(&[n, d]));
        let mut outs = Vec::with_capacity(l_max);
        for i in 0..l_max {
            let x = g.select(he, 1, i)?;
            let prev = if i == 0 {
                h
            } else {
                let tau: Vec<f64> = (0..n).map(|k| batch.inter_event[batch.at(k, i)]).collect();
                let tau = g.constant(Tensor::new(&[n, 1], tau)?);
                self.flow(g, params, h, tau)?
            };
            let cell = self.cell.forward(g, params, x, prev)?;
            let m: Vec<f64> = (0..n).map(|k| batch.mask[batch.at(k, i)] as u8 as f64).collect();
            if m.iter().all(|&v| v == 1.0) {
                h = cell;
                outs.push(cell);
                continue;
            }
            let keep: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            let m = g.constant(Tensor::new(&[n, 1], m)?);
            let keep = g.constant(Tensor::new(&[n, 1], keep)?);
            let out = g.mul(cell, m)?;
            let carried = g.mul(h, keep)?;
            h = g.add(out, carried)?;
            outs.push(out);
        }
        g.stack(&outs, 1)
    }
}
