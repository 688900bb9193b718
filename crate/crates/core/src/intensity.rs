//! Periodic-gated cumulative hazard, its exact τ-derivative, and the
//! likelihood/duration losses.
//!
//! The monotone network is
//! `u = tanh(h·A + τ·softplus(P) + b)`,
//! `o = u·softplus(Q) + τ·softplus(s) + c`,
//! `raw = act(o)`, and `Λ(τ) = (raw(τ) - raw(0)) · gate` where
//! `gate = mean(sigmoid(f_p([tod_emb, dow_emb])))`.

use rand::Rng;

use crate::diffmath::{sigmoid, softplus, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::eventseq::EventSequenceBatch;
use crate::nn::Linear;
use crate::synthgen::SLOTS_PER_DAY;

pub const PERIODIC_EMBED_DIM: usize = 8;
pub const LOG_FLOOR: f64 = 1e-10;

/// Output nonlinearity of the monotone network. `Linear` exists for rigged
/// heads with a hazard exactly proportional to τ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Softplus,
    Linear,
}

impl OutputActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Softplus => softplus(x),
            OutputActivation::Linear => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            OutputActivation::Softplus => sigmoid(x),
            OutputActivation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct IntensityHead {
    pub a: ParamId,
    pub b: ParamId,
    pub p: ParamId,
    pub q: ParamId,
    pub s: ParamId,
    pub c: ParamId,
    pub tod_embed: ParamId,
    pub dow_embed: ParamId,
    pub gate: Linear,
    pub duration: Linear,
    pub activation: OutputActivation,
    pub d_model: usize,
    pub hidden: usize,
}

/// Everything about one query that does not depend on τ.
#[derive(Clone, Debug)]
pub struct HazardQuery {
    pre: Vec<f64>,
    slope_p: Vec<f64>,
    slope_q: Vec<f64>,
    slope_s: f64,
    c: f64,
    gate: f64,
    activation: OutputActivation,
    raw0: f64,
}

impl HazardQuery {
    fn output(&self, tau: f64) -> (f64, f64) {
        let mut o = self.c + tau * self.slope_s;
        let mut d = self.slope_s;
        for k in 0..self.pre.len() {
            let u = (self.pre[k] + tau * self.slope_p[k]).tanh();
            o += u * self.slope_q[k];
            d += (1.0 - u * u) * self.slope_p[k] * self.slope_q[k];
        }
        (o, d)
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    /// Λ(τ); exactly 0 at τ = 0.
    pub fn cumulative(&self, tau: f64) -> f64 {
        let (o, _) = self.output(tau);
        (self.activation.apply(o) - self.raw0) * self.gate
    }

    /// λ(τ) = dΛ/dτ by the chain rule through the network.
    pub fn density(&self, tau: f64) -> f64 {
        let (o, d) = self.output(tau);
        self.activation.derivative(o) * d * self.gate
    }
}

impl IntensityHead {
    pub fn new<R: Rng>(params: &mut ParamSet, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::Param("intensity head needs non-zero widths".into()));
        }
        let e = PERIODIC_EMBED_DIM;
        Ok(Self {
            a: params.add_glorot("intensity.a", d, hidden, rng)?,
            b: params.add_const("intensity.b", &[hidden], 0.0)?,
            p: params.add_uniform("intensity.p", &[1, hidden], 1.0, rng)?,
            q: params.add_uniform("intensity.q", &[hidden, 1], 1.0, rng)?,
            s: params.add_const("intensity.s", &[1, 1], 0.0)?,
            c: params.add_const("intensity.c", &[1], 0.0)?,
            tod_embed: params.add_uniform("intensity.tod_embed", &[SLOTS_PER_DAY, e], 0.1, rng)?,
            dow_embed: params.add_uniform("intensity.dow_embed", &[7, e], 0.1, rng)?,
            gate: Linear::new(params, "intensity.gate", 2 * e, d, true, rng)?,
            duration: Linear::new(params, "intensity.duration", d, 1, true, rng)?,
            activation: OutputActivation::Softplus,
            d_model: d,
            hidden,
        })
    }

    /// Sets the head to `Λ(τ) = c·τ·gate` with a linear output and every
    /// other path switched off; with `force_gate` the gate is driven to 1.
    pub fn rig_linear(&mut self, params: &mut ParamSet, c: f64, force_gate: bool) -> Result<()> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Param(format!("rigged slope must be positive, got {c}")));
        }
        let off = -1000.0;
        let (d, m) = (self.d_model, self.hidden);
        *params.value_mut(self.a) = Tensor::zeros(&[d, m]);
        *params.value_mut(self.p) = Tensor::full(&[1, m], off);
        *params.value_mut(self.q) = Tensor::full(&[m, 1], off);
        // softplus⁻¹(c), written to stay accurate for large c.
        let inv = c + (-(-c).exp_m1()).ln();
        *params.value_mut(self.s) = Tensor::full(&[1, 1], inv);
        *params.value_mut(self.c) = Tensor::zeros(&[1]);
        if force_gate {
            *params.value_mut(self.gate.w) = Tensor::zeros(&[2 * PERIODIC_EMBED_DIM, d]);
            *params.value_mut(self.gate.b.expect("gate bias")) = Tensor::full(&[d], 40.0);
        }
        self.activation = OutputActivation::Linear;
        Ok(())
    }

    fn check_periodic(tod: usize, dow: usize) -> Result<()> {
        if tod >= SLOTS_PER_DAY || dow >= 7 {
            return Err(Error::Index(format!("periodic index ({tod}, {dow}) out of range")));
        }
        Ok(())
    }

    /// Gate value in (0, 1) for one time-of-day slot and weekday.
    pub fn gate_value(&self, params: &ParamSet, tod: usize, dow: usize) -> Result<f64> {
        Self::check_periodic(tod, dow)?;
        let e = PERIODIC_EMBED_DIM;
        let mut x = params.value(self.tod_embed).row(tod).to_vec();
        x.extend_from_slice(params.value(self.dow_embed).row(dow));
        debug_assert_eq!(x.len(), 2 * e);
        let logits = self.gate.apply_row(params, &x);
        Ok(logits.iter().map(|&l| sigmoid(l)).sum::<f64>() / logits.len() as f64)
    }

    /// Precomputes the τ-independent part of the hazard for hidden state `h`.
    pub fn query(&self, params: &ParamSet, h: &[f64], tod: usize, dow: usize) -> Result<HazardQuery> {
        if h.len() != self.d_model {
            return Err(Error::shape("hazard query", &[h.len()], &[self.d_model]));
        }
        let m = self.hidden;
        let a = params.value(self.a).data();
        let mut pre = params.value(self.b).data().to_vec();
        for (i, &hi) in h.iter().enumerate() {
            for (k, p) in pre.iter_mut().enumerate() {
                *p += hi * a[i * m + k];
            }
        }
        let mut q = HazardQuery {
            pre,
            slope_p: params.value(self.p).data().iter().map(|&v| softplus(v)).collect(),
            slope_q: params.value(self.q).data().iter().map(|&v| softplus(v)).collect(),
            slope_s: softplus(params.value(self.s).item()),
            c: params.value(self.c).item(),
            gate: self.gate_value(params, tod, dow)?,
            activation: self.activation,
            raw0: 0.0,
        };
        let (o0, _) = q.output(0.0);
        q.raw0 = q.activation.apply(o0);
        Ok(q)
    }

    pub fn cumulative_intensity(&self, params: &ParamSet, h: &[f64], tau: f64, tod: usize, dow: usize) -> Result<f64> {
        if !(tau >= 0.0) {
            return Err(Error::Domain(format!("tau must be non-negative, got {tau}")));
        }
        Ok(self.query(params, h, tod, dow)?.cumulative(tau))
    }

    pub fn intensity_density(&self, params: &ParamSet, h: &[f64], tau: f64, tod: usize, dow: usize) -> Result<f64> {
        if !(tau >= 0.0) {
            return Err(Error::Domain(format!("tau must be non-negative, got {tau}")));
        }
        Ok(self.query(params, h, tod, dow)?.density(tau))
    }

    /// Duration prediction in hours, unclamped.
    pub fn duration_hours(&self, params: &ParamSet, h: &[f64]) -> f64 {
        self.duration.apply_row(params, h)[0]
    }

    /// `[K, 1]` gate for K (tod, dow) pairs.
    fn gate_graph(&self, g: &mut Graph, params: &ParamSet, tod: &[usize], dow: &[usize]) -> Result<Var> {
        for (&t, &d) in tod.iter().zip(dow) {
            Self::check_periodic(t, d)?;
        }
        let te = g.param(params, self.tod_embed);
        let de = g.param(params, self.dow_embed);
        let te = g.gather_rows(te, tod)?;
        let de = g.gather_rows(de, dow)?;
        let x = g.concat_last(&[te, de])?;
        let logits = self.gate.forward(g, params, x)?;
        let s = g.sigmoid(logits);
        g.mean_last(s)
    }

    /// `(Λ, λ)`, each `[K, 1]`, for hidden rows `h` `[K, D]` at gaps `tau`.
    pub fn hazard_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        h: Var,
        tau: &[f64],
        tod: &[usize],
        dow: &[usize],
    ) -> Result<(Var, Var)> {
        let k = tau.len();
        if g.shape(h) != [k, self.d_model] {
            return Err(Error::shape("hazard_graph", g.shape(h), &[k, self.d_model]));
        }
        if tau.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Domain("tau must be non-negative".into()));
        }
        let a = g.param(params, self.a);
        let b = g.param(params, self.b);
        let ha = g.matmul(h, a)?;
        let ha = g.add(ha, b)?;
        let sp_p = g.param(params, self.p);
        let sp_p = g.softplus(sp_p);
        let sp_q = g.param(params, self.q);
        let sp_q = g.softplus(sp_q);
        let sp_s = g.param(params, self.s);
        let sp_s = g.softplus(sp_s);
        let c = g.param(params, self.c);

        let mut outputs = Vec::with_capacity(2);
        let mut tau_path = None;
        for t in [tau.to_vec(), vec![0.0; k]] {
            let tv = g.constant(Tensor::new(&[k, 1], t)?);
            let pre = g.matmul(tv, sp_p)?;
            let pre = g.add(ha, pre)?;
            let u = g.tanh(pre);
            let o = g.matmul(u, sp_q)?;
            let skip = g.matmul(tv, sp_s)?;
            let o = g.add(o, skip)?;
            let o = g.add(o, c)?;
            if tau_path.is_none() {
                tau_path = Some((o, u));
            }
            outputs.push(match self.activation {
                OutputActivation::Softplus => g.softplus(o),
                OutputActivation::Linear => o,
            });
        }
        let gate = self.gate_graph(g, params, tod, dow)?;
        let raw = g.sub(outputs[0], outputs[1])?;
        let cum = g.mul(raw, gate)?;

        let (o, u) = tau_path.expect("tau path");
        let u2 = g.square(u);
        let du = g.neg(u2);
        let du = g.add_scalar(du, 1.0);
        let du = g.mul(du, sp_p)?;
        let dout = g.matmul(du, sp_q)?;
        let dout = g.add(dout, sp_s)?;
        let dens = match self.activation {
            OutputActivation::Softplus => {
                let s = g.sigmoid(o);
                g.mul(s, dout)?
            }
            OutputActivation::Linear => dout,
        };
        let dens = g.mul(dens, gate)?;
        Ok((cum, dens))
    }
}

/// Hidden rows, gaps and periodic features of every real transition.
struct Transitions {
    rows: Vec<usize>,
    tau: Vec<f64>,
    tod: Vec<usize>,
    dow: Vec<usize>,
    target_hours: Vec<f64>,
}

fn transitions(batch: &EventSequenceBatch) -> Result<Transitions> {
    let pairs = batch.transitions();
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("no real transitions".into()));
    }
    let mut t = Transitions {
        rows: Vec::with_capacity(pairs.len()),
        tau: Vec::with_capacity(pairs.len()),
        tod: Vec::with_capacity(pairs.len()),
        dow: Vec::with_capacity(pairs.len()),
        target_hours: Vec::with_capacity(pairs.len()),
    };
    for (n, i) in pairs {
        let origin = batch.at(n, i);
        let (gap, duration) = batch.transition_target(n, i);
        t.rows.push(origin);
        t.tau.push(gap);
        t.tod.push(batch.time_of_day[origin]);
        t.dow.push(batch.day_of_week[origin]);
        t.target_hours.push(duration / 60.0);
    }
    Ok(t)
}

fn gather_hidden(g: &mut Graph, hidden: Var, batch: &EventSequenceBatch, rows: &[usize]) -> Result<Var> {
    let s = g.shape(hidden).to_vec();
    if s.len() != 3 || s[0] != batch.n_links || s[1] != batch.l_max {
        return Err(Error::shape("hidden", &s, &[batch.n_links, batch.l_max, 0]));
    }
    let flat = g.reshape(hidden, &[s[0] * s[1], s[2]])?;
    g.gather_rows(flat, rows)
}

/// Per-transition NLL terms `Λ - log max(λ, 1e-10)` as `[K, 1]`.
pub fn nll_terms(
    g: &mut Graph,
    params: &ParamSet,
    head: &IntensityHead,
    hidden: Var,
    batch: &EventSequenceBatch,
) -> Result<Var> {
    let t = transitions(batch)?;
    let h = gather_hidden(g, hidden, batch, &t.rows)?;
    let (cum, dens) = head.hazard_graph(g, params, h, &t.tau, &t.tod, &t.dow)?;
    let dens = g.clamp_min(dens, LOG_FLOOR);
    let logd = g.ln(dens);
    g.sub(cum, logd)
}

/// Mean NLL over the real transitions of the batch.
pub fn nll(g: &mut Graph, params: &ParamSet, head: &IntensityHead, hidden: Var, batch: &EventSequenceBatch) -> Result<Var> {
    let terms = nll_terms(g, params, head, hidden, batch)?;
    Ok(g.mean_all(terms))
}

/// Mean absolute error (hours) of the duration head on the next event.
pub fn duration_loss(
    g: &mut Graph,
    params: &ParamSet,
    head: &IntensityHead,
    hidden: Var,
    batch: &EventSequenceBatch,
) -> Result<Var> {
    let t = transitions(batch)?;
    let h = gather_hidden(g, hidden, batch, &t.rows)?;
    let pred = head.duration.forward(g, params, h)?;
    let target = g.constant(Tensor::new(&[t.rows.len(), 1], t.target_hours)?);
    let err = g.sub(pred, target)?;
    let err = g.abs(err);
    Ok(g.mean_all(err))
}

/// `nll + alpha · duration_loss`.
pub fn total_loss(
    g: &mut Graph,
    params: &ParamSet,
    head: &IntensityHead,
    hidden: Var,
    batch: &EventSequenceBatch,
    cfg: &LossConfig,
) -> Result<Var> {
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Param(format!("alpha must be >= 0, got {}", cfg.alpha)));
    }
    let n = nll(g, params, head, hidden, batch)?;
    if cfg.alpha == 0.0 {
        return Ok(n);
    }
    let d = duration_loss(g, params, head, hidden, batch)?;
    let d = g.scale(d, cfg.alpha);
    g.add(n, d)
}
