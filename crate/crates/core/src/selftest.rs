//! Quick property checks run by `stgnpp selftest`.
//!
//! Each check builds small random models and compares them against an
//! independent computation; none needs a dataset on disk.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, SplitFractions};
use crate::diffmath::{grad_check, Graph, ParamSet, Tensor};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::eventseq::{ContinuousGru, EventSequenceBatch, FlowConfig};
use crate::intensity::{total_loss, IntensityHead, LossConfig};
use crate::model::{ModelConfig, Stgnpp};
use crate::predict::{median_after, TAU_MAX_HOURS};
use crate::synthgen::{gen_graph, CongestionEvent, RoadGraph, TrafficStateWindow};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_row(d: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-2.0..2.0)).collect()
}

fn random_head(seed: u64) -> (ParamSet, IntensityHead) {
    let mut params = ParamSet::new();
    let head = IntensityHead::new(&mut params, 6, 6, &mut rng(seed)).expect("head");
    (params, head)
}

/// A 4-link model and one window holding eight events.
pub fn toy_window(seed: u64) -> Result<(Stgnpp, Dataset)> {
    let mut cfg = ModelConfig::new(4);
    cfg.encoder = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_stacks: 1,
        gcn_layers: 2,
        adaptive_dim: 2,
        window_slots: 12,
    };
    cfg.hazard_hidden = 6;
    let model = Stgnpp::new(cfg, seed)?;
    let graph = RoadGraph::from_edges(4, &[(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)])?;
    let mut r = rng(seed ^ 0xfeed);
    let n_slots = 12;
    let speeds = (0..4 * n_slots).map(|_| r.random_range(20.0..70.0)).collect();
    let condition = (0..4 * n_slots).map(|_| r.random_range(0..2u8)).collect();
    let states = TrafficStateWindow {
        n_links: 4,
        n_slots,
        speeds,
        condition,
        free_flow: vec![70.0; 4],
    };
    let at = [
        (0, 2.0, 4.0),
        (0, 13.0, 9.0),
        (0, 31.0, 6.0),
        (1, 7.0, 20.0),
        (1, 44.0, 3.0),
        (2, 20.0, 11.0),
        (2, 35.0, 2.0),
        (2, 52.0, 30.0),
    ];
    let mut events = vec![Vec::new(); 4];
    for &(link, t, d) in &at {
        events[link].push(CongestionEvent::new(link, t, d));
    }
    let fractions = SplitFractions {
        train: 1.0 - 2e-9,
        validation: 1e-9,
        test: 1e-9,
    };
    Ok((model, Dataset::new(graph, events, states, 12, fractions)?))
}

pub fn gradient_integrity(seed: u64) -> Result<Check> {
    let (model, ds) = toy_window(seed)?;
    let sample = ds.sample(12)?;
    let loss = LossConfig::default();
    let report = grad_check(
        |g, p| model.loss_with(g, p, &sample, &ds.graph.adjacency, &loss),
        &model.params,
        1e-4,
    )?;
    Ok(Check::new(
        "gradient integrity",
        report.passed(),
        format!("max relative error {:.2e} over {} parameters", report.max_rel_error, report.n_checked),
    ))
}

pub fn hazard_well_formed(n_heads: usize, seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst_drop = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut origin_ok = true;
    let mut negative = 0usize;
    for k in 0..n_heads {
        let (params, head) = random_head(seed.wrapping_add(k as u64));
        let h = random_row(6, &mut r);
        let q = head.query(&params, &h, r.random_range(0..288), r.random_range(0..7))?;
        origin_ok &= q.cumulative(0.0) == 0.0;
        let mut prev = 0.0;
        for j in 1..=20 {
            let tau = j as f64 * 0.5;
            let c = q.cumulative(tau);
            worst_drop = worst_drop.max(prev - c);
            prev = c;
            if q.density(tau) < 0.0 {
                negative += 1;
            }
        }
        let tau: f64 = r.random_range(0.05..8.0);
        let step = 1e-5 * tau.max(1.0);
        let fd = (q.cumulative(tau + step) - q.cumulative(tau - step)) / (2.0 * step);
        let an = q.density(tau);
        worst_fd = worst_fd.max((fd - an).abs() / an.abs().max(1e-3));
    }
    Ok(Check::new(
        "hazard well-formedness",
        origin_ok && worst_drop <= 1e-12 && negative == 0 && worst_fd <= 1e-6,
        format!("max decrease {worst_drop:.1e}, max derivative error {worst_fd:.1e}, negative densities {negative}"),
    ))
}

pub fn density_normalised(n_heads: usize, seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let points = 10_000;
    for k in 0..n_heads {
        let (params, head) = random_head(seed.wrapping_add(1000 + k as u64));
        let q = head.query(&params, &random_row(6, &mut r), 12, 3)?;
        let tau_max = 10.0;
        let step = tau_max / points as f64;
        let f = |t: f64| q.density(t) * (-q.cumulative(t)).exp();
        let mut integral = 0.5 * (f(0.0) + f(tau_max));
        for i in 1..points {
            integral += f(i as f64 * step);
        }
        integral *= step;
        worst = worst.max((integral - (1.0 - (-q.cumulative(tau_max)).exp())).abs());
    }
    Ok(Check::new(
        "density normalisation",
        worst <= 1e-3,
        format!("max deviation {worst:.1e}"),
    ))
}

pub fn median_rigged(seed: u64) -> Result<Check> {
    let (mut params, mut head) = random_head(seed);
    let mut worst = 0.0f64;
    for c in [0.5, 1.0, 2.0, 5.0] {
        head.rig_linear(&mut params, c, true)?;
        let q = head.query(&params, &[0.0; 6], 0, 0)?;
        let m = median_after(&q, 0.0, TAU_MAX_HOURS)?;
        worst = worst.max((m - LN_2 / c).abs());
    }
    Ok(Check::new("median of rigged hazard", worst <= 1e-6, format!("max error {worst:.1e} h")))
}

pub fn encoder_causal(seed: u64) -> Result<Check> {
    let t_len = 8;
    let n = 4;
    let cfg = EncoderConfig {
        d_model: 8,
        n_heads: 2,
        n_stacks: 2,
        gcn_layers: 2,
        adaptive_dim: 3,
        window_slots: t_len,
    };
    let graph = gen_graph(n, 2.0, seed)?;
    let mut params = ParamSet::new();
    let enc = Encoder::new(&mut params, &cfg, n, &mut rng(seed))?;
    let mut r = rng(seed + 1);
    let speeds: Vec<f64> = (0..n * t_len).map(|_| r.random_range(10.0..70.0)).collect();
    let base = TrafficStateWindow {
        n_links: n,
        n_slots: t_len,
        condition: speeds.iter().map(|&v| (v < 35.0) as u8).collect(),
        speeds,
        free_flow: vec![70.0; n],
    };
    let run = |s: &TrafficStateWindow| -> Result<Tensor> {
        let mut g = Graph::new();
        let o = enc.forward(&mut g, &params, s, &graph.adjacency)?;
        Ok(g.value(o).clone())
    };
    let out = run(&base)?;
    let d = cfg.d_model;
    let mut violations = 0;
    for tp in 0..t_len {
        for link in 0..n {
            let mut s = base.clone();
            s.speeds[link * t_len + tp] += 17.0;
            s.condition[link * t_len + tp] ^= 1;
            let o = run(&s)?;
            for m in 0..n {
                for t in 0..tp {
                    let at = (m * t_len + t) * d;
                    if o.data()[at..at + d] != out.data()[at..at + d] {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok(Check::new(
        "encoder causality",
        violations == 0,
        format!("{violations} earlier outputs changed"),
    ))
}

pub fn flow_identity(n: usize, seed: u64) -> Result<Check> {
    let mut params = ParamSet::new();
    let gru = ContinuousGru::new(&mut params, &FlowConfig::default(), 8, &mut rng(seed))?;
    let mut r = rng(seed + 7);
    let h = Tensor::from_fn(&[n, 8], |_| r.random_range(-5.0..5.0));
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let tau = g.constant(Tensor::zeros(&[n, 1]));
    let out = gru.flow(&mut g, &params, hv, tau)?;
    let same = g.value(out).data() == h.data();
    Ok(Check::new("flow identity at zero time", same, format!("{n} states")))
}

pub fn padding_neutral(seed: u64) -> Result<Check> {
    let (model, ds) = toy_window(seed)?;
    let sample = ds.sample(12)?;
    let batch = &sample.batch;
    let d = model.cfg.encoder.d_model;
    let extra = 3;
    let wide: EventSequenceBatch = batch.padded(extra);
    let mut r = rng(seed + 3);
    let he = Tensor::from_fn(&[batch.n_links, batch.l_max, d], |_| r.random_range(-1.0..1.0));
    let mut he_wide = Tensor::from_fn(&[batch.n_links, wide.l_max, d], |_| r.random_range(-1.0..1.0));
    for n in 0..batch.n_links {
        for i in 0..batch.l_max {
            let (src, dst) = ((n * batch.l_max + i) * d, (n * wide.l_max + i) * d);
            he_wide.data_mut()[dst..dst + d].copy_from_slice(&he.data()[src..src + d]);
        }
    }
    let loss = |he: &Tensor, b: &EventSequenceBatch| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(he.clone());
        let hidden = model.events.unroll(&mut g, &model.params, b, x)?;
        let l = total_loss(&mut g, &model.params, &model.head, hidden, b, &LossConfig::default())?;
        Ok(g.value(l).item())
    };
    let diff = (loss(&he, batch)? - loss(&he_wide, &wide)?).abs();
    Ok(Check::new("padding neutrality", diff < 1e-12, format!("loss change {diff:.1e}")))
}

/// Every check at the sizes used by the CLI.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        gradient_integrity(seed)?,
        hazard_well_formed(2000, seed)?,
        density_normalised(20, seed)?,
        median_rigged(seed)?,
        encoder_causal(seed)?,
        flow_identity(1000, seed)?,
        padding_neutral(seed)?,
    ])
}
