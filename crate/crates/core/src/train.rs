//! Minibatch Adam training over sliding windows with per-epoch validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, Split};
use crate::diffmath::{Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::intensity::LossConfig;
use crate::model::Stgnpp;
use crate::predict::{evaluate, MetricsReport};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(&grad).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 16,
            epochs: 20,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
    pub val_mae_t: f64,
    pub val_mae_d: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_nll,val_mae_t,val_mae_d";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_nll, self.val_mae_t, self.val_mae_d
        )
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation NLL (the initial ones when no
    /// epoch improved on them).
    pub best: ParamSet,
    pub best_epoch: usize,
    /// Validation metrics of the initial parameters.
    pub initial: MetricsReport,
    pub log: Vec<EpochLog>,
    /// Training windows without a single transition, skipped once per epoch.
    pub skipped_windows: usize,
}

/// Loss and parameter gradients of one window, or `None` when it has no
/// transition to score.
fn window_gradient(
    model: &Stgnpp,
    dataset: &Dataset,
    end: usize,
    loss: &LossConfig,
) -> Result<Option<(f64, Vec<Tensor>)>> {
    let sample = dataset.sample(end)?;
    if sample.batch.transitions().is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let l = model.loss_with(&mut g, &model.params, &sample, &dataset.graph.adjacency, loss)?;
    let value = g.value(l).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at window ending {end}")));
    }
    let grads = g.backward(l)?.param_grads(&model.params);
    Ok(Some((value, grads)))
}

/// Trains `model` in place and leaves the best-validation parameters in it.
pub fn train(model: &mut Stgnpp, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    let mut windows = dataset.window_ends(Split::Train);
    if windows.is_empty() {
        return Err(Error::EmptyBatch("training split has no complete window".into()));
    }
    let initial = evaluate(model, dataset, Split::Validation)?;
    log::info!("epoch 0: val nll {:.4} mae_t {:.2}", initial.nll, initial.mae_t);
    let mut best = model.params.clone();
    let mut best_nll = initial.nll;
    let mut best_epoch = 0;
    let mut adam = Adam::new(cfg.adam.clone(), &model.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        windows.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in windows.chunks(cfg.batch_size) {
            let results: Vec<Option<(f64, Vec<Tensor>)>> = chunk
                .par_iter()
                .map(|&end| window_gradient(model, dataset, end, &cfg.loss))
                .collect::<Result<_>>()?;
            model.params.zero_grad();
            let mut used = 0usize;
            for r in results {
                let Some((l, grads)) = r else {
                    skipped += 1;
                    continue;
                };
                loss_sum += l;
                loss_count += 1;
                used += 1;
                for (p, g) in model.params.iter_mut().zip(&grads) {
                    p.grad.add_assign(g.data());
                }
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for p in model.params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            adam.step(&mut model.params);
        }
        let val = evaluate(model, dataset, Split::Validation)?;
        let row = EpochLog {
            epoch,
            train_loss: if loss_count == 0 { f64::NAN } else { loss_sum / loss_count as f64 },
            val_nll: val.nll,
            val_mae_t: val.mae_t,
            val_mae_d: val.mae_d,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val nll {:.4} mae_t {:.2} mae_d {:.2}",
            row.train_loss,
            row.val_nll,
            row.val_mae_t,
            row.val_mae_d
        );
        if val.nll < best_nll {
            best_nll = val.nll;
            best = model.params.clone();
            best_epoch = epoch;
        }
        log.push(row);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} training windows without transitions");
    }
    model.params = best.clone();
    Ok(TrainOutcome {
        best,
        best_epoch,
        initial,
        log,
        skipped_windows: skipped,
    })
}
