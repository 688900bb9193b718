//! Flat `key=value` run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dataset::SplitFractions;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eventseq::FlowConfig;
use crate::intensity::LossConfig;
use crate::model::ModelConfig;
use crate::synthgen::Scenario;
use crate::train::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_stacks: usize,
    pub gcn_layers: usize,
    pub adaptive_dim: usize,
    pub window_slots: usize,
    pub flow_layers: usize,
    pub hazard_hidden: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub scenario: Scenario,
    pub links: usize,
    pub days: f64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let adam = AdamConfig::default();
        let split = SplitFractions::default();
        Self {
            d_model: enc.d_model,
            n_heads: enc.n_heads,
            n_stacks: enc.n_stacks,
            gcn_layers: enc.gcn_layers,
            adaptive_dim: enc.adaptive_dim,
            window_slots: enc.window_slots,
            flow_layers: FlowConfig::default().flow_layers,
            hazard_hidden: enc.d_model,
            alpha: LossConfig::default().alpha,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            train_fraction: split.train,
            val_fraction: split.validation,
            test_fraction: split.test,
            scenario: Scenario::Standard,
            links: 30,
            days: 14.0,
            data: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Param(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Applies one `key=value` pair; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "n_stacks" => self.n_stacks = parse(key, v)?,
            "gcn_layers" => self.gcn_layers = parse(key, v)?,
            "adaptive_dim" => self.adaptive_dim = parse(key, v)?,
            "window_slots" => self.window_slots = parse(key, v)?,
            "flow_layers" => self.flow_layers = parse(key, v)?,
            "hazard_hidden" => self.hazard_hidden = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "scenario" => self.scenario = v.parse()?,
            "links" => self.links = parse(key, v)?,
            "days" => self.days = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            other => return Err(Error::Param(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Param(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.fractions().validate()?;
        if self.flow_layers == 0 || self.hazard_hidden == 0 || self.batch_size == 0 {
            return Err(Error::Param("flow_layers, hazard_hidden and batch_size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Param(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Param("learning_rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param("Adam betas must lie in [0, 1)".into()));
        }
        if self.links == 0 {
            return Err(Error::Param("links must be at least 1".into()));
        }
        if !(self.days > 0.0) {
            return Err(Error::Param(format!("days must be positive, got {}", self.days)));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_stacks: self.n_stacks,
            gcn_layers: self.gcn_layers,
            adaptive_dim: self.adaptive_dim,
            window_slots: self.window_slots,
        }
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            validation: self.val_fraction,
            test: self.test_fraction,
        }
    }

    pub fn model(&self, n_links: usize) -> ModelConfig {
        ModelConfig {
            n_links,
            encoder: self.encoder(),
            flow: FlowConfig {
                flow_layers: self.flow_layers,
            },
            hazard_hidden: self.hazard_hidden,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            loss: LossConfig { alpha: self.alpha },
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d_model={}", self.d_model)?;
        writeln!(f, "n_heads={}", self.n_heads)?;
        writeln!(f, "n_stacks={}", self.n_stacks)?;
        writeln!(f, "gcn_layers={}", self.gcn_layers)?;
        writeln!(f, "adaptive_dim={}", self.adaptive_dim)?;
        writeln!(f, "window_slots={}", self.window_slots)?;
        writeln!(f, "flow_layers={}", self.flow_layers)?;
        writeln!(f, "hazard_hidden={}", self.hazard_hidden)?;
        writeln!(f, "alpha={}", self.alpha)?;
        writeln!(f, "learning_rate={}", self.learning_rate)?;
        writeln!(f, "beta1={}", self.beta1)?;
        writeln!(f, "beta2={}", self.beta2)?;
        writeln!(f, "epsilon={}", self.epsilon)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "train_fraction={}", self.train_fraction)?;
        writeln!(f, "val_fraction={}", self.val_fraction)?;
        writeln!(f, "test_fraction={}", self.test_fraction)?;
        writeln!(f, "scenario={}", self.scenario)?;
        writeln!(f, "links={}", self.links)?;
        writeln!(f, "days={}", self.days)?;
        if let Some(d) = &self.data {
            writeln!(f, "data={}", d.display())?;
        }
        if let Some(o) = &self.out {
            writeln!(f, "out={}", o.display())?;
        }
        Ok(())
    }
}
