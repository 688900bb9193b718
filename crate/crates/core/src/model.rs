//! The assembled STGNPP model: encoder, continuous GRU and intensity head
//! sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::WindowSample;
use crate::diffmath::{Graph, ParamSet, Tensor, Var};
use crate::encoder::{st_inquire_padded, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eventseq::{ContinuousGru, FlowConfig};
use crate::intensity::{total_loss, IntensityHead, LossConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_links: usize,
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    /// Width of the monotone hazard network.
    pub hazard_hidden: usize,
}

impl ModelConfig {
    pub fn new(n_links: usize) -> Self {
        let encoder = EncoderConfig::default();
        Self {
            n_links,
            hazard_hidden: encoder.d_model,
            encoder,
            flow: FlowConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_links == 0 || self.hazard_hidden == 0 || self.flow.flow_layers == 0 {
            return Err(Error::Param("model sizes must be at least 1".into()));
        }
        self.encoder.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Stgnpp {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub events: ContinuousGru,
    pub head: IntensityHead,
}

/// Per-link hidden states of one window.
#[derive(Clone, Debug)]
pub struct WindowHidden {
    /// `[N, Lmax, D]`.
    pub hidden: Tensor,
    pub l_max: usize,
}

impl WindowHidden {
    /// Hidden row after event `i` of `link`.
    pub fn row(&self, link: usize, i: usize) -> &[f64] {
        let d = self.hidden.shape()[2];
        let start = (link * self.l_max + i) * d;
        &self.hidden.data()[start..start + d]
    }
}

impl Stgnpp {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = cfg.encoder.d_model;
        let encoder = Encoder::new(&mut params, &cfg.encoder, cfg.n_links, &mut rng)?;
        let events = ContinuousGru::new(&mut params, &cfg.flow, d, &mut rng)?;
        let head = IntensityHead::new(&mut params, d, cfg.hazard_hidden, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            encoder,
            events,
            head,
        })
    }

    /// Hidden states `[N, Lmax, D]` of the window's events, using `params`
    /// in place of the model's own (gradient checks perturb a copy).
    pub fn hidden_with(&self, g: &mut Graph, params: &ParamSet, sample: &WindowSample, adjacency: &Tensor) -> Result<Var> {
        if sample.states.n_links != self.cfg.n_links {
            return Err(Error::shape(
                "window links",
                &[sample.states.n_links],
                &[self.cfg.n_links],
            ));
        }
        let hg = self.encoder.forward(g, params, &sample.states, adjacency)?;
        let (hc, _mask) = st_inquire_padded(g, hg, &sample.indexes, sample.batch.l_max)?;
        let he = self.events.event_embed(g, params, hc, &sample.batch)?;
        self.events.unroll(g, params, &sample.batch, he)
    }

    pub fn loss_with(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        sample: &WindowSample,
        adjacency: &Tensor,
        loss: &LossConfig,
    ) -> Result<Var> {
        let hidden = self.hidden_with(g, params, sample, adjacency)?;
        total_loss(g, params, &self.head, hidden, &sample.batch, loss)
    }

    /// Forward pass without gradients, returning the hidden states.
    pub fn hidden(&self, sample: &WindowSample, adjacency: &Tensor) -> Result<WindowHidden> {
        let mut g = Graph::new();
        let h = self.hidden_with(&mut g, &self.params, sample, adjacency)?;
        Ok(WindowHidden {
            hidden: g.value(h).clone(),
            l_max: sample.batch.l_max,
        })
    }
}
