//! Spatio-temporal graph encoder: link-wise causal Transformer stacked with an
//! adaptive mix-hop GCN, and the inquirer that pools encoder states over the
//! slots each congestion event occupies.

use rand::Rng;

use crate::diffmath::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::synthgen::TrafficStateWindow;

/// Speeds are divided by this before the input projection.
pub const SPEED_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_stacks: usize,
    pub gcn_layers: usize,
    pub adaptive_dim: usize,
    pub window_slots: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_stacks: 2,
            gcn_layers: 2,
            adaptive_dim: 10,
            window_slots: 72,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_stacks", self.n_stacks),
            ("gcn_layers", self.gcn_layers),
            ("adaptive_dim", self.adaptive_dim),
            ("window_slots", self.window_slots),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Param(format!("d_model {} must be even", self.d_model)));
        }
        Ok(())
    }
}

/// Sine/cosine position table `[t_len, d]`: even columns `sin(t / 10000^(i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding(t_len: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(Error::Param(format!("positional encoding needs even width, got {d}")));
    }
    Ok(Tensor::from_fn(&[t_len, d], |k| {
        let (t, i) = (k / d, k % d);
        let freq = 10000f64.powf((i - i % 2) as f64 / d as f64);
        let angle = t as f64 / freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Masked multi-head self-attention with residual and layer norm. Heads
/// split the model width; there is no output projection.
#[derive(Clone, Debug)]
pub struct CausalSelfAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub norm: LayerNorm,
    pub n_heads: usize,
}

impl CausalSelfAttention {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_q: params.add_glorot(format!("{name}.w_q"), d, d, rng)?,
            w_k: params.add_glorot(format!("{name}.w_k"), d, d, rng)?,
            w_v: params.add_glorot(format!("{name}.w_v"), d, d, rng)?,
            norm: LayerNorm::new(params, &format!("{name}.norm"), d)?,
            n_heads,
        })
    }

    /// Attention output before the residual and normalisation.
    pub fn attend(&self, g: &mut Graph, params: &ParamSet, z: Var) -> Result<Var> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("causal_self_attention", &shape, &[0, 0, 0]));
        }
        let (t_len, d) = (shape[1], shape[2]);
        let dh = d / self.n_heads;
        let wq = g.param(params, self.w_q);
        let wk = g.param(params, self.w_k);
        let wv = g.param(params, self.w_v);
        let q = g.matmul(z, wq)?;
        let k = g.matmul(z, wk)?;
        let v = g.matmul(z, wv)?;
        let mask: Vec<bool> = (0..t_len * t_len).map(|i| i % t_len > i / t_len).collect();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.narrow_last(q, h * dh, dh)?;
            let kh = g.narrow_last(k, h * dh, dh)?;
            let vh = g.narrow_last(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.masked_fill(scores, &mask, f64::NEG_INFINITY)?;
            let weights = g.softmax_last(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        g.concat_last(&heads)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, z: Var) -> Result<Var> {
        let a = self.attend(g, params, z)?;
        let s = g.add(z, a)?;
        self.norm.forward(g, params, s)
    }
}

/// Position-wise `W2 · relu(W1 · s + b1) + b2` with residual and layer norm.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(params, &format!("{name}.f1"), d, hidden, true, rng)?,
            outer: Linear::new(params, &format!("{name}.f2"), hidden, d, true, rng)?,
            norm: LayerNorm::new(params, &format!("{name}.norm"), d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, s: Var) -> Result<Var> {
        let h = self.inner.forward(g, params, s)?;
        let h = g.relu(h);
        let h = self.outer.forward(g, params, h)?;
        let r = g.add(s, h)?;
        self.norm.forward(g, params, r)
    }
}

/// `A + softmax_rows(relu(α1 · α2ᵀ))`.
pub fn adaptive_adjacency(g: &mut Graph, a: Var, alpha1: Var, alpha2: Var) -> Result<Var> {
    let logits = g.matmul_nt(alpha1, alpha2)?;
    let logits = g.relu(logits);
    let adaptive = g.softmax_last(logits)?;
    g.add(a, adaptive)
}

/// Sum over hops of `H_i = relu(Â · H_{i-1} · Θ_i)`, with `Â` mixing links at
/// every slot independently.
pub fn gcn_mixhop(g: &mut Graph, params: &ParamSet, h0: Var, adj: Var, thetas: &[ParamId]) -> Result<Var> {
    let shape = g.shape(h0).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("gcn_mixhop", &shape, &[0, 0, 0]));
    }
    let (n, t_len, d) = (shape[0], shape[1], shape[2]);
    let mut h = h0;
    let mut pooled: Option<Var> = None;
    for &theta in thetas {
        let flat = g.reshape(h, &[n, t_len * d])?;
        let mixed = g.matmul(adj, flat)?;
        let mixed = g.reshape(mixed, &[n, t_len, d])?;
        let th = g.param(params, theta);
        let hi = g.matmul(mixed, th)?;
        h = g.relu(hi);
        pooled = Some(match pooled {
            Some(p) => g.add(p, h)?,
            None => h,
        });
    }
    pooled.ok_or_else(|| Error::Param("gcn_mixhop needs at least one layer".into()))
}

/// Occupied slots of one congestion event inside the window.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatioTemporalIndex {
    pub link: usize,
    pub slots: Vec<usize>,
}

impl SpatioTemporalIndex {
    pub fn new(link: usize, slots: Vec<usize>) -> Self {
        Self { link, slots }
    }

    fn validate(&self, window_slots: usize) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::Index(format!("event on link {} occupies no slot", self.link)));
        }
        if self.slots.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Index(format!(
                "slots of event on link {} are not contiguous ascending",
                self.link
            )));
        }
        let last = *self.slots.last().unwrap();
        if last >= window_slots {
            return Err(Error::Index(format!("slot {last} outside window of {window_slots}")));
        }
        Ok(())
    }
}

/// Sums `Hg[link, slots]` for every event and lays the results out as
/// `[N, Lmax, D]`, zero padded, along with the `[N, Lmax]` real/padded mask.
/// `indexes[n]` lists link `n`'s events in time order.
pub fn st_inquire(g: &mut Graph, hg: Var, indexes: &[Vec<SpatioTemporalIndex>]) -> Result<(Var, Tensor)> {
    let l_max = indexes.iter().map(Vec::len).max().unwrap_or(0);
    st_inquire_padded(g, hg, indexes, l_max)
}

/// [`st_inquire`] padded to `l_max` positions per link.
pub fn st_inquire_padded(
    g: &mut Graph,
    hg: Var,
    indexes: &[Vec<SpatioTemporalIndex>],
    l_max: usize,
) -> Result<(Var, Tensor)> {
    let shape = g.shape(hg).to_vec();
    if shape.len() != 3 || shape[0] != indexes.len() {
        return Err(Error::shape("st_inquire", &shape, &[indexes.len(), 0, 0]));
    }
    let (n, t_len, d) = (shape[0], shape[1], shape[2]);
    if let Some(long) = indexes.iter().position(|l| l.len() > l_max) {
        return Err(Error::Index(format!("link {long} has more than {l_max} events")));
    }
    let mut groups = vec![Vec::new(); n * l_max];
    let mut mask = Tensor::zeros(&[n, l_max]);
    for (link, list) in indexes.iter().enumerate() {
        for (i, idx) in list.iter().enumerate() {
            idx.validate(t_len)?;
            if idx.link != link {
                return Err(Error::Index(format!("index for link {} listed under {link}", idx.link)));
            }
            groups[link * l_max + i] = idx.slots.iter().map(|&s| link * t_len + s).collect();
            mask.set(&[link, i], 1.0);
        }
    }
    let flat = g.reshape(hg, &[n * t_len, d])?;
    let hc = g.gather_sum_rows(flat, &groups)?;
    let hc = g.reshape(hc, &[n, l_max, d])?;
    Ok((hc, mask))
}

/// One Transformer-then-GCN stack.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub attention: CausalSelfAttention,
    pub ffn: FeedForward,
    pub thetas: Vec<ParamId>,
}

/// Input projection, positional encoding and the stacked Transformer/GCN
/// blocks with their shared adaptive adjacency factors.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: Linear,
    pub stacks: Vec<EncoderStack>,
    pub alpha1: ParamId,
    pub alpha2: ParamId,
}

impl Encoder {
    pub fn new<R: Rng>(params: &mut ParamSet, cfg: &EncoderConfig, n_links: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = Linear::new(params, "encoder.embed", 2, d, true, rng)?;
        let mut stacks = Vec::with_capacity(cfg.n_stacks);
        for k in 0..cfg.n_stacks {
            let name = format!("encoder.stack{k}");
            let attention = CausalSelfAttention::new(params, &format!("{name}.attn"), d, cfg.n_heads, rng)?;
            let ffn = FeedForward::new(params, &format!("{name}.ffn"), d, d, rng)?;
            let thetas = (0..cfg.gcn_layers)
                .map(|i| params.add_glorot(format!("{name}.theta{i}"), d, d, rng))
                .collect::<Result<_>>()?;
            stacks.push(EncoderStack {
                attention,
                ffn,
                thetas,
            });
        }
        let alpha1 = params.add_uniform("encoder.alpha1", &[n_links, cfg.adaptive_dim], 0.1, rng)?;
        let alpha2 = params.add_uniform("encoder.alpha2", &[n_links, cfg.adaptive_dim], 0.1, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stacks,
            alpha1,
            alpha2,
        })
    }

    /// Per-slot projection of `[speed / SPEED_SCALE, condition]` to `[N, T, D]`.
    pub fn embed_states(&self, g: &mut Graph, params: &ParamSet, states: &TrafficStateWindow) -> Result<Var> {
        if states.n_slots != self.cfg.window_slots {
            return Err(Error::shape(
                "embed_states",
                &[states.n_links, states.n_slots],
                &[states.n_links, self.cfg.window_slots],
            ));
        }
        let mut x = Vec::with_capacity(states.n_links * states.n_slots * 2);
        for (v, &c) in states.speeds.iter().zip(&states.condition) {
            x.push(v / SPEED_SCALE);
            x.push(c as f64);
        }
        let x = g.constant(Tensor::new(&[states.n_links, states.n_slots, 2], x)?);
        self.embed.forward(g, params, x)
    }

    /// Full encoder output `Hg` of shape `[N, T, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        states: &TrafficStateWindow,
        adjacency: &Tensor,
    ) -> Result<Var> {
        let n = states.n_links;
        if adjacency.shape() != [n, n] {
            return Err(Error::shape("encoder adjacency", adjacency.shape(), &[n, n]));
        }
        let z = self.embed_states(g, params, states)?;
        let pe = g.constant(positional_encoding(self.cfg.window_slots, self.cfg.d_model)?);
        let mut h = g.add(z, pe)?;
        let a = g.constant(adjacency.clone());
        let a1 = g.param(params, self.alpha1);
        let a2 = g.param(params, self.alpha2);
        let adj = adaptive_adjacency(g, a, a1, a2)?;
        for stack in &self.stacks {
            let s = stack.attention.forward(g, params, h)?;
            let t = stack.ffn.forward(g, params, s)?;
            h = gcn_mixhop(g, params, t, adj, &stack.thetas)?;
        }
        Ok(h)
    }
}
