//! Small layers shared by the encoder, the recurrent cell and the heads.

use rand::Rng;

use crate::diffmath::{Graph, ParamId, ParamSet, Var};
use crate::error::Result;

/// Affine map `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = params.add_glorot(format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(params.add_const(format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(params, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Plain evaluation on one input row.
    pub fn apply_row(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.fan_in);
        let w = params.value(self.w).data();
        let mut out = match self.b {
            Some(b) => params.value(b).data().to_vec(),
            None => vec![0.0; self.fan_out],
        };
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: params.add_const(format!("{name}.gain"), &[dim], 1.0)?,
            shift: params.add_const(format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let mu = g.mean_last(x)?;
        let xc = g.sub(x, mu)?;
        let sq = g.square(xc);
        let var = g.mean_last(sq)?;
        let var = g.add_scalar(var, LAYER_NORM_EPS);
        let inv = g.powf(var, -0.5);
        let xn = g.mul(xc, inv)?;
        let gain = g.param(params, self.gain);
        let shift = g.param(params, self.shift);
        let y = g.mul(xn, gain)?;
        g.add(y, shift)
    }
}

/// Reference layer norm of one row with unit gain and zero shift.
pub fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().map(|v| (v - mu) * inv).collect()
}
