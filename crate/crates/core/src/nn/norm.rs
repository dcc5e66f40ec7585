use super::params::{Bound, ParamBuilder, ParamId};
use crate::error::Result;
use crate::numerics::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation with learned gain (init 1) and bias (init 0).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: pb.constant("gain", &[dim], 1.0)?,
            bias: pb.constant("bias", &[dim], 0.0)?,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    /// Normalises over `axis`, which must have extent `dim`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, axis: usize) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], axis, LAYER_NORM_EPS)
    }
}

/// Parametric ReLU with one slope per channel, initialised to 0.25.
#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: ParamId,
    pub channels: usize,
}

impl PRelu {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(PRelu {
            alpha: pb.constant("alpha", &[channels], 0.25)?,
            channels,
        })
    }

    pub fn num_params(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, axis: usize) -> Result<Var> {
        tape.prelu(x, p[self.alpha], axis)
    }
}
