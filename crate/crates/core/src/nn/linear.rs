use super::params::{Bound, ParamBuilder, ParamId};
use crate::error::Result;
use crate::numerics::{Tape, Var};

/// `y = x W + b` with `W: [d_in, d_out]`, applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: pb.fan_in_uniform("weight", &[d_in, d_out], d_in)?,
            bias: pb.fan_in_uniform("bias", &[d_out], d_in)?,
            d_in,
            d_out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add(y, p[self.bias])
    }
}
