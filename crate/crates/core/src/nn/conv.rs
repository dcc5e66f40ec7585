use super::params::{Bound, ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::numerics::{Conv2dGeometry, Tape, Var};

/// 2-D convolution over `[channels, time, freq]` feature maps with "same"
/// output size. Time padding goes entirely before the signal, so each output
/// frame only sees the current and past frames; frequency padding is split
/// evenly.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub geometry: Conv2dGeometry,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv kernel {kernel:?} / dilation {dilation:?} must be positive"
            )));
        }
        let pad_t = dilation.0 * (kernel.0 - 1);
        let pad_f = dilation.1 * (kernel.1 - 1);
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = pb.fan_in_uniform("weight", &[c_out, c_in, kernel.0, kernel.1], fan_in)?;
        let bias = pb.fan_in_uniform("bias", &[c_out], fan_in)?;
        Ok(Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            geometry: Conv2dGeometry {
                dilation,
                pad_time: (pad_t, 0),
                pad_freq: (pad_f / 2, pad_f - pad_f / 2),
            },
        })
    }

    pub fn pointwise(pb: &mut ParamBuilder<'_>, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(pb, c_in, c_out, (1, 1), (1, 1))
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel.0 * self.kernel.1 + self.c_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d input channels",
                lhs: shape.to_vec(),
                rhs: vec![self.c_in],
            });
        }
        tape.conv2d(x, p[self.weight], p[self.bias], self.geometry)
    }
}
