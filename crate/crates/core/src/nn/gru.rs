use super::params::{Bound, ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Weights of one GRU gate: input kernel `[d_h, d_in]`, recurrent kernel
/// `[d_h, d_h]` and bias `[d_h]`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

impl GateParams {
    fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_h: usize) -> Result<Self> {
        Ok(GateParams {
            input: pb.fan_in_uniform("input", &[d_h, d_in], d_in)?,
            recurrent: pb.fan_in_uniform("recurrent", &[d_h, d_h], d_h)?,
            bias: pb.fan_in_uniform("bias", &[d_h], d_h)?,
        })
    }
}

/// Unidirectional gated recurrent unit:
///
/// ```text
/// z = sigmoid(W_z x + U_z h + b_z)
/// r = sigmoid(W_r x + U_r h + b_r)
/// c = tanh(W_c x + U_c (r * h) + b_c)
/// h' = (1 - z) * h + z * c
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
    pub d_in: usize,
    pub d_h: usize,
}

impl Gru {
    pub fn new(pb: &mut ParamBuilder<'_>, d_in: usize, d_h: usize) -> Result<Self> {
        Ok(Gru {
            update: GateParams::new(&mut pb.sub("update"), d_in, d_h)?,
            reset: GateParams::new(&mut pb.sub("reset"), d_in, d_h)?,
            candidate: GateParams::new(&mut pb.sub("candidate"), d_in, d_h)?,
            d_in,
            d_h,
        })
    }

    pub fn num_params(&self) -> usize {
        3 * (self.d_h * self.d_in + self.d_h * self.d_h + self.d_h)
    }

    /// Runs the recurrence along axis 1 of `x: [batch, len, d_in]` (or along
    /// axis 0 of `[len, d_in]`) from a zero initial state and returns every
    /// hidden state, shaped like `x` with `d_h` features.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_from(tape, p, x, None)
    }

    /// As [`Gru::forward`] with an explicit initial state `h0: [batch, d_h]`.
    pub fn forward_from(&self, tape: &mut Tape, p: &Bound, x: Var, h0: Option<Var>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (x3, unbatched) = match shape.len() {
            2 => (tape.reshape(x, &[1, shape[0], shape[1]])?, true),
            3 => (x, false),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "gru input",
                    lhs: shape,
                    rhs: vec![self.d_in],
                })
            }
        };
        let s = tape.shape(x3).to_vec();
        let (batch, len, d_in) = (s[0], s[1], s[2]);
        if d_in != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "gru input",
                lhs: s,
                rhs: vec![self.d_in],
            });
        }

        // Input projections for all steps at once: [batch, len, d_h] per gate.
        let project = |tape: &mut Tape, g: &GateParams| -> Result<Var> {
            let wt = tape.transpose(p[g.input])?;
            let xw = tape.matmul(x3, wt)?;
            tape.add(xw, p[g.bias])
        };
        let xz = project(tape, &self.update)?;
        let xr = project(tape, &self.reset)?;
        let xc = project(tape, &self.candidate)?;
        let uz = tape.transpose(p[self.update.recurrent])?;
        let ur = tape.transpose(p[self.reset.recurrent])?;
        let uc = tape.transpose(p[self.candidate.recurrent])?;

        let mut h = match h0 {
            Some(h) => {
                if tape.shape(h) != [batch, self.d_h] {
                    return Err(Error::ShapeMismatch {
                        op: "gru h0",
                        lhs: tape.shape(h).to_vec(),
                        rhs: vec![batch, self.d_h],
                    });
                }
                h
            }
            None => tape.constant(Tensor::zeros(&[batch, self.d_h])),
        };
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let xz_t = tape.select(xz, 1, t)?;
            let xr_t = tape.select(xr, 1, t)?;
            let xc_t = tape.select(xc, 1, t)?;
            let hz = tape.matmul(h, uz)?;
            let hr = tape.matmul(h, ur)?;
            let z_pre = tape.add(xz_t, hz)?;
            let r_pre = tape.add(xr_t, hr)?;
            let z = tape.sigmoid(z_pre);
            let r = tape.sigmoid(r_pre);
            let rh = tape.mul(r, h)?;
            let hc = tape.matmul(rh, uc)?;
            let c_pre = tape.add(xc_t, hc)?;
            let c = tape.tanh(c_pre);
            let delta = tape.sub(c, h)?;
            let step = tape.mul(z, delta)?;
            h = tape.add(h, step)?;
            outputs.push(h);
        }
        let out = tape.stack(&outputs, 1)?;
        if unbatched {
            tape.reshape(out, &[len, self.d_h])
        } else {
            Ok(out)
        }
    }
}
