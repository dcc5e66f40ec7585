use super::params::{Bound, ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Multi-head self-attention without positional encoding.
///
/// `w_q`, `w_k`, `w_v` are `[d, d]`: head `i` uses columns
/// `i*d/h .. (i+1)*d/h`. Scores are divided by `sqrt(d)` (the full model
/// width), and the concatenated heads are projected by `w_o: [d, d]`.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            w_q: pb.fan_in_uniform("w_q", &[d, d], d)?,
            w_k: pb.fan_in_uniform("w_k", &[d, d], d)?,
            w_v: pb.fan_in_uniform("w_v", &[d, d], d)?,
            w_o: pb.fan_in_uniform("w_o", &[d, d], d)?,
            d,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn num_params(&self) -> usize {
        4 * self.d * self.d
    }

    fn as_batched(&self, tape: &mut Tape, z: Var) -> Result<(Var, bool)> {
        let shape = tape.shape(z).to_vec();
        match shape.as_slice() {
            [l, d] if *d == self.d => Ok((tape.reshape(z, &[1, *l, *d])?, true)),
            [_, _, d] if *d == self.d => Ok((z, false)),
            _ => Err(Error::ShapeMismatch {
                op: "attention input",
                lhs: shape,
                rhs: vec![self.d],
            }),
        }
    }

    /// Runs attention and also returns the per-head `[batch, l, l]` weights.
    pub fn forward_with_weights(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<(Var, Vec<Var>)> {
        let (z3, unbatched) = self.as_batched(tape, z)?;
        let q = tape.matmul(z3, p[self.w_q])?;
        let k = tape.matmul(z3, p[self.w_k])?;
        let v = tape.matmul(z3, p[self.w_v])?;
        let dh = self.head_dim();
        let scale = 1.0 / (self.d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = tape.slice(q, 2, i * dh, dh)?;
            let ki = tape.slice(k, 2, i * dh, dh)?;
            let vi = tape.slice(v, 2, i * dh, dh)?;
            let kt = tape.transpose(ki)?;
            let scores = tape.matmul(qi, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 2)?;
            weights.push(attn);
            heads.push(tape.matmul(attn, vi)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 2)?
        };
        let out = tape.matmul(cat, p[self.w_o])?;
        let out = if unbatched {
            let s = tape.shape(out)[1..].to_vec();
            tape.reshape(out, &s)?
        } else {
            out
        };
        Ok((out, weights))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, z)?.0)
    }

    /// Attention weights for a standalone input, one `[batch, l, l]` tensor per head.
    pub fn attention_weights(&self, params: &super::ParamStore, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let (_, w) = self.forward_with_weights(&mut tape, &p, zv)?;
        Ok(w.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}
