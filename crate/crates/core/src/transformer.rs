//! Transformer encoder block whose feed-forward network starts with a GRU.
//!
//! ```text
//! mid = LayerNorm(z + MultiHead(z))
//! ffn = ReLU(GRU(mid)) W1 + b1
//! out = LayerNorm(mid + ffn)
//! ```
//!
//! There is no positional encoding; the GRU is the only order-aware part.

use crate::error::{Error, Result};
use crate::nn::{Bound, Gru, LayerNorm, Linear, MultiHeadSelfAttention, ParamBuilder, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

/// First layer of the feed-forward network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedForwardKind {
    /// Recurrent first layer (the default).
    Gru,
    /// Conventional position-wise linear first layer, for comparison.
    Linear,
}

#[derive(Clone, Debug)]
enum FirstLayer {
    Gru(Gru),
    Linear(Linear),
}

#[derive(Clone, Debug)]
pub struct ImprovedTransformer {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    first: FirstLayer,
    /// `[d_ff, d]`
    pub w1: ParamId,
    /// `[d]`
    pub b1: ParamId,
    pub norm2: LayerNorm,
    pub d: usize,
    pub d_ff: usize,
}

impl ImprovedTransformer {
    pub fn new(pb: &mut ParamBuilder<'_>, d: usize, heads: usize, d_ff: usize, kind: FeedForwardKind) -> Result<Self> {
        let attn = MultiHeadSelfAttention::new(&mut pb.sub("attn"), d, heads)?;
        let norm1 = LayerNorm::new(&mut pb.sub("norm1"), d)?;
        let mut ffn = pb.sub("ffn");
        let first = match kind {
            FeedForwardKind::Gru => FirstLayer::Gru(Gru::new(&mut ffn.sub("gru"), d, d_ff)?),
            FeedForwardKind::Linear => FirstLayer::Linear(Linear::new(&mut ffn.sub("linear"), d, d_ff)?),
        };
        let w1 = ffn.fan_in_uniform("w1", &[d_ff, d], d_ff)?;
        let b1 = ffn.fan_in_uniform("b1", &[d], d_ff)?;
        let norm2 = LayerNorm::new(&mut pb.sub("norm2"), d)?;
        Ok(ImprovedTransformer {
            attn,
            norm1,
            first,
            w1,
            b1,
            norm2,
            d,
            d_ff,
        })
    }

    pub fn feed_forward_kind(&self) -> FeedForwardKind {
        match self.first {
            FirstLayer::Gru(_) => FeedForwardKind::Gru,
            FirstLayer::Linear(_) => FeedForwardKind::Linear,
        }
    }

    pub fn gru(&self) -> Option<&Gru> {
        match &self.first {
            FirstLayer::Gru(g) => Some(g),
            FirstLayer::Linear(_) => None,
        }
    }

    pub fn num_params(&self) -> usize {
        let first = match &self.first {
            FirstLayer::Gru(g) => g.num_params(),
            FirstLayer::Linear(l) => l.num_params(),
        };
        self.attn.num_params()
            + self.norm1.num_params()
            + first
            + self.d_ff * self.d
            + self.d
            + self.norm2.num_params()
    }

    /// `z: [l, d]` or `[batch, l, d]`; attention and the GRU both run along `l`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let rank = tape.shape(z).len();
        if rank < 2 || tape.shape(z)[rank - 1] != self.d {
            return Err(Error::ShapeMismatch {
                op: "transformer input",
                lhs: tape.shape(z).to_vec(),
                rhs: vec![self.d],
            });
        }
        let last = rank - 1;
        let mh = self.attn.forward(tape, p, z)?;
        let res1 = tape.add(z, mh)?;
        let mid = self.norm1.forward(tape, p, res1, last)?;
        let hidden = match &self.first {
            FirstLayer::Gru(g) => g.forward(tape, p, mid)?,
            FirstLayer::Linear(l) => l.forward(tape, p, mid)?,
        };
        let act = tape.relu(hidden);
        let proj = tape.matmul(act, p[self.w1])?;
        let ffn = tape.add(proj, p[self.b1])?;
        let res2 = tape.add(mid, ffn)?;
        self.norm2.forward(tape, p, res2, last)
    }

    /// Evaluates the block on a standalone `[l, d]` input without gradients.
    pub fn apply(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &p, zv)?;
        Ok(tape.value(out).clone())
    }
}

fn swap_rows(t: &Tensor, a: usize, b: usize) -> Tensor {
    let mut out = t.clone();
    let d = t.shape()[t.rank() - 1];
    for j in 0..d {
        out.data_mut()[a * d + j] = t.data()[b * d + j];
        out.data_mut()[b * d + j] = t.data()[a * d + j];
    }
    out
}

/// Swaps the first two positions of `z: [l, d]` and reports whether the block
/// output fails to follow the swap, i.e. whether the block is sensitive to
/// sequence order. Always `false` for `l < 2`.
pub fn ffn_positional_sensitivity_probe(block: &ImprovedTransformer, params: &ParamStore, z: &Tensor) -> Result<bool> {
    if z.rank() != 2 {
        return Err(Error::InvalidArgument("probe input must be [l, d]".into()));
    }
    if z.shape()[0] < 2 {
        return Ok(false);
    }
    let out = block.apply(params, z)?;
    let swapped_out = block.apply(params, &swap_rows(z, 0, 1))?;
    Ok(swapped_out.max_abs_diff(&swap_rows(&out, 0, 1)) > 1e-9)
}
