//! Parameterised building blocks: convolutions, normalisation, activations,
//! recurrent and attention layers.

mod attention;
mod conv;
mod gru;
mod linear;
mod norm;
mod params;

pub use attention::MultiHeadSelfAttention;
pub use conv::Conv2d;
pub use gru::{GateParams, Gru};
pub use linear::Linear;
pub use norm::{LayerNorm, PRelu, LAYER_NORM_EPS};
pub use params::{Bound, ParamBuilder, ParamId, ParamStore};
