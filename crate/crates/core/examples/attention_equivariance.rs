//! Self-attention commutes with row permutations; the GRU feed-forward of the
//! transformer block does not.

use dptfsnet::nn::{MultiHeadSelfAttention, ParamBuilder, ParamStore};
use dptfsnet::numerics::Tensor;
use dptfsnet::transformer::{ffn_positional_sensitivity_probe, FeedForwardKind, ImprovedTransformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dptfsnet::Result<()> {
    let (l, d) = (6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = Tensor::from_fn(&[l, d], |_| rng.random_range(-1.0..1.0));
    let perm = [5, 0, 3, 1, 4, 2];
    let permute = |t: &Tensor| Tensor::from_fn(&[l, d], |k| t.data()[perm[k / d] * d + k % d]);

    let mut store = ParamStore::new();
    let attn = MultiHeadSelfAttention::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("attn"), d, 2)?;
    let weights = attn.attention_weights(&store, &z)?;
    println!("head 0 weights, row 0: {:?}", &weights[0].data()[..l]);

    for kind in [FeedForwardKind::Gru, FeedForwardKind::Linear] {
        let mut store = ParamStore::new();
        let block = ImprovedTransformer::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("b"), d, 2, 16, kind)?;
        let a = block.apply(&store, &permute(&z))?;
        let b = permute(&block.apply(&store, &z)?);
        println!(
            "{kind:?} feed-forward: permuted-output deviation {:.2e}, order sensitive: {}",
            a.max_abs_diff(&b),
            ffn_positional_sensitivity_probe(&block, &store, &z)?
        );
    }
    Ok(())
}
