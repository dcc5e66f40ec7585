//! Analyse one second of noise and resynthesise it.

use dptfsnet::numerics::Tensor;
use dptfsnet::signal::{istft, stft, StftConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dptfsnet::Result<()> {
    let cfg = StftConfig::default();
    let n = cfg.sample_rate as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0));

    let spec = stft(&x, &cfg)?;
    println!("{n} samples -> {} frames x {} bins", spec.frames(), spec.bins());

    let y = istft(&spec)?;
    // The first and last win_len - hop samples see only part of the window overlap.
    let edge = cfg.win_len - cfg.hop;
    let interior = x.data()[edge..n - edge].iter().zip(&y.data()[edge..n - edge]);
    let err = interior.fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("interior max abs error: {err:.2e}");
    println!("edge max abs error:     {:.2e}", (x.data()[0] - y.data()[0]).abs());
    Ok(())
}
