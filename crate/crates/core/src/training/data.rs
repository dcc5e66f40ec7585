//! Seeded synthetic clean/noisy pairs for desk-scale training.
//!
//! Clean signals are sums of 2 to 4 sinusoids between 300 Hz and 3 kHz,
//! switched on and off together by an envelope of raised-cosine bursts, so
//! energy is sparse in both time and frequency. Every clean signal is normalised to the same RMS level.
//! Noise is white Gaussian scaled to an exact mixing SNR.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pass as `snr_db` to get `noisy == clean`.
pub const NO_NOISE: f64 = f64::INFINITY;

const RAMP: usize = 32;

/// Root-mean-square level every clean signal is normalised to.
pub const CLEAN_RMS: f64 = 0.3;

/// Derives the seed of item `index` of a data stream.
pub fn item_seed(stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined words.
    let mut z = stream
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of held-out item `k`, disjoint from the training indices.
pub fn heldout_seed(stream: u64, k: u64) -> u64 {
    item_seed(stream, (1 << 63) | k)
}

fn envelope(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut env = vec![0.0; len];
    let mut pos = 0;
    let mut any = false;
    while pos < len {
        let seg = rng.random_range(128..=384).min(len - pos);
        if rng.random_bool(0.4) {
            any |= seg >= 2 * RAMP;
            for i in 0..seg {
                let edge = i.min(seg - 1 - i);
                env[pos + i] = if edge >= RAMP {
                    1.0
                } else {
                    0.5 - 0.5 * (PI * edge as f64 / RAMP as f64).cos()
                };
            }
        }
        pos += seg;
    }
    if !any {
        env.iter_mut().for_each(|v| *v = 1.0);
    }
    env
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Returns `(clean, noisy)` of `len` samples at 16 kHz.
pub fn make_synthetic_pair(seed: u64, len: usize, snr_db: f64) -> Result<(Tensor, Tensor)> {
    if len < 2 * RAMP {
        return Err(Error::InvalidArgument(format!("synthetic pair of {len} samples is too short")));
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("snr_db is NaN".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = 16_000.0;
    let mut clean = vec![0.0; len];
    let k = rng.random_range(2..=4);
    let env = envelope(&mut rng, len);
    for _ in 0..k {
        let freq = rng.random_range(300.0..3000.0);
        let amp = rng.random_range(0.2..0.5);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (i, c) in clean.iter_mut().enumerate() {
            *c += amp * env[i] * (2.0 * PI * freq * i as f64 / sr + phase).sin();
        }
    }
    let norm = CLEAN_RMS / power(&clean).sqrt();
    clean.iter_mut().for_each(|c| *c *= norm);
    let noise: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let noisy = if snr_db == f64::INFINITY {
        clean.clone()
    } else {
        let gain = (power(&clean) / (power(&noise) * 10f64.powf(snr_db / 10.0))).sqrt();
        clean.iter().zip(&noise).map(|(c, n)| c + gain * n).collect()
    };
    Ok((Tensor::from_vec(clean), Tensor::from_vec(noisy)))
}
