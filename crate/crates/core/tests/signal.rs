use std::f64::consts::PI;

use dptfsnet::numerics::{grad_check_many, Tensor};
use dptfsnet::signal::{decode_wav, encode_wav, istft, istft_on_tape, read_wav, stft, write_wav, ComplexSpectrogram, StftConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0))
}

/// Direct evaluation of `sum_n w[n] x[t*hop + n] e^{-2 pi i k n / N}`.
fn dft_frame(x: &[f64], cfg: &StftConfig, t: usize, k: usize) -> (f64, f64) {
    let (mut re, mut im) = (0.0, 0.0);
    for n in 0..cfg.win_len {
        let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.win_len as f64).cos();
        let s = x.get(t * cfg.hop + n).copied().unwrap_or(0.0) * w;
        let ang = -2.0 * PI * (k * n) as f64 / cfg.fft_len as f64;
        re += s * ang.cos();
        im += s * ang.sin();
    }
    (re, im)
}

#[test]
fn matches_direct_dft() {
    for cfg in [StftConfig::toy(), StftConfig::default()] {
        let n = cfg.win_len * 3 + cfg.hop / 2;
        let x = noise(n, 1);
        let spec = stft(&x, &cfg).unwrap();
        assert_eq!(spec.frames(), cfg.num_frames(n));
        let mut worst = 0.0f64;
        for t in 0..spec.frames() {
            for k in (0..spec.bins()).step_by(7) {
                let (re, im) = dft_frame(x.data(), &cfg, t, k);
                worst = worst.max((spec.real.get(&[t, k]) - re).abs());
                worst = worst.max((spec.imag.get(&[t, k]) - im).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }
}

#[test]
fn round_trip_on_interior_samples() {
    let cfg = StftConfig::default();
    for seed in 0..3 {
        let x = noise(16_000, seed);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        assert_eq!(y.numel(), x.numel());
        let edge = cfg.win_len - cfg.hop;
        let err = x.data()[edge..16_000 - edge]
            .iter()
            .zip(&y.data()[edge..16_000 - edge])
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-10, "{err}");
    }
}

#[test]
fn round_trip_for_ragged_lengths() {
    let cfg = StftConfig::toy();
    for n in [32, 33, 39, 40, 88, 1001] {
        let x = noise(n, n as u64);
        let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
        assert_eq!(y.numel(), n);
        let edge = cfg.win_len - cfg.hop;
        for i in edge..n.saturating_sub(edge) {
            assert!((x.data()[i] - y.data()[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn stft_is_linear() {
    let cfg = StftConfig::toy();
    let (x, y) = (noise(200, 3), noise(200, 4));
    let (a, b) = (0.7, -1.3);
    let mix = Tensor::from_fn(&[200], |i| a * x.data()[i] + b * y.data()[i]);
    let (sx, sy, sm) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap(), stft(&mix, &cfg).unwrap());
    for (m, (p, q)) in sm.real.data().iter().zip(sx.real.data().iter().zip(sy.real.data())) {
        assert!((m - (a * p + b * q)).abs() < 1e-10);
    }
    for (m, (p, q)) in sm.imag.data().iter().zip(sx.imag.data().iter().zip(sy.imag.data())) {
        assert!((m - (a * p + b * q)).abs() < 1e-10);
    }
}

#[test]
fn istft_is_linear() {
    let cfg = StftConfig::toy();
    let n = 120;
    let frames = cfg.num_frames(n);
    let bins = cfg.num_bins();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut plane = || Tensor::from_fn(&[frames, bins], |_| rng.random_range(-1.0..1.0));
    let s1 = ComplexSpectrogram::new(plane(), plane(), cfg, n).unwrap();
    let s2 = ComplexSpectrogram::new(plane(), plane(), cfg, n).unwrap();
    let (a, b) = (2.5, -0.4);
    let comb = |p: &Tensor, q: &Tensor| Tensor::from_fn(&[frames, bins], |i| a * p.data()[i] + b * q.data()[i]);
    let s = ComplexSpectrogram::new(comb(&s1.real, &s2.real), comb(&s1.imag, &s2.imag), cfg, n).unwrap();
    let (y1, y2, y) = (istft(&s1).unwrap(), istft(&s2).unwrap(), istft(&s).unwrap());
    for i in 0..n {
        assert!((y.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-10);
    }
}

#[test]
fn istft_on_tape_matches_plain_istft_and_its_gradient() {
    let cfg = StftConfig::toy();
    let x = noise(88, 6);
    let spec = stft(&x, &cfg).unwrap();
    let plain = istft(&spec).unwrap();
    let mut tape = dptfsnet::numerics::Tape::new();
    let re = tape.constant(spec.real.clone());
    let im = tape.constant(spec.imag.clone());
    let y = istft_on_tape(&mut tape, re, im, &cfg, 88).unwrap();
    assert_eq!(tape.value(y), &plain);

    let r = grad_check_many(
        |t, v| {
            let y = istft_on_tape(t, v[0], v[1], &cfg, 88)?;
            let sq = t.square(y);
            Ok(t.sum(sq))
        },
        &[spec.real.clone(), spec.imag.clone()],
        None,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn pure_tone_peaks_at_its_bin() {
    let cfg = StftConfig::default();
    // Bin 32 of a 512-point FFT at 16 kHz is 1 kHz.
    let x = Tensor::from_fn(&[4000], |i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin());
    let spec = stft(&x, &cfg).unwrap();
    let t = spec.frames() / 2;
    let mag = |k: usize| spec.real.get(&[t, k]).hypot(spec.imag.get(&[t, k]));
    let peak = (0..spec.bins()).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert_eq!(peak, 32);
}

#[test]
fn wav_file_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let x = noise(1234, 7).map(|v| 0.9 * v);
    write_wav(&path, &x, 16_000).unwrap();
    let (y, rate) = read_wav(&path).unwrap();
    assert_eq!(rate, 16_000);
    assert_eq!(y.numel(), 1234);
    assert!(x.max_abs_diff(&y) <= 0.5 / 32768.0 + 1e-12);

    let bytes = encode_wav(y.data(), 16_000);
    let (again, _) = decode_wav(&bytes).unwrap();
    assert_eq!(again, y.data());
}

#[test]
fn wav_rejects_truncated_header() {
    let bytes = encode_wav(&[0.1, 0.2], 16_000);
    assert!(decode_wav(&bytes[..20]).is_err());
}
