use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Analysis/synthesis window shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / len)`.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            other => Err(Error::Config(format!("unknown window `{other}`"))),
        }
    }

    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

/// STFT geometry. Frames start at sample 0 (no centring); the tail is
/// zero-padded so every input sample falls inside at least one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 16 kHz, 25 ms window, 6.25 ms hop, 512-point FFT.
    fn default() -> Self {
        StftConfig {
            sample_rate: 16_000,
            win_len: 400,
            hop: 100,
            fft_len: 512,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    /// Small geometry with 17 frequency bins, used for fast experiments.
    pub fn toy() -> Self {
        StftConfig {
            sample_rate: 16_000,
            win_len: 32,
            hop: 8,
            fft_len: 32,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Signal(format!("{m} (config {self:?})")));
        if self.win_len == 0 || self.hop == 0 || self.fft_len == 0 || self.sample_rate == 0 {
            return bad("all STFT sizes must be positive");
        }
        if self.win_len > self.fft_len {
            return bad("win_len must not exceed fft_len");
        }
        if self.hop > self.win_len || !self.win_len.is_multiple_of(self.hop) {
            return bad("hop must divide win_len");
        }
        if !self.fft_len.is_multiple_of(2) {
            return bad("fft_len must be even");
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frame count for a signal of `n` samples (`n >= win_len`).
    pub fn num_frames(&self, n: usize) -> usize {
        1 + (n - self.win_len).div_ceil(self.hop)
    }

    /// Length spanned by `frames` frames.
    pub fn span(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.win_len
    }
}

/// One-sided complex spectrogram with `[frames, bins]` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Tensor,
    pub imag: Tensor,
    pub config: StftConfig,
    pub original_len: usize,
}

impl ComplexSpectrogram {
    pub fn new(real: Tensor, imag: Tensor, config: StftConfig, original_len: usize) -> Result<Self> {
        if real.shape() != imag.shape() || real.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "spectrogram",
                lhs: real.shape().to_vec(),
                rhs: imag.shape().to_vec(),
            });
        }
        if real.shape()[1] != config.num_bins() {
            return Err(Error::Signal(format!(
                "{} bins do not match fft_len {}",
                real.shape()[1],
                config.fft_len
            )));
        }
        Ok(ComplexSpectrogram {
            real,
            imag,
            config,
            original_len,
        })
    }

    pub fn frames(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.real.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        ComplexSpectrogram {
            real: Tensor::zeros(self.real.shape()),
            imag: Tensor::zeros(self.imag.shape()),
            config: self.config,
            original_len: self.original_len,
        }
    }
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    }
}

/// Short-time Fourier transform of a rank-1 waveform.
pub fn stft(wave: &Tensor, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if wave.rank() != 1 {
        return Err(Error::Signal(format!("expected a 1-D waveform, got {:?}", wave.shape())));
    }
    let n = wave.numel();
    if n < cfg.win_len {
        return Err(Error::Signal(format!(
            "waveform of {n} samples is shorter than one window ({})",
            cfg.win_len
        )));
    }
    if !wave.all_finite() {
        return Err(Error::NonFinite { op: "stft" });
    }
    let frames = cfg.num_frames(n);
    let bins = cfg.num_bins();
    let window = cfg.window.coefficients(cfg.win_len);
    let fft = plan(cfg.fft_len, false);
    let x = wave.data();
    let mut re = Vec::with_capacity(frames * bins);
    let mut im = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let start = t * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            let s = x.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for c in &buf[..bins] {
            re.push(c.re);
            im.push(c.im);
        }
    }
    ComplexSpectrogram::new(
        Tensor::new(vec![frames, bins], re)?,
        Tensor::new(vec![frames, bins], im)?,
        *cfg,
        n,
    )
}

/// Overlap-added squared synthesis window; the WOLA normaliser.
fn wola_norm(cfg: &StftConfig, frames: usize, window: &[f64]) -> Vec<f64> {
    let mut norm = vec![0.0; cfg.span(frames)];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * cfg.hop + i] += w * w;
        }
    }
    norm
}

const NORM_FLOOR: f64 = 1e-10;

fn check_istft_geometry(cfg: &StftConfig, frames: usize, bins: usize, original_len: usize) -> Result<()> {
    cfg.validate()?;
    if bins != cfg.num_bins() {
        return Err(Error::Signal(format!(
            "{bins} bins do not match fft_len {}",
            cfg.fft_len
        )));
    }
    let span = cfg.span(frames);
    if original_len < cfg.win_len || original_len > span || span - original_len >= cfg.hop {
        return Err(Error::Signal(format!(
            "{frames} frames span {span} samples, inconsistent with original length {original_len}"
        )));
    }
    Ok(())
}

fn istft_raw(re: &[f64], im: &[f64], frames: usize, cfg: &StftConfig, original_len: usize) -> Vec<f64> {
    let bins = cfg.num_bins();
    let n_fft = cfg.fft_len;
    let window = cfg.window.coefficients(cfg.win_len);
    let ifft = plan(n_fft, true);
    let span = cfg.span(frames);
    let mut out = vec![0.0; span];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        for k in 0..bins {
            let c = Complex::new(re[t * bins + k], im[t * bins + k]);
            buf[k] = c;
            if k > 0 && k < n_fft - k {
                buf[n_fft - k] = c.conj();
            }
        }
        ifft.process(&mut buf);
        let scale = 1.0 / n_fft as f64;
        for (i, w) in window.iter().enumerate() {
            out[t * cfg.hop + i] += buf[i].re * scale * w;
        }
    }
    let norm = wola_norm(cfg, frames, &window);
    for (o, n) in out.iter_mut().zip(&norm) {
        *o = if *n > NORM_FLOOR { *o / n } else { 0.0 };
    }
    out.truncate(original_len);
    out
}

/// Inverse STFT by weighted overlap-add, trimmed to the recorded length.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Tensor> {
    let (frames, bins) = (spec.frames(), spec.bins());
    check_istft_geometry(&spec.config, frames, bins, spec.original_len)?;
    let out = istft_raw(
        spec.real.data(),
        spec.imag.data(),
        frames,
        &spec.config,
        spec.original_len,
    );
    Tensor::new(vec![spec.original_len], out)
}

/// Differentiable inverse STFT of `[frames, bins]` real and imaginary planes.
pub fn istft_on_tape(
    tape: &mut Tape,
    real: Var,
    imag: Var,
    cfg: &StftConfig,
    original_len: usize,
) -> Result<Var> {
    let shape = tape.shape(real).to_vec();
    if tape.shape(imag) != shape.as_slice() || shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "istft",
            lhs: shape,
            rhs: tape.shape(imag).to_vec(),
        });
    }
    let (frames, bins) = (shape[0], shape[1]);
    check_istft_geometry(cfg, frames, bins, original_len)?;
    let out = istft_raw(
        tape.value(real).data(),
        tape.value(imag).data(),
        frames,
        cfg,
        original_len,
    );
    let value = Tensor::new(vec![original_len], out)?;
    let op = IstftOp {
        cfg: *cfg,
        frames,
        original_len,
    };
    Ok(tape.custom(&[real, imag], value, Box::new(op)))
}

#[derive(Debug)]
struct IstftOp {
    cfg: StftConfig,
    frames: usize,
    original_len: usize,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &'static str {
        "istft"
    }

    // ISTFT is linear, so its vector-Jacobian product is the adjoint map:
    // un-normalise, window, then the adjoint of the one-sided inverse DFT.
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let cfg = &self.cfg;
        let (bins, n_fft) = (cfg.num_bins(), cfg.fft_len);
        let window = cfg.window.coefficients(cfg.win_len);
        let norm = wola_norm(cfg, self.frames, &window);
        let fft = plan(n_fft, false);
        let mut g_re = vec![0.0; self.frames * bins];
        let mut g_im = vec![0.0; self.frames * bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let scale = 1.0 / n_fft as f64;
        for t in 0..self.frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in window.iter().enumerate() {
                let pos = t * cfg.hop + i;
                if pos < self.original_len && norm[pos] > NORM_FLOOR {
                    buf[i] = Complex::new(grad_out[pos] * w / norm[pos], 0.0);
                }
            }
            fft.process(&mut buf);
            for k in 0..bins {
                let edge = k == 0 || 2 * k == n_fft;
                let c = if edge { scale } else { 2.0 * scale };
                g_re[t * bins + k] = c * buf[k].re;
                g_im[t * bins + k] = if edge { 0.0 } else { c * buf[k].im };
            }
        }
        vec![g_re, g_im]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = StftConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_bins(), 257);
        assert_eq!(cfg.num_frames(16_000), 157);
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            StftConfig { hop: 150, ..StftConfig::default() },
            StftConfig { win_len: 600, ..StftConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let s = stft(&Tensor::zeros(&[1600]), &cfg).unwrap();
        assert!(s.real.data().iter().chain(s.imag.data()).all(|&v| v == 0.0));
        let y = istft(&s).unwrap();
        assert_eq!(y.numel(), 1600);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_input_rejected() {
        assert!(stft(&Tensor::zeros(&[399]), &StftConfig::default()).is_err());
    }

    #[test]
    fn inconsistent_length_rejected() {
        let cfg = StftConfig::default();
        let mut s = stft(&Tensor::zeros(&[1600]), &cfg).unwrap();
        s.original_len = 1600 + 200;
        assert!(istft(&s).is_err());
        s.original_len = 1600 - 150;
        assert!(istft(&s).is_err());
    }
}
