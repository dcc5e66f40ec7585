//! Time-domain MSE, spectral L1 and their weighted combination.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::signal::ComplexSpectrogram;

/// How the real and imaginary magnitude differences enter the spectral loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpectralLossMode {
    /// `| (|Y_r| - |Ŷ_r|) + (|Y_i| - |Ŷ_i|) |`: both differences inside one
    /// absolute value, so opposite errors cancel.
    #[default]
    Literal,
    /// `| |Y_r| - |Ŷ_r| | + | |Y_i| - |Ŷ_i| |`
    Separate,
}

impl SpectralLossMode {
    pub fn name(self) -> &'static str {
        match self {
            SpectralLossMode::Literal => "literal",
            SpectralLossMode::Separate => "separate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SpectralLossMode::Literal),
            "separate" => Ok(SpectralLossMode::Separate),
            other => Err(Error::Config(format!("unknown spectral loss mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub spectral_mode: SpectralLossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 0.4,
            alpha2: 0.6,
            spectral_mode: SpectralLossMode::Literal,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        Ok(())
    }
}

/// Loss value with its two components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub audio: f64,
    pub spectral: f64,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn loss_audio(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    same_shape("loss_audio", y, y_hat)?;
    let n = y.numel().max(1) as f64;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn loss_spectral(y: &ComplexSpectrogram, y_hat: &ComplexSpectrogram, mode: SpectralLossMode) -> Result<f64> {
    same_shape("loss_spectral", &y.real, &y_hat.real)?;
    let n = y.real.numel().max(1) as f64;
    let mut acc = 0.0;
    for k in 0..y.real.numel() {
        let dr = y.real.data()[k].abs() - y_hat.real.data()[k].abs();
        let di = y.imag.data()[k].abs() - y_hat.imag.data()[k].abs();
        acc += match mode {
            SpectralLossMode::Literal => (dr + di).abs(),
            SpectralLossMode::Separate => dr.abs() + di.abs(),
        };
    }
    Ok(acc / n)
}

pub fn loss_combined(
    y: &Tensor,
    y_hat: &Tensor,
    spec: &ComplexSpectrogram,
    spec_hat: &ComplexSpectrogram,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let audio = loss_audio(y, y_hat)?;
    let spectral = loss_spectral(spec, spec_hat, cfg.spectral_mode)?;
    Ok(LossParts {
        total: cfg.alpha1 * audio + cfg.alpha2 * spectral,
        audio,
        spectral,
    })
}

pub fn loss_audio_on_tape(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    let d = tape.sub(y, y_hat)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `target_*` and `est_*` are `[T, F]` planes.
pub fn loss_spectral_on_tape(
    tape: &mut Tape,
    target_real: Var,
    target_imag: Var,
    est_real: Var,
    est_imag: Var,
    mode: SpectralLossMode,
) -> Result<Var> {
    let diff = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let (aa, bb) = (tape.abs(a), tape.abs(b));
        tape.sub(aa, bb)
    };
    let dr = diff(tape, target_real, est_real)?;
    let di = diff(tape, target_imag, est_imag)?;
    let per_bin = match mode {
        SpectralLossMode::Literal => {
            let s = tape.add(dr, di)?;
            tape.abs(s)
        }
        SpectralLossMode::Separate => {
            let (ar, ai) = (tape.abs(dr), tape.abs(di));
            tape.add(ar, ai)?
        }
    };
    Ok(tape.mean(per_bin))
}

/// Returns `(total, audio, spectral)` variables.
#[allow(clippy::too_many_arguments)]
pub fn loss_combined_on_tape(
    tape: &mut Tape,
    y: Var,
    y_hat: Var,
    target_real: Var,
    target_imag: Var,
    est_real: Var,
    est_imag: Var,
    cfg: &LossConfig,
) -> Result<(Var, Var, Var)> {
    let audio = loss_audio_on_tape(tape, y, y_hat)?;
    let spectral = loss_spectral_on_tape(tape, target_real, target_imag, est_real, est_imag, cfg.spectral_mode)?;
    let a = tape.scale(audio, cfg.alpha1);
    let s = tape.scale(spectral, cfg.alpha2);
    Ok((tape.add(a, s)?, audio, spectral))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;

    fn bin(r: f64, i: f64) -> ComplexSpectrogram {
        let cfg = StftConfig::toy();
        let mut s = ComplexSpectrogram::new(
            Tensor::zeros(&[1, cfg.num_bins()]),
            Tensor::zeros(&[1, cfg.num_bins()]),
            cfg,
            cfg.win_len,
        )
        .unwrap();
        // Only bin 0 is nonzero; rescale so the mean over bins is the bin value.
        let n = cfg.num_bins() as f64;
        s.real.data_mut()[0] = r * n;
        s.imag.data_mut()[0] = i * n;
        s
    }

    #[test]
    fn audio_examples() {
        let z = Tensor::zeros(&[2]);
        assert_eq!(loss_audio(&Tensor::from_vec(vec![1.0, 1.0]), &z).unwrap(), 1.0);
        assert_eq!(loss_audio(&Tensor::from_vec(vec![2.0, 0.0]), &z).unwrap(), 2.0);
        assert!(loss_audio(&z, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn spectral_examples() {
        let lit = SpectralLossMode::Literal;
        assert!((loss_spectral(&bin(3.0, 4.0), &bin(0.0, 0.0), lit).unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(loss_spectral(&bin(1.0, 2.0), &bin(2.0, 1.0), lit).unwrap(), 0.0);
        let sep = loss_spectral(&bin(1.0, 2.0), &bin(2.0, 1.0), SpectralLossMode::Separate).unwrap();
        assert!((sep - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [SpectralLossMode::Literal, SpectralLossMode::Separate] {
            assert_eq!(SpectralLossMode::parse(m.name()).unwrap(), m);
        }
    }
}
