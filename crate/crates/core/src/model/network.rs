use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, LayerNorm, PRelu, ParamBuilder, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::signal::{istft, istft_on_tape, stft, ComplexSpectrogram};
use crate::transformer::ImprovedTransformer;

/// Convolution followed by layer norm over channels and a per-channel PReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub act: PRelu,
}

impl ConvUnit {
    fn new(
        pb: &mut ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
    ) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv2d::new(&mut pb.sub("conv"), c_in, c_out, kernel, dilation)?,
            norm: LayerNorm::new(&mut pb.sub("norm"), c_out)?,
            act: PRelu::new(&mut pb.sub("act"), c_out)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.norm.num_params() + self.act.num_params()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y, 0)?;
        self.act.forward(tape, p, y, 0)
    }
}

/// Densely connected dilated convolutions: layer `i` sees the block input and
/// every earlier layer output stacked along channels.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<ConvUnit>,
    pub channels: usize,
}

impl DenseBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let layers = cfg
            .dense_dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| ConvUnit::new(&mut pb.sub(i.to_string()), (i + 1) * c, c, cfg.dense_kernel, dil))
            .collect::<Result<_>>()?;
        Ok(DenseBlock { layers, channels: c })
    }

    /// Input channel count of each layer.
    pub fn layer_inputs(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.conv.c_in).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvUnit::num_params).sum()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut history = vec![x];
        let mut out = x;
        for layer in &self.layers {
            let input = if history.len() == 1 {
                history[0]
            } else {
                tape.concat(&history, 0)?
            };
            out = layer.forward(tape, p, input)?;
            history.push(out);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv_in: ConvUnit,
    pub dense: DenseBlock,
}

impl Encoder {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Encoder {
            conv_in: ConvUnit::new(&mut pb.sub("conv_in"), 2, cfg.channels, (1, 1), (1, 1))?,
            dense: DenseBlock::new(&mut pb.sub("dense"), cfg)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv_in.num_params() + self.dense.num_params()
    }

    /// `x: [2, T, F]` (real, imaginary) to `[C, T, F]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let u = self.conv_in.forward(tape, p, x)?;
        self.dense.forward(tape, p, u)
    }
}

/// One intra (along time, per frequency bin) and one inter (along frequency,
/// per frame) transformer.
#[derive(Clone, Debug)]
pub struct DualPathBlock {
    pub intra: ImprovedTransformer,
    pub inter: ImprovedTransformer,
}

/// Which transformer paths run inside the DPTPM. Disabled paths act as the
/// identity; used to probe the equivariance properties of each path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathSelection {
    pub intra: bool,
    pub inter: bool,
}

impl PathSelection {
    pub const BOTH: PathSelection = PathSelection { intra: true, inter: true };
    pub const INTRA_ONLY: PathSelection = PathSelection { intra: true, inter: false };
    pub const INTER_ONLY: PathSelection = PathSelection { intra: false, inter: true };
}

#[derive(Clone, Debug)]
pub struct Dptpm {
    pub conv_halve: Conv2d,
    pub act_halve: PRelu,
    pub blocks: Vec<DualPathBlock>,
    pub conv_double: Conv2d,
    pub act_double: PRelu,
    pub gate_feature: Conv2d,
    pub gate: Conv2d,
}

impl Dptpm {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.transformer_dim());
        let conv_halve = Conv2d::pointwise(&mut pb.sub("conv_halve"), c, d)?;
        let act_halve = PRelu::new(&mut pb.sub("act_halve"), d)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let mut bb = pb.sub(format!("blocks.{b}"));
            let intra = ImprovedTransformer::new(&mut bb.sub("intra"), d, cfg.heads, cfg.d_ff(), cfg.feed_forward)?;
            let inter = ImprovedTransformer::new(&mut bb.sub("inter"), d, cfg.heads, cfg.d_ff(), cfg.feed_forward)?;
            blocks.push(DualPathBlock { intra, inter });
        }
        Ok(Dptpm {
            conv_halve,
            act_halve,
            blocks,
            conv_double: Conv2d::pointwise(&mut pb.sub("conv_double"), d, c)?,
            act_double: PRelu::new(&mut pb.sub("act_double"), c)?,
            gate_feature: Conv2d::pointwise(&mut pb.sub("gate.feature"), c, c)?,
            gate: Conv2d::pointwise(&mut pb.sub("gate.gate"), c, c)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.conv_halve.num_params()
            + self.act_halve.num_params()
            + self
                .blocks
                .iter()
                .map(|b| b.intra.num_params() + b.inter.num_params())
                .sum::<usize>()
            + self.conv_double.num_params()
            + self.act_double.num_params()
            + self.gate_feature.num_params()
            + self.gate.num_params()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, u: Var) -> Result<Var> {
        self.forward_paths(tape, p, u, PathSelection::BOTH)
    }

    /// `u: [C, T, F]` to `[C, T, F]`.
    pub fn forward_paths(&self, tape: &mut Tape, p: &Bound, u: Var, paths: PathSelection) -> Result<Var> {
        let d0 = self.conv_halve.forward(tape, p, u)?;
        let d0 = self.act_halve.forward(tape, p, d0, 0)?;
        // Work in [T, F, C'] so both paths see channels as the feature axis.
        let mut d = tape.permute(d0, &[1, 2, 0])?;
        for block in &self.blocks {
            if paths.intra {
                // One length-T sequence per frequency bin.
                let by_freq = tape.permute(d, &[1, 0, 2])?;
                let y = block.intra.forward(tape, p, by_freq)?;
                d = tape.permute(y, &[1, 0, 2])?;
            }
            if paths.inter {
                // One length-F sequence per frame.
                d = block.inter.forward(tape, p, d)?;
            }
        }
        let d = tape.permute(d, &[2, 0, 1])?;
        let m = self.conv_double.forward(tape, p, d)?;
        let m = self.act_double.forward(tape, p, m, 0)?;
        let feature = self.gate_feature.forward(tape, p, m)?;
        let gate = self.gate.forward(tape, p, m)?;
        let gate = tape.sigmoid(gate);
        tape.mul(feature, gate)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub dense: DenseBlock,
    pub conv_out: Conv2d,
}

impl Decoder {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Decoder {
            dense: DenseBlock::new(&mut pb.sub("dense"), cfg)?,
            conv_out: Conv2d::pointwise(&mut pb.sub("conv_out"), cfg.channels, 2)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.dense.num_params() + self.conv_out.num_params()
    }

    /// `[C, T, F]` to an unbounded complex mask `[2, T, F]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, m: Var) -> Result<Var> {
        let y = self.dense.forward(tape, p, m)?;
        self.conv_out.forward(tape, p, y)
    }
}

/// How `enhance` obtains its mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskSource {
    #[default]
    Network,
    /// Bypass the network and use `(1, 0)` everywhere.
    Identity,
}

/// Tape handles produced by a differentiable enhancement pass.
#[derive(Clone, Copy, Debug)]
pub struct EnhanceVars {
    pub mask: Var,
    pub real: Var,
    pub imag: Var,
    pub wave: Var,
}

/// The complete enhancement network with its parameters.
#[derive(Clone, Debug)]
pub struct DptFsNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub dptpm: Dptpm,
    pub decoder: Decoder,
    pub params: ParamStore,
}

impl DptFsNet {
    /// Builds the network with fan-in uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut pb.sub("encoder"), &config)?;
        let dptpm = Dptpm::new(&mut pb.sub("dptpm"), &config)?;
        let decoder = Decoder::new(&mut pb.sub("decoder"), &config)?;
        Ok(DptFsNet {
            config,
            encoder,
            dptpm,
            decoder,
            params,
        })
    }

    /// `x: [2, T, F]` noisy spectrum to the complex mask `[2, T, F]`.
    pub fn forward_mask(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 3 || shape[0] != 2 || shape[2] != self.config.stft.num_bins() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![2, 0, self.config.stft.num_bins()],
            });
        }
        let u = self.encoder.forward(tape, p, x)?;
        let m = self.dptpm.forward(tape, p, u)?;
        self.decoder.forward(tape, p, m)
    }

    /// Differentiable pass from a waveform to the masked spectrum and the
    /// resynthesised waveform.
    pub fn enhance_on_tape(&self, tape: &mut Tape, p: &Bound, wave: &Tensor) -> Result<EnhanceVars> {
        let spec = stft(wave, &self.config.stft)?;
        let xr = tape.constant(spec.real.clone());
        let xi = tape.constant(spec.imag.clone());
        let x = tape.stack(&[xr, xi], 0)?;
        let mask = self.forward_mask(tape, p, x)?;
        let (real, imag) = apply_mask_on_tape(tape, xr, xi, mask)?;
        let wave = istft_on_tape(tape, real, imag, &self.config.stft, spec.original_len)?;
        Ok(EnhanceVars { mask, real, imag, wave })
    }

    /// Mask predicted for a spectrogram, without gradient tracking.
    pub fn predict_mask(&self, spec: &ComplexSpectrogram) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xr = tape.constant(spec.real.clone());
        let xi = tape.constant(spec.imag.clone());
        let x = tape.stack(&[xr, xi], 0)?;
        let mask = self.forward_mask(&mut tape, &p, x)?;
        Ok(tape.value(mask).clone())
    }

    pub fn enhance(&self, wave: &Tensor) -> Result<Tensor> {
        self.enhance_with(wave, MaskSource::Network)
    }

    /// Waveform in, waveform of the same length out.
    pub fn enhance_with(&self, wave: &Tensor, source: MaskSource) -> Result<Tensor> {
        let spec = stft(wave, &self.config.stft)?;
        let mask = match source {
            MaskSource::Network => self.predict_mask(&spec)?,
            MaskSource::Identity => identity_mask(spec.frames(), spec.bins()),
        };
        istft(&apply_mask(&spec, &mask)?)
    }
}

/// `(1, 0)` at every bin.
pub fn identity_mask(frames: usize, bins: usize) -> Tensor {
    Tensor::from_fn(&[2, frames, bins], |i| if i < frames * bins { 1.0 } else { 0.0 })
}

/// Complex multiplication of every bin of `x` by `mask: [2, T, F]`.
pub fn apply_mask(x: &ComplexSpectrogram, mask: &Tensor) -> Result<ComplexSpectrogram> {
    let (t, f) = (x.frames(), x.bins());
    if mask.shape() != [2, t, f] {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: vec![2, t, f],
            rhs: mask.shape().to_vec(),
        });
    }
    let n = t * f;
    let (mr, mi) = mask.data().split_at(n);
    let (xr, xi) = (x.real.data(), x.imag.data());
    let real = (0..n).map(|k| xr[k] * mr[k] - xi[k] * mi[k]).collect();
    let imag = (0..n).map(|k| xr[k] * mi[k] + xi[k] * mr[k]).collect();
    ComplexSpectrogram::new(
        Tensor::new(vec![t, f], real)?,
        Tensor::new(vec![t, f], imag)?,
        x.config,
        x.original_len,
    )
}

/// Tape version of [`apply_mask`]; `xr`, `xi` are `[T, F]`.
pub fn apply_mask_on_tape(tape: &mut Tape, xr: Var, xi: Var, mask: Var) -> Result<(Var, Var)> {
    let mr = tape.select(mask, 0, 0)?;
    let mi = tape.select(mask, 0, 1)?;
    let rr = tape.mul(xr, mr)?;
    let ii = tape.mul(xi, mi)?;
    let ri = tape.mul(xr, mi)?;
    let ir = tape.mul(xi, mr)?;
    Ok((tape.sub(rr, ii)?, tape.add(ri, ir)?))
}
