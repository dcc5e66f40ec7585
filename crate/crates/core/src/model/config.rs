use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::signal::{StftConfig, WindowKind};
use crate::transformer::FeedForwardKind;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature maps produced by the encoder (`C`).
    pub channels: usize,
    /// Stacked dual-path transformer blocks (`B`).
    pub blocks: usize,
    pub heads: usize,
    /// `d_ff = ffn_multiplier * C/2`.
    pub ffn_multiplier: usize,
    pub dense_layers: usize,
    /// `(time, freq)` kernel of every dense-block convolution.
    pub dense_kernel: (usize, usize),
    /// Per-layer `(time, freq)` dilation.
    pub dense_dilations: Vec<(usize, usize)>,
    pub feed_forward: FeedForwardKind,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// Full-size configuration: C = 64, B = 4, h = 4, 512-point STFT.
    pub fn reference() -> Self {
        ModelConfig {
            channels: 64,
            blocks: 4,
            heads: 4,
            ffn_multiplier: 4,
            dense_layers: 4,
            dense_kernel: (2, 3),
            dense_dilations: vec![(1, 1), (2, 1), (4, 1), (8, 1)],
            feed_forward: FeedForwardKind::Gru,
            stft: StftConfig::default(),
        }
    }

    /// Desk-scale configuration: C = 8, B = 1, h = 2, 17 frequency bins.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 8,
            blocks: 1,
            heads: 2,
            stft: StftConfig::toy(),
            ..Self::reference()
        }
    }

    /// Width of the transformer features, `C' = C / 2`.
    pub fn transformer_dim(&self) -> usize {
        self.channels / 2
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_multiplier * self.transformer_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return bad(format!("channels must be even and >= 2, got {}", self.channels));
        }
        if self.heads == 0 || !self.transformer_dim().is_multiple_of(self.heads) {
            return bad(format!(
                "transformer width {} not divisible by {} heads",
                self.transformer_dim(),
                self.heads
            ));
        }
        if self.ffn_multiplier == 0 || self.dense_layers == 0 {
            return bad("ffn_multiplier and dense_layers must be positive".into());
        }
        if self.dense_dilations.len() != self.dense_layers {
            return bad(format!(
                "{} dense dilations given for {} layers",
                self.dense_dilations.len(),
                self.dense_layers
            ));
        }
        if self.dense_kernel.0 == 0 || self.dense_kernel.1 == 0 || self.dense_kernel.1.is_multiple_of(2) {
            return bad(format!("dense kernel {:?} must be positive with odd frequency extent", self.dense_kernel));
        }
        if self.dense_dilations.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("dilations must be positive".into());
        }
        self.stft.validate()
    }

    /// Frames covered by the encoder/decoder dense block along time.
    pub fn dense_receptive_field(&self) -> usize {
        1 + self
            .dense_dilations
            .iter()
            .map(|&(dt, _)| dt * (self.dense_kernel.0 - 1))
            .sum::<usize>()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model.channels", self.channels.to_string());
        put("model.blocks", self.blocks.to_string());
        put("model.heads", self.heads.to_string());
        put("model.ffn_multiplier", self.ffn_multiplier.to_string());
        put("model.dense_layers", self.dense_layers.to_string());
        put(
            "model.dense_kernel",
            format!("{}x{}", self.dense_kernel.0, self.dense_kernel.1),
        );
        put(
            "model.dense_dilations",
            self.dense_dilations
                .iter()
                .map(|(t, f)| format!("{t}x{f}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "model.feed_forward",
            match self.feed_forward {
                FeedForwardKind::Gru => "gru",
                FeedForwardKind::Linear => "linear",
            }
            .into(),
        );
        put("stft.sample_rate", self.stft.sample_rate.to_string());
        put("stft.win_len", self.stft.win_len.to_string());
        put("stft.hop", self.stft.hop.to_string());
        put("stft.fft_len", self.stft.fft_len.to_string());
        put("stft.window", self.stft.window.name().into());
        m
    }

    /// Applies `model.*` and `stft.*` keys from `map` on top of `self`,
    /// removing them from the map. `model.preset` selects the base.
    pub fn apply_kv(mut self, map: &mut KvMap) -> Result<Self> {
        if let Some(preset) = map.remove("model.preset") {
            self = match preset.as_str() {
                "reference" => Self::reference(),
                "toy" => Self::toy(),
                other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
            };
        }
        kv::take(map, "model.channels", &mut self.channels)?;
        kv::take(map, "model.blocks", &mut self.blocks)?;
        kv::take(map, "model.heads", &mut self.heads)?;
        kv::take(map, "model.ffn_multiplier", &mut self.ffn_multiplier)?;
        kv::take(map, "model.dense_layers", &mut self.dense_layers)?;
        if let Some(v) = map.remove("model.dense_kernel") {
            self.dense_kernel = parse_pair(&v)?;
        }
        if let Some(v) = map.remove("model.dense_dilations") {
            self.dense_dilations = v.split(',').map(|s| parse_pair(s.trim())).collect::<Result<_>>()?;
        }
        if let Some(v) = map.remove("model.feed_forward") {
            self.feed_forward = match v.as_str() {
                "gru" => FeedForwardKind::Gru,
                "linear" => FeedForwardKind::Linear,
                other => return Err(Error::Config(format!("unknown feed_forward `{other}`"))),
            };
        }
        kv::take(map, "stft.sample_rate", &mut self.stft.sample_rate)?;
        kv::take(map, "stft.win_len", &mut self.stft.win_len)?;
        kv::take(map, "stft.hop", &mut self.stft.hop)?;
        kv::take(map, "stft.fft_len", &mut self.stft.fft_len)?;
        if let Some(v) = map.remove("stft.window") {
            self.stft.window = WindowKind::parse(&v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut map = kv::parse(text)?;
        let cfg = Self::reference().apply_kv(&mut map)?;
        kv::ensure_consumed(&map)?;
        Ok(cfg)
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("expected `<time>x<freq>`, got `{s}`")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("`{s}`: {e}")))
    };
    Ok((p(a)?, p(b)?))
}
