//! Run configuration and the command implementations behind the `dptfsnet`
//! binary. Each command writes its report to a caller-supplied sink so it can
//! be exercised from tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::metrics::EvalReport;
use crate::model::{checkpoint, count_params, DptFsNet, MaskSource, ModelConfig, REFERENCE_PARAMS};
use crate::signal::{read_wav, write_wav};
use crate::training::{evaluate, heldout_pairs, train, SpectralLossMode, TrainConfig, TrainState};

/// Optional file locations used by the commands.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunPaths {
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub wav_in: Option<PathBuf>,
    pub wav_out: Option<PathBuf>,
    pub history_out: Option<PathBuf>,
}

/// Everything a run needs, serialisable as flat `key=value` text.
#[derive(Clone, Debug, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seed of parameter initialisation.
    pub seed: u64,
    pub paths: RunPaths,
}


impl RunConfig {
    /// Toy model with the desk-scale training setup.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected reference or desk)"))),
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = self.model.to_kv();
        let t = &self.train;
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("train.steps", t.steps.to_string());
        put("train.batch", t.batch.to_string());
        put("train.crop_len", t.crop_len.to_string());
        put("train.snr_db", t.snr_db.to_string());
        put("train.data_seed", t.data_seed.to_string());
        put("train.train_items", t.train_items.to_string());
        put("train.steps_per_epoch", t.steps_per_epoch.to_string());
        put("train.clip_norm", t.clip_norm.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("train.eval_items", t.eval_items.to_string());
        put("train.eval_len", t.eval_len.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("loss.alpha1", t.loss.alpha1.to_string());
        put("loss.alpha2", t.loss.alpha2.to_string());
        put("loss.spectral_mode", t.loss.spectral_mode.name().to_string());
        put("schedule.k1", t.schedule.k1.to_string());
        put("schedule.k2", t.schedule.k2.to_string());
        put("schedule.d_model", t.schedule.d_model.to_string());
        put("schedule.warmup", t.schedule.warmup.to_string());
        let p = &self.paths;
        for (k, v) in [
            ("paths.checkpoint_in", &p.checkpoint_in),
            ("paths.checkpoint_out", &p.checkpoint_out),
            ("paths.wav_in", &p.wav_in),
            ("paths.wav_out", &p.wav_out),
            ("paths.history_out", &p.history_out),
        ] {
            if let Some(path) = v {
                put(k, path.display().to_string());
            }
        }
        m
    }

    /// Canonical text form: every key, sorted.
    pub fn render(&self) -> String {
        kv::render(&self.to_kv())
    }

    /// Applies the keys of `map` on top of `self`. A `preset` key, if present,
    /// replaces the base before the other keys are applied.
    pub fn apply_kv(mut self, mut map: KvMap) -> Result<Self> {
        if let Some(p) = map.remove("preset") {
            self = Self::preset(&p)?;
        }
        self.model = self.model.apply_kv(&mut map)?;
        let t = &mut self.train;
        kv::take(&mut map, "seed", &mut self.seed)?;
        kv::take(&mut map, "train.steps", &mut t.steps)?;
        kv::take(&mut map, "train.batch", &mut t.batch)?;
        kv::take(&mut map, "train.crop_len", &mut t.crop_len)?;
        kv::take(&mut map, "train.snr_db", &mut t.snr_db)?;
        kv::take(&mut map, "train.data_seed", &mut t.data_seed)?;
        kv::take(&mut map, "train.train_items", &mut t.train_items)?;
        kv::take(&mut map, "train.steps_per_epoch", &mut t.steps_per_epoch)?;
        kv::take(&mut map, "train.clip_norm", &mut t.clip_norm)?;
        kv::take(&mut map, "train.eval_every", &mut t.eval_every)?;
        kv::take(&mut map, "train.eval_items", &mut t.eval_items)?;
        kv::take(&mut map, "train.eval_len", &mut t.eval_len)?;
        kv::take(&mut map, "train.checkpoint_every", &mut t.checkpoint_every)?;
        kv::take(&mut map, "loss.alpha1", &mut t.loss.alpha1)?;
        kv::take(&mut map, "loss.alpha2", &mut t.loss.alpha2)?;
        if let Some(v) = map.remove("loss.spectral_mode") {
            t.loss.spectral_mode = SpectralLossMode::parse(&v)?;
        }
        kv::take(&mut map, "schedule.k1", &mut t.schedule.k1)?;
        kv::take(&mut map, "schedule.k2", &mut t.schedule.k2)?;
        kv::take(&mut map, "schedule.d_model", &mut t.schedule.d_model)?;
        kv::take(&mut map, "schedule.warmup", &mut t.schedule.warmup)?;
        let p = &mut self.paths;
        for (k, slot) in [
            ("paths.checkpoint_in", &mut p.checkpoint_in),
            ("paths.checkpoint_out", &mut p.checkpoint_out),
            ("paths.wav_in", &mut p.wav_in),
            ("paths.wav_out", &mut p.wav_out),
            ("paths.history_out", &mut p.history_out),
        ] {
            if let Some(v) = map.remove(k) {
                *slot = Some(PathBuf::from(v));
            }
        }
        kv::ensure_consumed(&map)?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().apply_kv(kv::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let map = kv::parse(&overrides.join("\n"))?;
        self.apply_kv(map)
    }
}

/// Outcome of `train`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary> {
    let ckpt = cfg
        .paths
        .checkpoint_out
        .clone()
        .ok_or_else(|| Error::Config("train needs paths.checkpoint_out (--checkpoint-out)".into()))?;
    let mut net = match &cfg.paths.checkpoint_in {
        Some(p) => checkpoint::load(p, Some(&cfg.model))?,
        None => DptFsNet::new(cfg.model.clone(), cfg.seed)?,
    };
    let mut state = TrainState::new(&net.params, cfg.seed);
    let mut tcfg = cfg.train.clone();
    tcfg.checkpoint_path = Some(ckpt.clone());
    let history = train(&mut net, &mut state, &tcfg)?;
    checkpoint::save(&net, &ckpt)?;
    if let Some(h) = &cfg.paths.history_out {
        history.write(h)?;
    }
    let mut eval_cfg = cfg.train.clone();
    eval_cfg.eval_items = eval_cfg.eval_items.max(1);
    let eval = evaluate(&net, &heldout_pairs(&eval_cfg)?)?;
    let final_loss = history.steps.last().map(|r| r.loss);
    let w = |e: std::io::Error| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    };
    writeln!(out, "steps: {}", history.steps.len()).map_err(w)?;
    match final_loss {
        Some(l) => writeln!(out, "final loss: {l:.6}").map_err(w)?,
        None => writeln!(out, "final loss: n/a").map_err(w)?,
    }
    writeln!(
        out,
        "held-out SI-SDR: noisy {:.2} dB, enhanced {:.2} dB, improvement {:.2} dB ({} item(s))",
        eval.si_sdr_noisy, eval.si_sdr_enhanced, eval.improvement, eval.n_items
    )
    .map_err(w)?;
    writeln!(out, "checkpoint: {}", ckpt.display()).map_err(w)?;
    Ok(TrainSummary {
        steps: history.steps.len() as u64,
        final_loss,
        eval,
    })
}

/// Enhances `input` into `output`. When `expected` is given the checkpoint's
/// configuration must match it.
pub fn cmd_enhance(
    checkpoint_path: &Path,
    input: &Path,
    output: &Path,
    expected: Option<&ModelConfig>,
    source: MaskSource,
) -> Result<usize> {
    let net = checkpoint::load(checkpoint_path, expected)?;
    let (wave, rate) = read_wav(input)?;
    if rate != net.config.stft.sample_rate {
        return Err(Error::Wav(format!(
            "{} is sampled at {rate} Hz but the model expects {} Hz",
            input.display(),
            net.config.stft.sample_rate
        )));
    }
    let enhanced = net.enhance_with(&wave, source)?;
    write_wav(output, &enhanced, rate)?;
    Ok(enhanced.numel())
}

/// Parameter breakdown and configuration echo.
pub fn info_report(config: &ModelConfig, params: Option<&crate::nn::ParamStore>) -> Result<String> {
    let built;
    let store = match params {
        Some(p) => p,
        None => {
            built = DptFsNet::new(config.clone(), 0)?;
            &built.params
        }
    };
    let mut s = String::new();
    s.push_str("parameters by component\n");
    for depth in [1, 2] {
        for (name, n) in count_params(store, depth).per_component {
            if depth == 1 || name.contains('.') {
                s.push_str(&format!("  {name:<28} {n:>10}\n"));
            }
        }
    }
    let total = store.numel();
    s.push_str(&format!("  {:<28} {total:>10}\n", "total"));
    s.push_str(&format!(
        "  ratio to reference {:.2} M: {:.4}\n",
        REFERENCE_PARAMS as f64 / 1e6,
        total as f64 / REFERENCE_PARAMS as f64
    ));
    s.push_str("configuration\n");
    for line in kv::render(&config.to_kv()).lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    Ok(s)
}
