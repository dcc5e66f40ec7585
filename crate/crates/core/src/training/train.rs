use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{heldout_seed, item_seed, make_synthetic_pair};
use super::loss::{loss_combined_on_tape, LossConfig, LossParts};
use super::optim::{adam_step, clip_gradients, TrainState};
use super::schedule::{lr_schedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::metrics::{si_sdr, EvalReport};
use crate::model::{checkpoint, DptFsNet};
use crate::numerics::{Tape, Tensor};
use crate::signal::stft;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Samples per training crop.
    pub crop_len: usize,
    pub snr_db: f64,
    /// Seed of the synthetic data stream.
    pub data_seed: u64,
    /// Size of the fixed training set, cycled in order. 0 draws a fresh item
    /// for every batch slot.
    pub train_items: usize,
    /// Optimiser steps that make up one epoch of the schedule.
    pub steps_per_epoch: u64,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub clip_norm: f64,
    /// Evaluate on held-out items every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_items: usize,
    pub eval_len: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 2,
            crop_len: 8000,
            snr_db: 0.0,
            data_seed: 0,
            train_items: 0,
            steps_per_epoch: 100,
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            clip_norm: 5.0,
            eval_every: 0,
            eval_items: 1,
            eval_len: 8000,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// Short crops and a compressed schedule for runs of a few hundred steps.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 600,
            batch: 2,
            crop_len: 1024,
            train_items: 100,
            steps_per_epoch: 50,
            schedule: ScheduleConfig::desk(),
            eval_len: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("batch and steps_per_epoch must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        self.loss.validate()?;
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_audio: f64,
    pub loss_spectral: f64,
    pub clip_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Append-only training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }

    /// One JSON object per line, steps and evaluations interleaved by step.
    pub fn to_json_lines(&self) -> String {
        let mut lines: Vec<(u64, u8, String)> = Vec::new();
        for r in &self.steps {
            lines.push((r.step, 0, serde_json::to_string(&Line::Step(r)).expect("serialisable")));
        }
        for r in &self.evals {
            lines.push((r.step, 1, serde_json::to_string(&Line::Eval(r)).expect("serialisable")));
        }
        lines.sort_by_key(|l| (l.0, l.1));
        lines.into_iter().map(|l| l.2 + "\n").collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Mean loss and summed parameter gradients (divided by the batch size) for
/// `(clean, noisy)` pairs. Items are processed in order so the sum is
/// reproducible.
pub fn batch_gradients(net: &DptFsNet, pairs: &[(Tensor, Tensor)], loss: &LossConfig) -> Result<(LossParts, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = net.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut parts = LossParts {
        total: 0.0,
        audio: 0.0,
        spectral: 0.0,
    };
    let inv = 1.0 / pairs.len() as f64;
    for (clean, noisy) in pairs {
        let target = stft(clean, &net.config.stft)?;
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape);
        let est = net.enhance_on_tape(&mut tape, &p, noisy)?;
        let y = tape.constant(clean.clone());
        let tr = tape.constant(target.real);
        let ti = tape.constant(target.imag);
        let (total, audio, spectral) = loss_combined_on_tape(&mut tape, y, est.wave, tr, ti, est.real, est.imag, loss)?;
        let g = tape.backward(total)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(raw) = g.raw(v) {
                acc.data_mut().iter_mut().zip(raw).for_each(|(a, b)| *a += inv * b);
            }
        }
        parts.total += inv * tape.value(total).item()?;
        parts.audio += inv * tape.value(audio).item()?;
        parts.spectral += inv * tape.value(spectral).item()?;
    }
    Ok((parts, grads))
}

/// Training pairs for 1-based step `step`.
pub fn training_batch(cfg: &TrainConfig, step: u64) -> Result<Vec<(Tensor, Tensor)>> {
    (0..cfg.batch)
        .map(|i| {
            let mut index = (step - 1) * cfg.batch as u64 + i as u64;
            if cfg.train_items > 0 {
                index %= cfg.train_items as u64;
            }
            make_synthetic_pair(item_seed(cfg.data_seed, index), cfg.crop_len, cfg.snr_db)
        })
        .collect()
}

/// Held-out `(clean, noisy)` pairs drawn from the training distribution.
pub fn heldout_pairs(cfg: &TrainConfig) -> Result<Vec<(Tensor, Tensor)>> {
    (0..cfg.eval_items)
        .map(|k| make_synthetic_pair(heldout_seed(cfg.data_seed, k as u64), cfg.eval_len, cfg.snr_db))
        .collect()
}

/// SI-SDR of the noisy and enhanced signals against the clean reference.
pub fn evaluate(net: &DptFsNet, pairs: &[(Tensor, Tensor)]) -> Result<EvalReport> {
    let scores = pairs
        .iter()
        .map(|(clean, noisy)| Ok((si_sdr(noisy, clean)?, si_sdr(&net.enhance(noisy)?, clean)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(&scores)
}

/// One optimiser step: gradients, clipping, schedule, Adam.
pub fn train_step(net: &mut DptFsNet, state: &mut TrainState, cfg: &TrainConfig) -> Result<StepRecord> {
    let n = state.step + 1;
    let pairs = training_batch(cfg, n)?;
    let lr = lr_schedule(n, state.epoch, &cfg.schedule)?;
    let (parts, mut grads) = batch_gradients(net, &pairs, &cfg.loss)?;
    if !parts.total.is_finite() {
        return Err(Error::Diverged {
            step: n,
            lr,
            loss: parts.total,
        });
    }
    let clip_scale = clip_gradients(&net.params, &mut grads, state.clip_norm)?;
    adam_step(&mut net.params, &grads, state, lr)?;
    let record = StepRecord {
        step: n,
        epoch: state.epoch,
        lr,
        loss: parts.total,
        loss_audio: parts.audio,
        loss_spectral: parts.spectral,
        clip_scale,
    };
    state.epoch = state.step / cfg.steps_per_epoch;
    Ok(record)
}

/// Runs `cfg.steps` optimiser steps, continuing from `state`.
pub fn train(net: &mut DptFsNet, state: &mut TrainState, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    state.clip_norm = cfg.clip_norm;
    let mut history = History::default();
    let heldout = if cfg.eval_every > 0 { heldout_pairs(cfg)? } else { Vec::new() };
    for _ in 0..cfg.steps {
        let record = train_step(net, state, cfg)?;
        let step = record.step;
        history.steps.push(record);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            history.evals.push(EvalRecord {
                step,
                report: evaluate(net, &heldout)?,
            });
        }
        if let (true, Some(path)) = (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0, &cfg.checkpoint_path) {
            checkpoint::save(net, path)?;
        }
    }
    Ok(history)
}

/// Mean of consecutive blocks of `block` values; a trailing partial block is
/// dropped.
pub fn block_means(values: &[f64], block: usize) -> Vec<f64> {
    values
        .chunks_exact(block.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
