//! Self-checks run by `dptfsnet verify`.
//!
//! Every gradient suite compares tape gradients against central differences.
//! A tamper target injects a scaled backward rule for one op kind, which the
//! suites exercising that op must then report as a failure.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{DptFsNet, MaskSource, ModelConfig, PathSelection};
use crate::nn::{Bound, Gru, MultiHeadSelfAttention, ParamBuilder, ParamStore};
use crate::numerics::{grad_check_many, sample_coords, Conv2dGeometry, GradCheckReport, OpKind, ReduceOp, Tape, Tensor, Var};
use crate::signal::{istft, istft_on_tape, stft, StftConfig};
use crate::training::{loss_audio_on_tape, lr_schedule, ScheduleConfig};
use crate::transformer::{ffn_positional_sensitivity_probe, FeedForwardKind, ImprovedTransformer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::InvalidArgument(format!("unknown verify level `{other}`"))),
        }
    }
}

/// Parses a tamper target such as `conv2d` or `layer_norm`.
pub fn parse_op_kind(s: &str) -> Result<OpKind> {
    use OpKind::*;
    [
        Elementwise, Scale, MatMul, Permute, Reshape, Reduce, Softmax, Concat, Slice, Conv2d, LayerNorm, Prelu, Custom,
    ]
    .into_iter()
    .find(|k| k.name() == s)
    .ok_or_else(|| Error::InvalidArgument(format!("unknown op kind `{s}`")))
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub suites: Vec<SuiteOutcome>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.suites.iter().all(|s| s.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteOutcome> {
        self.suites.iter().filter(|s| !s.pass)
    }
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FAULT_FACTOR: f64 = 1.5;

struct Ctx {
    tamper: Option<OpKind>,
}

impl Ctx {
    fn tape_setup(&self, tape: &mut Tape) {
        if let Some(kind) = self.tamper {
            tape.inject_grad_fault(kind, FAULT_FACTOR);
        }
    }

    fn check<F>(&self, inputs: &[Tensor], coords: Option<&[(usize, usize)]>, eps: f64, tol: f64, f: F) -> Result<(bool, String)>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = grad_check_many(
            |tape, vars| {
                self.tape_setup(tape);
                f(tape, vars)
            },
            inputs,
            coords,
            eps,
            tol,
        )?;
        Ok((report.pass, describe(&report)))
    }
}

fn describe(r: &GradCheckReport) -> String {
    let mut s = format!("max rel err {:.2e} over {} coords", r.max_rel_err, r.coords_checked);
    if let Some((i, j)) = r.worst {
        s.push_str(&format!(
            " (worst input {i}[{j}]: analytic {:.6e}, numeric {:.6e})",
            r.analytic_at_worst, r.numeric_at_worst
        ));
    }
    if !r.non_finite.is_empty() {
        s.push_str(&format!(", {} non-finite probes", r.non_finite.len()));
    }
    s
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts `y` with fixed random weights so every output coordinate
/// influences the scalar.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, tape.shape(y));
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    Ok(tape.sum(prod))
}

fn store_inputs(store: &ParamStore, extra: Vec<Tensor>) -> Vec<Tensor> {
    let mut v = extra;
    v.extend(store.tensors().iter().cloned());
    v
}

fn grad_elementwise(ctx: &Ctx) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_away_from_zero(&mut rng, &[3, 4]);
    let b = rand_away_from_zero(&mut rng, &[4]);
    ctx.check(&[a, b], None, EPS, TOL, |t, v| {
        let (a, b) = (v[0], v[1]);
        let s = t.add(a, b)?;
        let d = t.sub(a, b)?;
        let m = t.mul(s, d)?;
        let q = t.div(m, b)?;
        let r = t.relu(a);
        let g = t.sigmoid(q);
        let h = t.tanh(d);
        let k = t.abs(a);
        let sq = t.square(h);
        let n = t.neg(g);
        let mut acc = t.add(r, n)?;
        for x in [k, sq, q] {
            acc = t.add(acc, x)?;
        }
        probe(t, acc, 11)
    })
}

fn grad_matmul(ctx: &Ctx) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4, 5]);
    ctx.check(&[a, b], None, EPS, TOL, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        let y = t.scale(y, 0.7);
        probe(t, y, 12)
    })
}

fn grad_shape_ops(ctx: &Ctx) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 3, 2]);
    ctx.check(&[a, b], None, EPS, TOL, |t, v| {
        let c = t.concat(&[v[0], v[1]], 2)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let s = t.slice(p, 0, 1, 4)?;
        let r = t.reshape(s, &[4, 6])?;
        let tr = t.transpose(r)?;
        probe(t, tr, 13)
    })
}

fn grad_reduce_softmax(ctx: &Ctx) -> Result<(bool, String)> {
    // Distinct values keep the max away from ties.
    let x = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 12) as f64 * 0.13 - 0.6);
    ctx.check(&[x], None, EPS, TOL, |t, v| {
        let sm = t.softmax(v[0], 1)?;
        let a = t.reduce(ReduceOp::Sum, sm, Some(0))?;
        let m = t.reduce(ReduceOp::Max, v[0], Some(1))?;
        let mu = t.reduce(ReduceOp::Mean, v[0], Some(0))?;
        let pa = probe(t, a, 14)?;
        let pm = probe(t, m, 15)?;
        let pmu = probe(t, mu, 16)?;
        let smp = probe(t, sm, 17)?;
        let s = t.add(pa, pm)?;
        let s = t.add(s, pmu)?;
        t.add(s, smp)
    })
}

fn grad_conv2d(ctx: &Ctx) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 5, 6]);
    let w = rand_tensor(&mut rng, &[3, 2, 2, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let geom = Conv2dGeometry {
        dilation: (2, 1),
        pad_time: (2, 0),
        pad_freq: (1, 1),
    };
    ctx.check(&[x, w, b], None, EPS, TOL, move |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], geom)?;
        probe(t, y, 18)
    })
}

fn grad_layer_norm(ctx: &Ctx) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4, 5]);
    let g0 = rand_tensor(&mut rng, &[3]);
    let b0 = rand_tensor(&mut rng, &[3]);
    let g2 = rand_tensor(&mut rng, &[5]);
    let b2 = rand_tensor(&mut rng, &[5]);
    ctx.check(&[x, g0, b0, g2, b2], None, EPS, TOL, |t, v| {
        let y0 = t.layer_norm(v[0], v[1], v[2], 0, 1e-5)?;
        let y2 = t.layer_norm(v[0], v[3], v[4], 2, 1e-5)?;
        let a = probe(t, y0, 19)?;
        let b = probe(t, y2, 20)?;
        t.add(a, b)
    })
}

fn grad_prelu(ctx: &Ctx) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_away_from_zero(&mut rng, &[3, 4, 2]);
    let alpha = rand_tensor(&mut rng, &[3]);
    ctx.check(&[x, alpha], None, EPS, TOL, |t, v| {
        let y = t.prelu(v[0], v[1], 0)?;
        probe(t, y, 21)
    })
}

fn grad_istft(ctx: &Ctx) -> Result<(bool, String)> {
    let cfg = StftConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let len = 88;
    let frames = cfg.num_frames(len);
    let re = rand_tensor(&mut rng, &[frames, cfg.num_bins()]);
    let im = rand_tensor(&mut rng, &[frames, cfg.num_bins()]);
    ctx.check(&[re, im], None, EPS, TOL, move |t, v| {
        let y = istft_on_tape(t, v[0], v[1], &cfg, len)?;
        probe(t, y, 22)
    })
}

fn grad_layer<F>(ctx: &Ctx, store: &ParamStore, z: Tensor, forward: F) -> Result<(bool, String)>
where
    F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let inputs = store_inputs(store, vec![z]);
    ctx.check(&inputs, None, EPS, TOL, |t, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let y = forward(t, &p, v[0])?;
        probe(t, y, 23)
    })
}

fn grad_gru(ctx: &Ctx) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gru = Gru::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("gru"), 3, 4)?;
    let z = rand_tensor(&mut rng, &[2, 5, 3]);
    grad_layer(ctx, &store, z, |t, p, x| gru.forward(t, p, x))
}

fn grad_attention(ctx: &Ctx) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let attn = MultiHeadSelfAttention::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("attn"), 4, 2)?;
    let z = rand_tensor(&mut rng, &[2, 5, 4]);
    grad_layer(ctx, &store, z, |t, p, x| attn.forward(t, p, x))
}

fn grad_transformer(ctx: &Ctx) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let block = ImprovedTransformer::new(
        &mut ParamBuilder::new(&mut store, &mut rng).sub("block"),
        4,
        2,
        8,
        FeedForwardKind::Gru,
    )?;
    let z = rand_tensor(&mut rng, &[2, 5, 4]);
    grad_layer(ctx, &store, z, |t, p, x| block.forward(t, p, x))
}

fn stft_round_trip(_: &Ctx) -> Result<(bool, String)> {
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = cfg.sample_rate as usize;
    let x = rand_tensor(&mut rng, &[n]);
    let y = istft(&stft(&x, &cfg)?)?;
    // The outermost win_len - hop samples at each end are not fully overlapped.
    let edge = cfg.win_len - cfg.hop;
    let err = x.data()[edge..n - edge]
        .iter()
        .zip(&y.data()[edge..n - edge])
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok((err < 1e-10, format!("max abs error {err:.2e} over {} interior samples", n - 2 * edge)))
}

fn mask_identity(_: &Ctx) -> Result<(bool, String)> {
    let net = DptFsNet::new(ModelConfig::toy(), 15)?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[1000]);
    let via_mask = net.enhance_with(&x, MaskSource::Identity)?;
    let round_trip = istft(&stft(&x, &net.config.stft)?)?;
    let err = via_mask.max_abs_diff(&round_trip);
    Ok((err <= 1e-9, format!("max abs deviation {err:.2e}")))
}

fn schedule_golden(_: &Ctx) -> Result<(bool, String)> {
    let cfg = ScheduleConfig::default();
    let cases = [(1, 0, 1.397542485937369e-7), (4001, 0, 4e-4), (4001, 3, 4e-4 * 0.98)];
    let mut worst = 0.0f64;
    for (n, epoch, want) in cases {
        let got = lr_schedule(n, epoch, &cfg)?;
        worst = worst.max(((got - want) / want).abs());
    }
    Ok((worst <= 1e-9, format!("max rel deviation {worst:.2e} over {} points", cases.len())))
}

fn attention_equivariance(_: &Ctx) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let attn = MultiHeadSelfAttention::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("attn"), 8, 2)?;
    let l = 7;
    let z = rand_tensor(&mut rng, &[l, 8]);
    let perm: Vec<usize> = (0..l).map(|i| (3 * i + 2) % l).collect();
    let permute_rows = |t: &Tensor| Tensor::from_fn(&[l, 8], |k| t.data()[perm[k / 8] * 8 + k % 8]);
    let run = |z: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(z.clone());
        let y = attn.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    };
    let err = run(&permute_rows(&z))?.max_abs_diff(&permute_rows(&run(&z)?));
    Ok((err <= 1e-12, format!("max abs deviation {err:.2e}")))
}

fn ffn_order_sensitivity(_: &Ctx) -> Result<(bool, String)> {
    let mut hits = 0;
    for seed in 0..10u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let block = ImprovedTransformer::new(
            &mut ParamBuilder::new(&mut store, &mut rng).sub("block"),
            8,
            2,
            16,
            FeedForwardKind::Gru,
        )?;
        let z = rand_tensor(&mut rng, &[6, 8]);
        if ffn_positional_sensitivity_probe(&block, &store, &z)? {
            hits += 1;
        }
    }
    Ok((hits == 10, format!("{hits}/10 blocks sensitive to sequence order")))
}

fn intra_frequency_equivariance(_: &Ctx) -> Result<(bool, String)> {
    let net = DptFsNet::new(ModelConfig::toy(), 13)?;
    let (c, tn, f) = (net.config.channels, 6, net.config.stft.num_bins());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let u = rand_tensor(&mut rng, &[c, tn, f]);
    let perm: Vec<usize> = (0..f).map(|i| (5 * i + 3) % f).collect();
    let permute_freq = |t: &Tensor| Tensor::from_fn(&[c, tn, f], |k| t.data()[k - k % f + perm[k % f]]);
    let run = |u: &Tensor| -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = net.params.bind_frozen(&mut tape);
        let x = tape.constant(u.clone());
        let y = net.dptpm.forward_paths(&mut tape, &p, x, PathSelection::INTRA_ONLY)?;
        Ok(tape.value(y).clone())
    };
    let err = run(&permute_freq(&u))?.max_abs_diff(&permute_freq(&run(&u)?));
    Ok((err <= 1e-10, format!("max abs deviation {err:.2e}")))
}

fn grad_full_model(ctx: &Ctx) -> Result<(bool, String)> {
    let net = DptFsNet::new(ModelConfig::toy(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let len = 88;
    let noisy = Tensor::from_fn(&[len], |_| rng.random_range(-0.5..0.5));
    let clean = Tensor::from_fn(&[len], |_| rng.random_range(-0.5..0.5));
    let inputs = net.params.tensors().to_vec();
    // 1% of every parameter tensor; exhaustive checks run into the f64
    // rounding floor on coordinates whose gradient is below ~1e-7.
    let coords = sample_coords(&inputs, 0.01, 0);
    ctx.check(&inputs, Some(&coords), 1e-5, 1e-4, |t, v| {
        let p = Bound::from_vars(v.to_vec());
        let out = net.enhance_on_tape(t, &p, &noisy)?;
        let target = t.constant(clean.clone());
        loss_audio_on_tape(t, target, out.wave)
    })
}

type Suite = (&'static str, fn(&Ctx) -> Result<(bool, String)>);

const FAST: &[Suite] = &[
    ("grad elementwise", grad_elementwise),
    ("grad matmul", grad_matmul),
    ("grad permute/reshape/concat/slice", grad_shape_ops),
    ("grad reduce/softmax", grad_reduce_softmax),
    ("grad conv2d", grad_conv2d),
    ("grad layer_norm", grad_layer_norm),
    ("grad prelu", grad_prelu),
    ("grad istft", grad_istft),
    ("grad gru", grad_gru),
    ("grad attention", grad_attention),
    ("grad transformer", grad_transformer),
    ("stft round trip", stft_round_trip),
    ("mask identity", mask_identity),
    ("lr schedule golden values", schedule_golden),
    ("attention permutation equivariance", attention_equivariance),
    ("gru feed-forward order sensitivity", ffn_order_sensitivity),
];

const FULL_EXTRA: &[Suite] = &[
    ("intra-path frequency equivariance", intra_frequency_equivariance),
    ("grad full toy model", grad_full_model),
];

/// Runs the suites of `level`, calling `on_done` after each one.
pub fn run(level: Level, tamper: Option<OpKind>, mut on_done: impl FnMut(&SuiteOutcome)) -> VerifyReport {
    let ctx = Ctx { tamper };
    let suites = FAST
        .iter()
        .chain(if level == Level::Full { FULL_EXTRA } else { &[] });
    let mut report = VerifyReport::default();
    for &(name, suite) in suites {
        let start = Instant::now();
        let (pass, detail) = match suite(&ctx) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let outcome = SuiteOutcome {
            name,
            pass,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_done(&outcome);
        report.suites.push(outcome);
    }
    report
}
