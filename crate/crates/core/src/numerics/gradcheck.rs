//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    /// Coordinates whose perturbed evaluation produced a non-finite loss.
    pub non_finite: Vec<(usize, usize)>,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-10)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10)
}

/// Checks every coordinate of a single input.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), None, eps, tol)
}

/// Checks gradients of a scalar function of several inputs. When `coords` is
/// `None` every coordinate of every input is probed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps:e} outside [1e-7, 1e-4]"
        )));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v).expect("leaf grad")).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        non_finite: Vec::new(),
        pass: true,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let plus = eval(&probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let minus = eval(&probe)?;
        probe[i].data_mut()[j] = orig;
        report.coords_checked += 1;
        if !plus.is_finite() || !minus.is_finite() {
            report.non_finite.push((i, j));
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let rel = relative_error(a, numeric);
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((i, j));
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.non_finite.is_empty() && report.max_rel_err < tol;
    Ok(report)
}

/// Picks `ceil(fraction * n)` distinct coordinates (at least one) from each
/// input, reproducibly from `seed`.
pub fn sample_coords(inputs: &[Tensor], fraction: f64, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        if n == 0 {
            continue;
        }
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|j| (i, j)));
    }
    out
}
