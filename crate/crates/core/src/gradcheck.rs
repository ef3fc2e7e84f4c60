//! Central finite-difference verification of analytic gradients.
//!
//! Functions are evaluated in `f64`. Non-scalar outputs are reduced to a
//! scalar by a fixed pseudo-random projection, so one check covers a full
//! vector-Jacobian product. A probe whose `±h` evaluations land on a
//! different side of any ReLU/PReLU/clamp kink than the base point (the
//! tape's region signature changes) is excluded and counted as skipped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Probe at most this many evenly spaced elements per input tensor.
    pub max_per_input: Option<usize>,
    /// Compare against the Richardson combination `(4 D(h/2) - D(h)) / 3` of two
    /// central differences instead of `D(h)` alone.
    pub extrapolate: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            tol: 1e-4,
            max_per_input: None,
            extrapolate: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest relative error against the plain central difference `D(h)`.
    pub max_rel_err_plain: f64,
    pub checked: usize,
    /// Checked probes whose analytic or numeric derivative is not zero.
    pub nonzero: usize,
    pub skipped_kinks: usize,
    /// `(input index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped_kinks;
        if total == 0 {
            0.0
        } else {
            self.skipped_kinks as f64 / total as f64
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

struct Eval {
    value: f64,
    signature: u64,
}

fn projection_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9c4e);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn project<'t>(out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = out.shape();
    if out.value().numel() == 1 {
        return Ok(out);
    }
    let weights = projection_weights(out.value().numel());
    let w = out.tape().constant(Tensor::new(shape, weights)?)?;
    out.mul(w)?.sum()
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Eval>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let value = project(f(&tape, &vars)?)?.value().item();
    Ok(Eval {
        value,
        signature: tape.region_signature(),
    })
}

fn probe_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if numel > k => (0..k).map(|i| (i * numel + numel / (2 * k)) / k).collect(),
        _ => (0..numel).collect(),
    }
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn check_inputs<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = project(f(&tape, &vars)?)?;
    let base_value = out.value().item();
    let base_signature = tape.region_signature();
    let grads = out.backward()?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let again = evaluate(&f, inputs)?;
    if again.value.to_bits() != base_value.to_bits() {
        return Err(Error::Determinism {
            first: base_value,
            second: again.value,
        });
    }

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in probe_indices(input.numel(), cfg.max_per_input) {
            let orig = input.data()[j];
            let steps: &[f64] = if cfg.extrapolate { &[cfg.h, cfg.h / 2.0] } else { &[cfg.h] };
            let mut diffs = Vec::with_capacity(2);
            let mut crossed = false;
            for &step in steps {
                work[i].data_mut()[j] = orig + step;
                let plus = evaluate(&f, &work)?;
                work[i].data_mut()[j] = orig - step;
                let minus = evaluate(&f, &work)?;
                work[i].data_mut()[j] = orig;
                crossed |= plus.signature != base_signature || minus.signature != base_signature;
                diffs.push((plus.value - minus.value) / (2.0 * step));
            }
            if crossed {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = match diffs[..] {
                [coarse, fine] => (4.0 * fine - coarse) / 3.0,
                _ => diffs[0],
            };
            let a = analytic[i][j];
            report.max_rel_err_plain = report.max_rel_err_plain.max(relative_error(a, diffs[0]));
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, j));
            }
            report.checked += 1;
            if a.abs() > 1e-12 || numeric.abs() > 1e-12 {
                report.nonzero += 1;
            }
        }
    }
    report.pass = report.checked > 0 && report.max_rel_err <= cfg.tol;
    Ok(report)
}

/// Single-input convenience wrapper around [`check_inputs`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    check_inputs(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        GradCheckConfig {
            h,
            tol,
            ..GradCheckConfig::default()
        },
    )
}
