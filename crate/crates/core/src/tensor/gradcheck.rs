//! Finite-difference verification of autodiff gradients.
//!
//! All checks run in `f64`. Central differences with step `h` are compared
//! against analytic gradients index by index. An index where the function is
//! locally non-smooth (one-sided slopes disagree, e.g. relu evaluated exactly
//! at zero) is reported as excluded rather than failed, because no finite
//! difference is meaningful there.

use super::{Graph, TensorError, TensorId};

/// Both-below-this gradients auto-pass; also the denominator floor of the
/// relative error.
const ABS_FLOOR: f64 = 1e-6;
/// One-sided slope disagreement (relative) above which a point is treated as
/// sitting on a kink.
const KINK_JUMP: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked (non-excluded) indices.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Indices skipped because the function is non-smooth there.
    pub excluded: Vec<usize>,
    /// (index, relative error, analytic, numeric) for indices over tolerance.
    pub failures: Vec<(usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("function evaluated to a non-finite value at perturbed index {index}")]
    NonFinite { index: usize },
    #[error("function evaluation failed: {0}")]
    Eval(#[from] TensorError),
}

/// Compares `analytic` against central finite differences of `f` at `params`.
///
/// `f` must be deterministic. Relative error uses
/// `|ad - fd| / max(|ad|, |fd|, 1e-6)`; indices where both magnitudes are
/// below 1e-6 pass automatically.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64, TensorError>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError> {
    assert_eq!(params.len(), analytic.len(), "analytic gradient length mismatch");
    let mut theta = params.to_vec();
    let mut report =
        GradCheckReport { max_rel_err: 0.0, checked: 0, excluded: Vec::new(), failures: Vec::new() };
    let mut f_center: Option<f64> = None;
    for i in 0..params.len() {
        let mut eval_at = |v: f64, theta: &mut [f64]| -> Result<f64, GradCheckError> {
            let old = theta[i];
            theta[i] = v;
            let out = f(theta)?;
            theta[i] = old;
            if !out.is_finite() {
                return Err(GradCheckError::NonFinite { index: i });
            }
            Ok(out)
        };
        let fp = eval_at(params[i] + h, &mut theta)?;
        let fm = eval_at(params[i] - h, &mut theta)?;
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic[i];
        if ad.abs() < ABS_FLOOR && fd.abs() < ABS_FLOOR {
            report.checked += 1;
            continue;
        }
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(ABS_FLOOR);
        if rel <= tol {
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            continue;
        }
        // Over tolerance: decide kink vs genuine failure from the one-sided
        // slopes around the point.
        let f0 = match f_center {
            Some(v) => v,
            None => {
                let v = eval_at(params[i], &mut theta)?;
                f_center = Some(v);
                v
            }
        };
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        let jump = (fwd - bwd).abs() / fwd.abs().max(bwd.abs()).max(1.0);
        if jump > KINK_JUMP {
            report.excluded.push(i);
        } else {
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.failures.push((i, rel, ad, fd));
        }
    }
    Ok(report)
}

/// Builds a graph over `inputs` (all promoted to differentiable leaves), dots
/// the builder's output with a fixed pseudorandom probe to get a scalar, and
/// checks every input's gradient by finite differences.
///
/// Returns one report per input, in order.
pub fn check_builder(
    inputs: &[(Vec<f64>, Vec<usize>)],
    h: f64,
    tol: f64,
    build: &dyn Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
) -> Result<Vec<GradCheckReport>, GradCheckError> {
    let run = |vals: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
        let mut g: Graph<f64> = Graph::new();
        let mut ids = Vec::with_capacity(inputs.len());
        for (k, (_, shape)) in inputs.iter().enumerate() {
            ids.push(g.leaf(vals[k].clone(), shape.clone(), true)?);
        }
        let out = build(&mut g, &ids)?;
        let probe_vals = probe(g.data(out).len());
        let probe_t = g.constant(probe_vals, g.shape(out).to_vec())?;
        let prod = g.mul(out, probe_t)?;
        let loss = g.sum(prod)?;
        let value = g.value(loss);
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.data(id).len()]))
            .collect();
        Ok((value, grads))
    };

    let base_vals: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic) = run(&base_vals)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut f = |theta: &[f64]| -> Result<f64, TensorError> {
            let mut vals = base_vals.clone();
            vals[k] = theta.to_vec();
            run(&vals).map(|(v, _)| v)
        };
        reports.push(finite_diff_check(&mut f, &inputs[k].0, &analytic[k], h, tol)?);
    }
    Ok(reports)
}

/// Deterministic probe weights in [-1, 1), distinct per position, so every
/// output element contributes to the scalar with a different weight.
fn probe(len: usize) -> Vec<f64> {
    let mut s = 0x9E37_79B9_7F4A_7C15u64 ^ (len as u64);
    (0..len)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 52) as f64) - 1.0
        })
        .collect()
}
