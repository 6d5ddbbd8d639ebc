//! Central finite-difference verification of tape gradients.
//!
//! The checker is deliberately independent of the backward pass: it reruns
//! the caller's forward closure with each parameter element nudged by ±h and
//! compares (f⁺ − f⁻) / 2h against the analytic gradient. Run it in f64;
//! f32 rounding drowns the difference quotient.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::ParamGroup;
use crate::Result;

/// Loss node plus the tape binding of every parameter the closure lifted.
pub struct BoundLoss {
    pub loss: Var,
    pub bindings: Vec<(String, Var)>,
}

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// the ratio up: |a−n| / max(|a|, |n|, 1e-6).
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks d loss / d params for `forward`, a pure function of the parameter
/// group. Frozen entries are reported as exactly zero on both sides and are
/// never perturbed; the freeze contract defines their effective gradient to
/// be zero.
pub fn finite_diff_check<S, F>(
    params: &ParamGroup<S>,
    h: f64,
    mut forward: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &ParamGroup<S>) -> Result<BoundLoss>,
{
    let mut tape = Tape::new();
    let bound = forward(&mut tape, params)?;
    tape.backward(bound.loss)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, var) in &bound.bindings {
        let t = params.get(name).ok_or_else(|| {
            crate::Error::InvalidArgument(format!("binding for unknown parameter `{name}`"))
        })?;
        let g = if t.requires_grad() {
            tape.grad(*var)
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        } else {
            // Frozen: analytic side is zero by the freeze contract, and the
            // tape must agree by never having written a gradient.
            assert!(tape.grad(*var).is_none());
            vec![0.0; t.numel()]
        };
        analytic.push((name.clone(), g));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked_elements: 0,
    };

    for (name, grads) in &analytic {
        if !params.get(name).unwrap().requires_grad() {
            report.checked_elements += grads.len();
            continue;
        }
        for e in 0..grads.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let v0 = plus.get(name).unwrap().data()[e].as_f64();
            plus.get_mut(name).unwrap().data_mut()[e] = S::from_f64(v0 + h);
            minus.get_mut(name).unwrap().data_mut()[e] = S::from_f64(v0 - h);

            let mut tp = Tape::new();
            let lp = forward(&mut tp, &plus)?;
            let f_plus = tp.scalar_value(lp.loss).as_f64();
            let mut tm = Tape::new();
            let lm = forward(&mut tm, &minus)?;
            let f_minus = tm.scalar_value(lm.loss).as_f64();

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grads[e];
            let re = rel_err(a, numeric);
            report.checked_elements += 1;
            if re > report.max_rel_err {
                report.max_rel_err = re;
                report.max_abs_err = (a - numeric).abs();
                report.worst_param = name.clone();
                report.worst_index = e;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn group(entries: &[(&str, Vec<usize>, Vec<f64>, bool)]) -> ParamGroup<f64> {
        let mut g = ParamGroup::new();
        for (name, shape, data, trainable) in entries {
            let mut t = Tensor::new(shape.clone(), data.clone()).unwrap();
            t.set_requires_grad(*trainable);
            g.insert(name, t).unwrap();
        }
        g
    }

    #[test]
    fn quadratic_form_gradient_is_tight() {
        // loss = sum((x @ w)^2), checked at h = 1e-5.
        let params = group(&[
            ("w", vec![3, 2], vec![0.4, -0.2, 0.1, 0.7, -0.5, 0.3], true),
            ("x", vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, -0.3, 1.5], true),
        ]);
        let report = finite_diff_check(&params, 1e-5, |tape, p| {
            let x = tape.leaf(p.get("x").unwrap());
            let w = tape.leaf(p.get("w").unwrap());
            let y = tape.matmul(x, w)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum(sq);
            Ok(BoundLoss { loss, bindings: vec![("x".into(), x), ("w".into(), w)] })
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert_eq!(report.checked_elements, 12);
    }

    #[test]
    fn frozen_params_report_zero_on_both_sides() {
        let params = group(&[
            ("frozen", vec![2], vec![1.0, -2.0], false),
            ("live", vec![2], vec![0.3, 0.9], true),
        ]);
        let report = finite_diff_check(&params, 1e-5, |tape, p| {
            let f = tape.leaf(p.get("frozen").unwrap());
            let l = tape.leaf(p.get("live").unwrap());
            let prod = tape.mul(f, l)?;
            let loss = tape.sum(prod);
            Ok(BoundLoss { loss, bindings: vec![("frozen".into(), f), ("live".into(), l)] })
        })
        .unwrap();
        // live gradient is the frozen values; frozen side contributes zeros
        // and is skipped, so the worst error comes from the live entries.
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
        assert_eq!(report.checked_elements, 4);
    }
}
