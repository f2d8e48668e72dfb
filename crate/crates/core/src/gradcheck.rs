//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub mod suite;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked_params: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }

    /// Folds another report for the same op into this one (max over errors, sum of counts).
    pub fn merge(&mut self, other: &GradReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked_params += other.checked_params;
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} {:<28} max_rel={:.3e} max_abs={:.3e} checked={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op_name,
            self.max_rel_error,
            self.max_abs_error,
            self.checked_params
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Compares the tape gradient of scalar `f` against `(f(x+h) - f(x-h)) / 2h` for
/// every scalar in `params`.
pub fn check_gradient<F>(op_name: &str, f: F, params: &[Tensor], step: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::param("step", "must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::dim("check_gradient", g.shape(out), &[1]));
    }
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite {
            context: format!("{op_name}: f at unperturbed params"),
        });
    }
    let grads = g.backward(out);

    let mut report = GradReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked_params: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var, params[p].shape());
        for j in 0..params[p].len() {
            let x0 = params[p].data()[j];
            work[p].data_mut()[j] = x0 + step;
            let plus = evaluate(&f, &work)?;
            work[p].data_mut()[j] = x0 - step;
            let minus = evaluate(&f, &work)?;
            work[p].data_mut()[j] = x0;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{op_name}: f with parameter {p} element {j} perturbed"),
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked_params += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{RngStream, LAYER_NORM_EPS};

    #[test]
    fn square_at_three() {
        let r = check_gradient(
            "square",
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[Tensor::scalar(3.0)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_abs_error < 1e-8, "{r}");
        assert_eq!(r.checked_params, 1);
    }

    #[test]
    fn layer_norm_sum_passes() {
        let mut s = RngStream::new(3, 0).generator();
        let x = s.gaussian(&[2, 4], 1.0);
        let gain = s.gaussian(&[4], 1.0);
        let bias = s.gaussian(&[4], 1.0);
        let w = s.gaussian(&[2, 4], 1.0);
        // A plain sum of a layer-normalized row is bias-only; weight the output so the
        // normalized path carries gradient.
        let r = check_gradient(
            "layer_norm",
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
                let wy = g.mul(y, v[3])?;
                Ok(g.sum(wy))
            },
            &[x, gain, bias, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn non_finite_names_parameter() {
        // Finite at the two parameters' nominal values; NaN once the second dips below 1.
        let err = check_gradient(
            "cliff",
            |g, v| {
                let below = g.value(v[1]).data()[0] < 1.0;
                let c = g.leaf(Tensor::scalar(if below { f64::NAN } else { 1.0 }));
                let z = g.mul(v[1], c)?;
                let y = g.add(v[0], z)?;
                Ok(g.sum(y))
            },
            &[Tensor::scalar(0.5), Tensor::scalar(1.0)],
            DEFAULT_STEP,
        )
        .unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(context.contains("parameter 1"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = check_gradient("x", |g, v| Ok(g.sum(v[0])), &[Tensor::scalar(1.0)], 0.0);
        assert!(matches!(r, Err(Error::Parameter { .. })));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (2.0 + 1e-6)).abs() < 1e-15);
    }
}
