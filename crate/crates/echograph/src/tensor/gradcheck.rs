//! Central-difference verification of analytic gradients.

use std::rc::Rc;

use crate::error::Result;
use crate::tensor::{Param, Tensor, Var};

/// Outcome of [`finite_difference_check`]: the worst relative error seen for
/// each parameter, plus the overall maximum.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares the analytic gradient of a scalar-valued function against central
/// differences `(f(p+eps) - f(p-eps)) / (2 eps)`, element by element, for each
/// listed parameter. `f` must be deterministic; it is re-invoked after every
/// probe, reading the current parameter values.
///
/// The relative error uses `|a - n| / max(|a|, |n|, 1e-4)`. The floor keeps
/// the report meaningful where both gradients are near zero: central
/// differences of a deep model carry an irreducible cancellation error of
/// roughly `κ·ulp(f)/eps` (κ = accumulated-operation factor), so gradients
/// far below the floor cannot be resolved numerically at all — for them the
/// report shows the (tiny) absolute discrepancy scaled by the floor instead
/// of a meaningless 0/0 ratio. Report-only: a failed tolerance does not
/// error.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Rc<Param>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Var>,
{
    assert!(eps > 0.0, "finite_difference_check: eps must be positive");
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Tensor> = params.iter().map(|p| p.grad().clone()).collect();

    let eval = |params_f: &F| -> Result<f64> { params_f()?.value().item() };

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for (p, a_grad) in params.iter().zip(analytic.iter()) {
        let n = p.numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = p.value().data()[i];
            p.update_value(|t| t.data_mut()[i] = orig + eps);
            let f_plus = eval(&f)?;
            p.update_value(|t| t.data_mut()[i] = orig - eps);
            let f_minus = eval(&f)?;
            p.update_value(|t| t.data_mut()[i] = orig);
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = a_grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_param.push((p.name().to_string(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error: max_rel,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_sigmoid_passes_tightly() {
        let p = Param::new(
            "x",
            Tensor::new(vec![5], vec![-2.0, -0.5, 0.1, 1.0, 3.0]).unwrap(),
            true,
        );
        let report = finite_difference_check(
            || Var::param(&p).sigmoid()?.sum_all(),
            &[Rc::clone(&p)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn constant_in_a_parameter_reports_zero_error() {
        let used = Param::new("used", Tensor::new(vec![2], vec![0.4, -0.2]).unwrap(), true);
        let unused = Param::new("unused", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true);
        let report = finite_difference_check(
            || Var::param(&used).mul_scalar(3.0)?.sum_all(),
            &[Rc::clone(&used), Rc::clone(&unused)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        let (_, unused_err) = &report.per_param[1];
        assert!(*unused_err < 1e-6);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // abs has subgradient 0 at 0; probing exactly at a kink from one side
        // only would hide it, so check a deliberately mismatched op instead:
        // numeric gradient of x^3 vs analytic of a function reporting x^2
        // cannot be emulated without a broken op, so instead verify the
        // checker flags a function evaluated with perturbed randomness --
        // here: f depends on the param through a non-smooth floor, where
        // central differences and the (zero) analytic gradient disagree.
        let p = Param::new("x", Tensor::new(vec![1], vec![0.5]).unwrap(), true);
        let report = finite_difference_check(
            || {
                // piecewise-constant in value but zero-gradient analytically:
                // use value floor through a constant lift the graph can't see.
                let rounded = (p.value().data()[0] * 1e4).round() / 1e4;
                Var::param(&p)
                    .mul_scalar(0.0)?
                    .add_scalar(rounded * rounded)?
                    .sum_all()
            },
            &[Rc::clone(&p)],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed(), "checker must flag hidden dependencies");
    }
}
