//! Central-difference verification of analytic gradients.

use crate::tensor::Tensor;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error() < self.tol
    }
}

/// Compare analytic gradients of a deterministic scalar loss against central
/// finite differences.
///
/// Error per entry is `|analytic - central| / max(|analytic|, |central|, 1)`:
/// relative for large gradients, absolute for small ones. The floor of 1 keeps
/// finite-difference roundoff noise on near-zero gradients (which scales like
/// `eps * |loss| / step`) from being amplified into spurious failures.
/// The loss closure must be deterministic (dropout disabled, fixed inputs).
pub fn grad_check<F>(
    loss_fn: F,
    params: &[(String, Tensor)],
    step: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn() -> Tensor,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = loss_fn();
    if !loss.is_finite() {
        return GradCheckReport {
            params: Vec::new(),
            tol,
            failure: Some(format!("non-finite loss {}", loss.item())),
        };
    }
    loss.backward();
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad()).collect();

    let mut reports = Vec::new();
    for (pi, (name, p)) in params.iter().enumerate() {
        let base = p.values();
        let mut max_rel = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            p.set_values(&plus);
            let lp = loss_fn().item();
            let mut minus = base.clone();
            minus[i] -= step;
            p.set_values(&minus);
            let lm = loss_fn().item();
            p.set_values(&base);
            if !lp.is_finite() || !lm.is_finite() {
                return GradCheckReport {
                    params: reports,
                    tol,
                    failure: Some(format!("non-finite loss while perturbing {name}[{i}]")),
                };
            }
            let central = (lp - lm) / (2.0 * step);
            let a = analytic[pi][i];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_error: max_rel,
        });
    }
    GradCheckReport {
        params: reports,
        tol,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let p = Tensor::param(2, 2, vec![0.5, -1.0, 2.0, 0.0]);
        let p2 = p.clone();
        let report = grad_check(
            move || p2.sum_all(),
            &[("p".into(), p)],
            1e-5,
            1e-10,
        );
        assert!(report.passed(), "rel err {}", report.max_rel_error());
    }

    #[test]
    fn constant_loss_passes_under_floor() {
        let p = Tensor::param(1, 2, vec![1.0, 2.0]);
        let report = grad_check(|| Tensor::scalar(3.0), &[("p".into(), p)], 1e-5, 1e-6);
        assert!(report.passed());
    }

    #[test]
    fn softmax_cross_entropy_matches_central_difference() {
        let logits = Tensor::param(1, 3, vec![0.2, -0.7, 1.1]);
        let label = Tensor::new(1, 3, vec![0.0, 1.0, 0.0]);
        let l2 = logits.clone();
        let report = grad_check(
            move || {
                l2.row_log_softmax().mul(&label).sum_all().neg()
            },
            &[("logits".into(), logits)],
            1e-5,
            1e-6,
        );
        assert!(report.passed(), "rel err {}", report.max_rel_error());
    }

    #[test]
    fn non_finite_loss_fails_with_diagnostic() {
        let p = Tensor::param(1, 1, vec![1.0]);
        let report = grad_check(
            || Tensor::scalar(f64::NAN),
            &[("p".into(), p)],
            1e-5,
            1e-6,
        );
        assert!(report.failure.is_some());
    }
}
