use crate::error::{FlowError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub per_parameter: Vec<f64>,
}

/// Compares an analytic gradient with central differences
/// `(loss(p + h e_i) - loss(p - h e_i)) / 2h` coordinate by coordinate.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(FlowError::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(FlowError::invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut per_parameter = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss_fn(&probe);
        probe[i] = orig - step;
        let down = loss_fn(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(FlowError::numerical(format!("non-finite loss probing coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        per_parameter.push((a - numeric).abs() / denom);
    }
    let (worst_parameter_index, max_relative_error) =
        per_parameter.iter().copied().enumerate().fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport { max_relative_error, worst_parameter_index, per_parameter })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(p: &[f64]) -> f64 {
        p.iter().map(|v| v * v).sum()
    }

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.2, 2.5, 0.0];
        let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let r = finite_diff_check(sq, &p, &g, 1e-4).unwrap();
        assert!(r.max_relative_error <= 1e-9, "{r:?}");
        assert_eq!(r.per_parameter.len(), 4);
    }

    #[test]
    fn doubled_gradient_reports_one_half() {
        let p = [0.3, -1.2, 2.5];
        let g: Vec<f64> = p.iter().map(|v| 4.0 * v).collect();
        let r = finite_diff_check(sq, &p, &g, 1e-4).unwrap();
        assert!((r.max_relative_error - 0.5).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let p = [1.0, 0.0];
        let err = finite_diff_check(|q| if q[1] != 0.0 { f64::NAN } else { 0.0 }, &p, &[0.0, 0.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn bad_step_rejected() {
        assert!(finite_diff_check(sq, &[1.0], &[2.0], 0.0).is_err());
        assert!(finite_diff_check(sq, &[1.0], &[2.0], f64::NAN).is_err());
    }
}
