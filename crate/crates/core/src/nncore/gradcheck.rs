use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the gradients stored in `params` against central finite
/// differences of `loss`, coordinate by coordinate.
///
/// The relative error of a coordinate is
/// `|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)`.
pub fn grad_check<F>(params: &ParamStore, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss = {base}")));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.value(&name).len();
        for i in 0..n {
            let original = params.value(&name).as_slice()[i];
            probe.value_mut(&name).as_mut_slice()[i] = original + eps;
            let plus = loss(&probe);
            probe.value_mut(&name).as_mut_slice()[i] = original - eps;
            let minus = loss(&probe);
            probe.value_mut(&name).as_mut_slice()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing {name}[{i}]")));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let an = params.param(&name).grad.as_slice()[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Matrix;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut s = ParamStore::new();
        let w = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.0, -3.0]).unwrap();
        s.insert("w", "g", w.clone()).unwrap();
        s.grad_mut("w").add_assign(&w);
        let report = grad_check(&s, 1e-5, |p| 0.5 * p.value("w").frobenius_sq()).unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn nan_loss_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("w", "g", Matrix::zeros(1, 1)).unwrap();
        assert!(matches!(
            grad_check(&s, 1e-5, |_| f64::NAN),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = ParamStore::new();
        s.insert("w", "g", Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        s.grad_mut("w").set(0, 0, 3.0);
        let report = grad_check(&s, 1e-5, |p| p.value("w").get(0, 0).powi(2)).unwrap();
        assert!(report.max_rel_err > 0.1);
    }
}
