//! Elementwise nonlinearities and softmax.

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Given softmax output `p` and upstream gradient `dp`, returns the gradient
/// with respect to the logits.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(a, b)| a * (b - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // e^k / (e + e^2 + e^3), from a 40-digit mpmath evaluation.
        let expected = [
            0.090_030_573_170_380_457_998_022_101_484_5,
            0.244_728_471_054_797_652_472_959_618_340_8,
            0.665_240_955_774_821_889_529_018_280_174_7,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let p = softmax(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|x| *x >= 0.0));
        }
    }
}
