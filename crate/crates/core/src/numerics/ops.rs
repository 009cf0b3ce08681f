//! Vector-level primitives shared by the tape and by inference code.

use crate::error::{Error, Result};

/// Variance floor used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Numerically stable softmax (max-subtraction).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let (max, rest) = max_and_rest(x);
    max + rest.ln_1p()
}

/// The maximum and `Σ exp(x_i - max)` over all entries except the first maximum.
fn max_and_rest(x: &[f64]) -> (f64, f64) {
    let top = argmax(x);
    let max = x[top];
    let rest = x
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, v)| (v - max).exp())
        .sum::<f64>();
    (max, rest)
}

/// Layer normalization with a variance floor: `(x - mean) / sqrt(max(var, eps))`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::LengthMismatch {
            op: "layer_norm",
            left: x.len(),
            right: if x.len() != gain.len() {
                gain.len()
            } else {
                bias.len()
            },
        });
    }
    if x.len() < 2 {
        return Err(Error::OutOfRange {
            what: "layer_norm length",
            index: x.len(),
            limit: 2,
        });
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, gain, bias, &mut out);
    Ok(out)
}

/// Writes the normalized row into `out` and returns `1 / sqrt(max(var, eps))`
/// together with whether the floor was active.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
) -> (f64, bool) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let floored = var < LAYER_NORM_EPS;
    let inv = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (v - mean) * inv * g + b;
    }
    (inv, floored)
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            what: "cross_entropy target",
            index: target,
            limit: logits.len(),
        });
    }
    let (max, rest) = max_and_rest(logits);
    Ok((max - logits[target]) + rest.ln_1p())
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] < 1e-300 || p[1] == 0.0);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = [1.0_f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let p = softmax(&x).unwrap();
        for (pi, xi) in p.iter().zip(x) {
            assert!((pi - xi.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn layer_norm_constant_input_hits_floor() {
        let y = layer_norm(&[5.0; 4], &[1.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn layer_norm_already_normalized() {
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let x = [0.3, -1.7, 2.2, 0.05, 4.0, -0.9];
        let y = layer_norm(&x, &[1.0; 6], &[0.0; 6]).unwrap();
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_length_errors() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0]).is_err());
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let v = 13;
        let loss = cross_entropy(&vec![0.7; v], 4).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct() {
        // ln(1 + e^-20)
        let want = (-20.0_f64).exp().ln_1p();
        let got = cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((got - want).abs() < 1e-20);
        assert!((got - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_wrong_target_is_large() {
        assert!(cross_entropy(&[20.0, 0.0, 0.0], 1).unwrap() > 19.0);
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.2, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one(x in proptest::collection::vec(-500.0f64..500.0, 1..40)) {
            let p = softmax(&x).unwrap();
            let s: f64 = p.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
    }
}
