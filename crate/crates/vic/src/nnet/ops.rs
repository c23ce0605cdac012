//! Elementwise activations, dropout, gradient reversal, and the MSE loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VicError};

/// Elementwise tanh.
pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Backward through tanh given its *output* `y`: `dx = (1 - y^2) * dy`.
pub fn tanh_backward(y: &[f64], grad_y: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(grad_y.iter())
        .map(|(yi, g)| (1.0 - yi * yi) * g)
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Inverted dropout. In training mode each entry is zeroed with
/// probability `rate` and survivors are scaled by `1/(1-rate)`; in
/// inference mode this is an exact identity. Returns the output and the
/// per-entry scale mask needed for the backward pass.
pub fn dropout_forward(
    x: &[f64],
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(VicError::Usage(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.to_vec(), vec![1.0; x.len()]));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut out = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for &v in x {
        let keep = rng.gen::<f64>() >= rate;
        let m = if keep { keep_scale } else { 0.0 };
        mask.push(m);
        out.push(v * m);
    }
    Ok((out, mask))
}

/// Backward through dropout: gradient times the saved scale mask.
pub fn dropout_backward(mask: &[f64], grad_out: &[f64]) -> Vec<f64> {
    mask.iter()
        .zip(grad_out.iter())
        .map(|(m, g)| m * g)
        .collect()
}

/// Gradient reversal: exact identity forward, `-lambda` times the
/// incoming gradient backward.
#[derive(Debug, Clone, Copy)]
pub struct GrlNode {
    pub lambda: f64,
}

impl GrlNode {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(VicError::Usage(format!(
                "reversal strength must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        grad_out.iter().map(|g| -self.lambda * g).collect()
    }
}

/// Mean squared error and its gradient with respect to `a`:
/// `loss = mean((a-b)^2)`, `grad_a = 2(a-b)/len`.
pub fn mse_loss(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(VicError::Shape(format!(
            "mse: lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(VicError::Usage("mse of empty vectors".into()));
    }
    let n = a.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(a.len());
    for (ai, bi) in a.iter().zip(b.iter()) {
        let d = ai - bi;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{stream, streams};

    #[test]
    fn grl_flips_sign_by_lambda() {
        let g = GrlNode::new(1.0).unwrap();
        assert_eq!(g.backward(&[2.0, -3.0]), vec![-2.0, 3.0]);
        let g = GrlNode::new(0.0).unwrap();
        assert_eq!(g.backward(&[5.0]), vec![0.0]);
        let g = GrlNode::new(0.5).unwrap();
        assert_eq!(g.backward(&[4.0]), vec![-2.0]);
    }

    #[test]
    fn grl_forward_is_identity_bitwise() {
        let g = GrlNode::new(2.5).unwrap();
        let x = vec![0.1, -0.2, 7.125];
        let y = g.forward(&x);
        assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn grl_rejects_negative_lambda() {
        assert!(GrlNode::new(-0.1).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = vec![1.0, -2.0, 3.0];
        let mut rng = stream(0, &[streams::DROPOUT]);
        let (y, _) = dropout_forward(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let x = vec![1.0, -2.0, 3.0];
        let mut rng = stream(0, &[streams::DROPOUT]);
        let (y, _) = dropout_forward(&x, 0.9, false, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = stream(0, &[streams::DROPOUT]);
        assert!(dropout_forward(&[1.0], 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_monte_carlo_mean_is_unbiased() {
        // 1e5 trials on x=[1] at rate 0.5: sample mean of outputs in [0.98, 1.02].
        let mut rng = stream(9, &[streams::DROPOUT]);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (y, _) = dropout_forward(&[1.0], 0.5, true, &mut rng).unwrap();
            sum += y[0];
        }
        let mean = sum / n as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn mse_examples() {
        let (l, _) = mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = mse_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 1.0);
        let (l, g) = mse_loss(&[3.0], &[1.0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g, vec![4.0]);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let s = softmax(&[1.0, 2.0, 3.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
