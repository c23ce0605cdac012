//! Dense affine layer with explicit gradient storage.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor2D;
use super::{ParamView, Parameterized};
use crate::error::{Result, VicError};

/// `y = W x + b` with `W` of shape `out x in`. Gradients mirror the
/// parameter shapes and accumulate across `backward` calls until zeroed.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
    pub grad_weight: Tensor2D,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    /// Zero-initialized layer.
    pub fn new(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            grad_weight: Tensor2D::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    /// Gaussian init scaled by `1/sqrt(in_dim)`; biases start at zero.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let sd = (1.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, sd).expect("valid normal");
        let weight = Tensor2D::from_fn(out_dim, in_dim, |_, _| dist.sample(rng));
        Self {
            weight,
            bias: vec![0.0; out_dim],
            grad_weight: Tensor2D::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `W x + b`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(VicError::Shape(format!(
                "linear forward: layer takes {}, input has {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut y = self.weight.matvec(x)?;
        for (o, b) in y.iter_mut().zip(self.bias.iter()) {
            *o += b;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for one sample and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() || grad_out.len() != self.out_dim() {
            return Err(VicError::Shape(format!(
                "linear backward: layer is {}x{}, got input {} grad {}",
                self.out_dim(),
                self.in_dim(),
                x.len(),
                grad_out.len()
            )));
        }
        self.grad_weight.add_outer(grad_out, x);
        for (gb, g) in self.grad_bias.iter_mut().zip(grad_out.iter()) {
            *gb += g;
        }
        self.weight.matvec_t(grad_out)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }
}

impl Parameterized for LinearLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamView<'_>)) {
        let (rows, cols) = (self.weight.rows(), self.weight.cols());
        f(
            "weight",
            ParamView {
                value: self.weight.data_mut(),
                grad: self.grad_weight.data_mut(),
                rows,
                cols,
            },
        );
        let n = self.bias.len();
        f(
            "bias",
            ParamView {
                value: &mut self.bias,
                grad: &mut self.grad_bias,
                rows: 1,
                cols: n,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::stream;

    #[test]
    fn identity_weight_zero_bias_passes_through() {
        let mut l = LinearLayer::new(2, 2);
        l.weight.set(0, 0, 1.0);
        l.weight.set(1, 1, 1.0);
        assert_eq!(l.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weight_returns_bias() {
        let mut l = LinearLayer::new(2, 3);
        l.bias = vec![3.0, 4.0];
        assert_eq!(l.forward(&[9.0, -1.0, 0.5]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn hand_matrix_multiply() {
        let mut l = LinearLayer::new(2, 2);
        l.weight = Tensor2D::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let l = LinearLayer::new(2, 3);
        assert!(l.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_accumulates_and_returns_input_grad() {
        let mut l = LinearLayer::init(2, 2, &mut stream(3, &[0]));
        let w = l.weight.clone();
        let gx = l.backward(&[1.0, 2.0], &[1.0, -1.0]).unwrap();
        assert_eq!(gx, w.matvec_t(&[1.0, -1.0]).unwrap());
        assert_eq!(l.grad_bias, vec![1.0, -1.0]);
        assert_eq!(l.grad_weight.row(0), &[1.0, 2.0]);
        assert_eq!(l.grad_weight.row(1), &[-1.0, -2.0]);
        l.zero_grad();
        assert_eq!(l.grad_bias, vec![0.0, 0.0]);
    }
}
