//! Central finite-difference verification of hand-coded backprop.

use super::Parameterized;
use crate::error::{Result, VicError};

/// Compares the model's analytic gradients against central finite
/// differences for every parameter coordinate and returns the worst
/// relative error.
///
/// `loss(model, true)` must compute the loss and fill the model's
/// gradients; `loss(model, false)` must compute the loss only. The closure
/// must be deterministic across calls (reseed any internal randomness per
/// call).
pub fn grad_check<M: Parameterized + ?Sized>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, bool) -> Result<f64>,
    epsilon: f64,
) -> Result<f64> {
    let base = loss(model, true)?;
    if !base.is_finite() {
        return Err(VicError::Numeric(format!("loss is not finite: {base}")));
    }

    // Snapshot analytic gradients and the coordinate layout.
    let mut layout: Vec<(String, usize)> = Vec::new();
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    model.visit_params(&mut |name, view| {
        layout.push((name.to_string(), view.value.len()));
        analytic.push(view.grad.to_vec());
    });

    let mut max_rel = 0.0_f64;
    for (p, (name, len)) in layout.iter().enumerate() {
        for i in 0..*len {
            perturb(model, name, i, epsilon);
            let plus = loss(model, false)?;
            perturb(model, name, i, -2.0 * epsilon);
            let minus = loss(model, false)?;
            perturb(model, name, i, epsilon);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(VicError::Numeric(format!(
                    "perturbed loss not finite at {name}[{i}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * epsilon);
            let a = analytic[p][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn perturb<M: Parameterized + ?Sized>(model: &mut M, target: &str, idx: usize, delta: f64) {
    model.visit_params(&mut |name, view| {
        if name == target {
            view.value[idx] += delta;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{mse_loss, stream, tanh_backward, tanh_vec, zero_grads, GrlNode, LinearLayer};

    // Finite-difference oracle case from the kernel contract: a linear
    // layer feeding MSE must match to better than 1e-3 at eps = 1e-4.
    #[test]
    fn linear_mse_matches_finite_differences() {
        let mut layer = LinearLayer::init(3, 4, &mut stream(11, &[0]));
        let x = vec![0.3, -0.7, 0.1, 0.9];
        let target = vec![0.2, -0.1, 0.4];
        let max_rel = grad_check(
            &mut layer,
            |l, with_grads| {
                if with_grads {
                    zero_grads(l);
                }
                let y = l.forward(&x)?;
                let (loss, grad) = mse_loss(&y, &target)?;
                if with_grads {
                    l.backward(&x, &grad)?;
                }
                Ok(loss)
            },
            1e-4,
        )
        .unwrap();
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn tanh_layer_matches_finite_differences() {
        let mut layer = LinearLayer::init(2, 3, &mut stream(12, &[0]));
        let x = vec![0.5, -0.2, 0.8];
        let target = vec![0.1, -0.6];
        let max_rel = grad_check(
            &mut layer,
            |l, with_grads| {
                if with_grads {
                    zero_grads(l);
                }
                let pre = l.forward(&x)?;
                let y = tanh_vec(&pre);
                let (loss, grad_y) = mse_loss(&y, &target)?;
                if with_grads {
                    let grad_pre = tanh_backward(&y, &grad_y);
                    l.backward(&x, &grad_pre)?;
                }
                Ok(loss)
            },
            1e-4,
        )
        .unwrap();
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    // Definition of reversal: with a GRL (lambda=1) between layer output
    // and loss, the layer's analytic gradients are the exact negation of
    // the no-GRL gradients.
    #[test]
    fn grl_negates_upstream_gradients() {
        let x = vec![0.4, -0.3];
        let target = vec![0.25, 0.5];
        let grl = GrlNode::new(1.0).unwrap();

        let mut plain = LinearLayer::init(2, 2, &mut stream(13, &[0]));
        let mut reversed = plain.clone();

        let y = plain.forward(&x).unwrap();
        let (_, grad) = mse_loss(&y, &target).unwrap();
        plain.backward(&x, &grad).unwrap();

        let y2 = reversed.forward(&x).unwrap();
        let y2 = grl.forward(&y2);
        let (_, grad2) = mse_loss(&y2, &target).unwrap();
        let grad2 = grl.backward(&grad2);
        reversed.backward(&x, &grad2).unwrap();

        for (a, b) in plain
            .grad_weight
            .data()
            .iter()
            .chain(plain.grad_bias.iter())
            .zip(reversed.grad_weight.data().iter().chain(reversed.grad_bias.iter()))
        {
            assert!((a + b).abs() < 1e-15, "not a negation: {a} vs {b}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut layer = LinearLayer::init(2, 2, &mut stream(14, &[0]));
        let eps = 1e-4;
        let max_rel = grad_check(
            &mut layer,
            |l, with_grads| {
                if with_grads {
                    zero_grads(l);
                }
                Ok(3.5)
            },
            eps,
        )
        .unwrap();
        assert!(max_rel <= eps, "flat function produced gradient {max_rel}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut layer = LinearLayer::new(1, 1);
        let r = grad_check(&mut layer, |_, _| Ok(f64::NAN), 1e-4);
        assert!(matches!(r, Err(crate::error::VicError::Numeric(_))));
    }
}
