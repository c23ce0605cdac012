//! Minimal dense neural kernel: tensors, linear layers, activations,
//! dropout, gradient reversal, losses, AdamW, seeded rng streams, a
//! finite-difference gradient checker, and the checkpoint format.
//!
//! There is no general autodiff tape. Each model codes its layer graph
//! explicitly and backpropagates by hand; the gradient checker verifies
//! every such graph against central finite differences.

mod adamw;
mod checkpoint;
mod gradcheck;
mod linear;
mod ops;
mod rng;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{load_archive, load_model, save_archive, save_model, ArchiveEntry};
pub use gradcheck::grad_check;
pub use linear::LinearLayer;
pub use ops::{dropout_backward, dropout_forward, mse_loss, softmax, tanh_backward, tanh_vec, GrlNode};
pub use rng::{gauss_vec, mix, stream, streams};
pub use tensor::Tensor2D;

use crate::error::{Result, VicError};

/// Mutable view of one named parameter tensor and its gradient.
pub struct ParamView<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
}

/// Anything holding named parameter tensors with paired gradient storage.
///
/// Visit order must be deterministic; names must be unique within a model.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamView<'_>));
}

/// Re-visits a child module with `prefix.` prepended to parameter names.
pub fn visit_prefixed(
    prefix: &str,
    child: &mut dyn Parameterized,
    f: &mut dyn FnMut(&str, ParamView<'_>),
) {
    child.visit_params(&mut |name, view| f(&format!("{prefix}.{name}"), view));
}

/// Zeroes every gradient in the model.
pub fn zero_grads(model: &mut dyn Parameterized) {
    model.visit_params(&mut |_, view| view.grad.fill(0.0));
}

/// Total number of scalar parameters.
pub fn param_count(model: &mut dyn Parameterized) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, view| n += view.value.len());
    n
}

/// Copies all parameter values out as named tensors, in visit order.
pub fn collect_entries(model: &mut dyn Parameterized) -> Vec<(String, Tensor2D)> {
    let mut out = Vec::new();
    model.visit_params(&mut |name, view| {
        out.push((
            name.to_string(),
            Tensor2D::from_vec(view.rows, view.cols, view.value.to_vec())
                .expect("parameter tensors are well-formed"),
        ));
    });
    out
}

/// Loads named tensors back into the model. Every model parameter must be
/// present with a matching shape; extra entries are rejected.
pub fn load_entries(model: &mut dyn Parameterized, entries: &[(String, Tensor2D)]) -> Result<()> {
    use std::collections::BTreeMap;
    let by_name: BTreeMap<&str, &Tensor2D> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if by_name.len() != entries.len() {
        return Err(VicError::Data("duplicate entry names in archive".into()));
    }
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut shape_err = None;
    model.visit_params(&mut |name, view| {
        match by_name.get(name) {
            Some(t) => {
                if t.rows() != view.rows || t.cols() != view.cols {
                    shape_err.get_or_insert_with(|| {
                        format!(
                            "entry {name}: expected {}x{}, got {}x{}",
                            view.rows,
                            view.cols,
                            t.rows(),
                            t.cols()
                        )
                    });
                } else {
                    view.value.copy_from_slice(t.data());
                    used += 1;
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(VicError::Shape(msg));
    }
    if !missing.is_empty() {
        return Err(VicError::Data(format!(
            "archive is missing parameters: {}",
            missing.join(", ")
        )));
    }
    if used != entries.len() {
        return Err(VicError::Data(
            "archive contains entries unknown to the model".into(),
        ));
    }
    Ok(())
}

/// SHA-256 over all parameter bytes in visit order; used to assert that
/// frozen modules stay bitwise unchanged.
pub fn checksum(model: &mut dyn Parameterized) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    model.visit_params(&mut |name, view| {
        hasher.update(name.as_bytes());
        for v in view.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    });
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
    }
    s
}
