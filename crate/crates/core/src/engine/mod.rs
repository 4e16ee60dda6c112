//! Dense tensors with a reverse-mode tape.
//!
//! A [`Tape`] records each operation as it runs; [`Tape::backward`] walks the
//! records in reverse and *adds* gradients into every tensor created with
//! [`Tensor::param`]. Nothing is zeroed implicitly, so several losses can be
//! back-propagated in turn before a single optimizer update.
//!
//! Only scalar-vs-tensor broadcasting exists. Row-wise bias addition is done
//! with a `ones · bias` matmul by the callers.

mod ops;
mod tape;
mod tensor;

pub use ops::ConvGeometry;
pub use tape::{BackwardFn, Tape};
pub use tensor::Tensor;

/// Clears the gradients of every tensor in `params`.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a Tensor>) {
    for p in params {
        p.zero_grad();
    }
}

/// Central finite-difference gradient of a scalar function of `values`.
///
/// Test helper; kept public so integration tests can reuse it.
pub fn finite_difference(values: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = values.to_vec();
    (0..values.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradient vectors, with an absolute
/// floor so that near-zero components do not blow up the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3)).fold(0.0, f64::max)
}
