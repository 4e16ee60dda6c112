use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Dense row-major `f64` array.
///
/// Values are immutable once created; only the gradient slot changes.
/// Cloning is cheap and yields a handle to the same node, so gradients
/// accumulated through one clone are visible through all of them.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::Shape { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Tensor(Arc::new(Inner { id: NEXT_ID.fetch_add(1, Ordering::Relaxed), shape, data, requires_grad, grad: Mutex::new(None) })))
    }

    /// A constant (no gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape.to_vec(), false)
    }

    /// A leaf that collects gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::build(data, shape.to_vec(), true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![1], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    pub(crate) fn derived(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        Self::build(data, shape, requires_grad)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(existing) => {
                for (g, d) in existing.iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Value-equal copy cut from any tape.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false).expect("valid shape")
    }

    /// Independent node with the same values and gradient flag, and no
    /// gradient. Used to deep-copy models.
    pub fn duplicate(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), self.0.requires_grad).expect("valid shape")
    }

    /// Same values under a new shape with the same element count. No tape
    /// link: use [`Tape::reshape`](super::Tape::reshape) inside a graph.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Self::build(self.0.data.clone(), shape.to_vec(), self.0.requires_grad)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::build(self.0.data.iter().map(|&v| f(v)).collect(), self.0.shape.clone(), false).expect("valid shape")
    }

    /// Rows `indices` of a rank-2 tensor as a new constant.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::contract("select_rows needs a rank-2 tensor"));
        }
        let cols = self.0.shape[1];
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= self.0.shape[0] {
                return Err(Error::contract(format!("row {r} out of range")));
            }
            out.extend_from_slice(&self.0.data[r * cols..(r + 1) * cols]);
        }
        Tensor::new(out, &[indices.len(), cols])
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}
