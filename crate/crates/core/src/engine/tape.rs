use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the output gradient to one gradient per input. `needs[i]` is false
/// when input `i` collects no gradient, in which case `None` may be returned
/// for it.
pub type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Entry {
    name: &'static str,
    inputs: Vec<Tensor>,
    output: Tensor,
    backward: BackwardFn,
}

/// Reverse-mode recording of one forward pass.
///
/// Operations are appended in execution order, which is a topological order
/// of the graph; [`Tape::backward`] replays them in exact reverse.
pub struct Tape {
    entries: RefCell<Vec<Entry>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that records nothing; every output is a constant.
    pub fn no_grad() -> Self {
        Tape { entries: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.borrow().is_empty()
    }

    /// Drops all recorded operations. Gradients already accumulated into
    /// tensors are left alone.
    pub fn clear(&self) {
        self.entries.borrow_mut().clear();
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.entries.borrow().iter().map(|e| e.name).collect()
    }

    /// Records an operation whose forward value has already been computed.
    pub fn record(
        &self,
        name: &'static str,
        inputs: &[&Tensor],
        data: Vec<f64>,
        shape: Vec<usize>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Tensor> {
        let tracked = self.recording && inputs.iter().any(|t| t.requires_grad());
        let output = Tensor::derived(data, shape, tracked)?;
        if tracked {
            self.entries.borrow_mut().push(Entry {
                name,
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
                output: output.clone(),
                backward: Box::new(backward),
            });
        }
        Ok(output)
    }

    /// Accumulates d`loss`/dt into every gradient-requiring tensor `t` that
    /// the scalar `loss` depends on through this tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        if !loss.requires_grad() {
            return Ok(());
        }
        let entries = self.entries.borrow();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        let mut leaves: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(loss.id(), vec![1.0]);
        leaves.insert(loss.id(), loss.clone());

        for entry in entries.iter().rev() {
            let Some(grad) = pending.remove(&entry.output.id()) else {
                continue;
            };
            leaves.remove(&entry.output.id());
            entry.output.accumulate_grad(&grad);
            let needs: Vec<bool> = entry.inputs.iter().map(|t| t.requires_grad()).collect();
            let input_grads = (entry.backward)(&grad, &needs);
            debug_assert_eq!(input_grads.len(), entry.inputs.len(), "{}", entry.name);
            for ((input, g), need) in entry.inputs.iter().zip(input_grads).zip(&needs) {
                let (true, Some(g)) = (*need, g) else {
                    continue;
                };
                debug_assert_eq!(g.len(), input.len(), "{}", entry.name);
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.id(), g);
                        leaves.insert(input.id(), input.clone());
                    }
                }
            }
        }
        // Whatever is still pending belongs to tensors no entry produced.
        for (id, grad) in pending {
            if let Some(t) = leaves.get(&id) {
                t.accumulate_grad(&grad);
            }
        }
        Ok(())
    }

    /// True if `output` was computed (through recorded operations) from `input`.
    pub fn depends_on(&self, output: &Tensor, input: &Tensor) -> bool {
        let entries = self.entries.borrow();
        let producer: HashMap<u64, usize> = entries.iter().enumerate().map(|(i, e)| (e.output.id(), i)).collect();
        let mut stack = vec![output.id()];
        let mut seen = HashSet::new();
        while let Some(id) = stack.pop() {
            if id == input.id() {
                return true;
            }
            if !seen.insert(id) {
                continue;
            }
            if let Some(&i) = producer.get(&id) {
                stack.extend(entries[i].inputs.iter().map(|t| t.id()));
            }
        }
        false
    }

    /// True if some recorded operation consumes `t`.
    pub fn consumes(&self, t: &Tensor) -> bool {
        self.entries.borrow().iter().any(|e| e.inputs.iter().any(|i| i.id() == t.id()))
    }
}
