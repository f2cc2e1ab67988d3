//! The recorded-operation tape and reverse pass.

use std::sync::Arc;

use super::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRegistry};
use crate::scalar::Scalar;

pub(crate) type BackFn<T> = Box<dyn Fn(&[T], &mut Sink<'_, T>) + Send>;

struct Node<T> {
    numel: usize,
    back: Option<BackFn<T>>,
}

/// Gradient accumulator handed to backward closures.
pub struct Sink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    numels: &'a [usize],
}

impl<'a, T: Scalar> Sink<'a, T> {
    /// Accumulate into a parent's gradient buffer. `None` parents (untracked
    /// inputs) are skipped.
    pub fn with(&mut self, node: Option<NodeId>, f: impl FnOnce(&mut [T])) {
        if let Some(id) = node {
            let buf = self.grads[id].get_or_insert_with(|| vec![T::zero(); self.numels[id]]);
            f(buf);
        }
    }

    pub fn add(&mut self, node: Option<NodeId>, contrib: &[T]) {
        self.with(node, |buf| {
            debug_assert_eq!(buf.len(), contrib.len());
            for (g, c) in buf.iter_mut().zip(contrib) {
                *g += *c;
            }
        });
    }
}

/// Ordered record of executed differentiable operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it;
/// the reverse pass walks ids downward. A disabled tape records nothing and
/// ops run as plain forward evaluation (inference mode).
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leases: Vec<(ParamId, NodeId)>,
    enabled: bool,
}

impl<T: Scalar> Tape<T> {
    /// Recording tape for a training/update step.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leases: Vec::new(),
            enabled: true,
        }
    }

    /// Non-recording tape: forward evaluation only.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            leases: Vec::new(),
            enabled: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, numel: usize, back: Option<BackFn<T>>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { numel, back });
        id
    }

    /// Mark an input tensor for gradient collection (a leaf node).
    pub fn watch(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.enabled {
            return t.detached();
        }
        let id = self.push(t.numel(), None);
        Tensor::tracked(t.shape().to_vec(), t.data_arc(), Some(id))
    }

    /// Bring a registry parameter onto the tape. Gradients flowing into the
    /// leaf are credited to the parameter by [`Tape::accumulate_leases`].
    /// Non-trainable buffers are served untracked.
    pub fn lease(&mut self, reg: &ParamRegistry<T>, pid: ParamId) -> Tensor<T> {
        let slot = reg.slot(pid);
        let data = Arc::new(slot.value.clone());
        if !self.enabled || !slot.trainable {
            return Tensor::tracked(slot.shape.clone(), data, None);
        }
        let id = self.push(slot.value.len(), None);
        self.leases.push((pid, id));
        Tensor::tracked(slot.shape.clone(), data, Some(id))
    }

    /// Record one operation: forward value plus a closure that routes the
    /// node's gradient to its inputs. Returns an untracked tensor when the
    /// tape is disabled or no input is tracked.
    pub(crate) fn record(
        &mut self,
        inputs: &[&Tensor<T>],
        out_shape: Vec<usize>,
        out_data: Vec<T>,
        make_back: impl FnOnce() -> BackFn<T>,
    ) -> Tensor<T> {
        let numel = out_data.len();
        debug_assert_eq!(numel, out_shape.iter().product::<usize>());
        let data = Arc::new(out_data);
        if !self.enabled || inputs.iter().all(|t| t.node().is_none()) {
            return Tensor::tracked(out_shape, data, None);
        }
        let id = self.push(numel, Some(make_back()));
        Tensor::tracked(out_shape, data, Some(id))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; combine
    /// with [`Tape::accumulate_leases`] to credit parameters.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if !loss.is_scalar() {
            return Err(Error::InvalidShape {
                shape: loss.shape().to_vec(),
                reason: "backward requires a scalar loss".into(),
            });
        }
        let root = loss.node().ok_or_else(|| {
            Error::InvalidArgument("loss is not tracked on this tape".into())
        })?;

        let numels: Vec<usize> = self.nodes.iter().map(|n| n.numel).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[id].back {
                let g = grads[id].take().unwrap();
                {
                    let mut sink = Sink {
                        grads: &mut grads,
                        numels: &numels,
                    };
                    back(&g, &mut sink);
                }
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Add lease gradients into the registry. Returns the touched parameter
    /// ids (deduplicated, in first-touch order).
    pub fn accumulate_leases(
        &self,
        grads: &Gradients<T>,
        reg: &mut ParamRegistry<T>,
    ) -> Vec<ParamId> {
        let mut touched = Vec::new();
        for &(pid, node) in &self.leases {
            if let Some(g) = grads.grads[node].as_deref() {
                reg.accumulate_grad(pid, g);
                if !touched.contains(&pid) {
                    touched.push(pid);
                }
            }
        }
        touched
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of a reverse pass: gradient per tape node where one exists.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a tracked tensor, if any path
    /// reached it. Untracked or unreached tensors yield `None` (treat as
    /// zero).
    pub fn of(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node().and_then(|id| self.grads.get(id)?.as_deref())
    }
}
