//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor of one computation. Parameters are
//! registered first and survive [`Tape::reset`]; everything recorded
//! afterwards (inputs, intermediates) is per-step scratch that reset
//! discards. This lets a training loop keep one tape alive across steps,
//! mutating parameter values in place while rebuilding the graph each
//! batch.

use super::ops::{self, OpKind};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T: Scalar> {
    op: Option<OpKind>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Wengert list: nodes are appended in evaluation order, so one reverse
/// sweep visits every consumer before its producers.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_names: Vec<String>,
    ran_backward: bool,
    min_kink: f64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_names: Vec::new(), ran_backward: false, min_kink: f64::INFINITY }
    }

    /// Registers a trainable parameter. All parameters must be registered
    /// before the first [`Tape::leaf`] or [`Tape::apply`] call so that
    /// [`Tape::reset`] can drop everything else.
    ///
    /// # Panics
    /// If called after a non-parameter node exists.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        assert_eq!(
            self.nodes.len(),
            self.param_names.len(),
            "parameters must be registered before any leaf or apply"
        );
        self.param_names.push(name.into());
        self.push(Node { op: None, inputs: Vec::new(), value, requires_grad: true, grad: None })
    }

    /// Records a constant input. It takes no gradient and is discarded by
    /// [`Tape::reset`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { op: None, inputs: Vec::new(), value, requires_grad: false, grad: None })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Applies `op` to `inputs`, validating shapes and recording the result.
    /// Fails if the op rejects the shapes or produces a non-finite value.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let fwd = ops::forward(&op, &tensors)?;
        if !fwd.value.all_finite() {
            return Err(Error::numeric(op.name(), "forward produced a non-finite value"));
        }
        if fwd.kink_distance < self.min_kink {
            self.min_kink = fwd.kink_distance;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value: fwd.value,
            requires_grad,
            grad: None,
        }))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if one was
    /// computed (parameters always have one after backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// In-place access to a parameter's values, for optimizer updates and
    /// checkpoint restore.
    ///
    /// # Panics
    /// If `v` is not a parameter.
    pub fn param_data_mut(&mut self, v: Var) -> &mut [T] {
        assert!(v.0 < self.param_names.len(), "not a parameter");
        self.nodes[v.0].value.data_mut()
    }

    pub fn param_name(&self, v: Var) -> &str {
        &self.param_names[v.0]
    }

    /// Gradient and mutable value of one node as a pair, for in-place
    /// optimizer updates.
    pub fn grad_and_value_mut(&mut self, v: Var) -> (Option<&[T]>, &mut [T]) {
        let node = &mut self.nodes[v.0];
        (node.grad.as_deref(), node.value.data_mut())
    }

    pub fn param_count(&self) -> usize {
        self.param_names.len()
    }

    /// Parameters in registration order.
    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.param_names.len()).map(Var)
    }

    /// Smallest kink distance reported by any op recorded since the last
    /// reset. Infinity when every recorded op is smooth at its inputs.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    /// Accumulates gradients of `loss` into every node that requires them.
    /// Parameters not reachable from `loss` end up with a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Usage("backward called twice without reset".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.ran_backward = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || self.nodes[idx].op.is_none() {
                continue;
            }
            // Temporarily take the output gradient to end the borrow on
            // self.nodes before accumulating into the input nodes.
            let grad_out = self.nodes[idx].grad.take().expect("checked above");
            let op = self.nodes[idx].op.clone().expect("checked above");
            let input_ids = self.nodes[idx].inputs.clone();
            let needs: Vec<bool> =
                input_ids.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let tensors: Vec<&Tensor<T>> =
                input_ids.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads =
                ops::backward(&op, &tensors, &self.nodes[idx].value, &grad_out, &needs)?;
            drop(tensors);
            for (&i, g) in input_ids.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => self.nodes[i].grad = Some(g),
                }
            }
            self.nodes[idx].grad = Some(grad_out);
        }

        for idx in 0..self.param_names.len() {
            if self.nodes[idx].grad.is_none() {
                let n = self.nodes[idx].value.numel();
                self.nodes[idx].grad = Some(vec![T::zero(); n]);
            }
        }
        Ok(())
    }

    /// Drops every non-parameter node and all gradients, keeping parameter
    /// values (and their [`Var`] handles) intact.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.param_names.len());
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.ran_backward = false;
        self.min_kink = f64::INFINITY;
    }
}
