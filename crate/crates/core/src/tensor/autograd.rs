//! Reverse-mode automatic differentiation over a dynamically built graph.
//!
//! A [`Var`] owns its forward value and, when any input requires a gradient,
//! the backward rule plus handles to its inputs. Graph nodes are reference
//! counted and single-threaded: values that fall out of scope in a no-grad
//! forward are freed immediately.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Backward rule of a differentiable operation.
pub(crate) trait BackwardOp<T: Element> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input needs none).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct GradNode<T: Element> {
    inputs: Vec<Var<T>>,
    op: Box<dyn BackwardOp<T>>,
}

struct Inner<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: RefCell<Option<Tensor<T>>>,
    node: Option<GradNode<T>>,
}

/// A tensor participating in the autograd graph.
pub struct Var<T: Element = f32>(Rc<Inner<T>>);

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

impl<T: Element> Var<T> {
    /// Leaf that accumulates gradients.
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Inner {
            value,
            requires_grad,
            grad: RefCell::new(None),
            node: None,
        }))
    }

    /// Records the result of an operation. The backward rule is kept only
    /// when some input requires a gradient.
    pub(crate) fn from_op(
        value: Tensor<T>,
        inputs: &[&Var<T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|v| !v.value().all_finite()),
            "{} produced non-finite values from finite inputs",
            op.name()
        );
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let node = requires_grad.then(|| GradNode {
            inputs: inputs.iter().map(|&v| v.clone()).collect(),
            op: Box::new(op),
        });
        Var(Rc::new(Inner {
            value,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient of a leaf (intermediate nodes keep none).
    pub fn grad(&self) -> Ref<'_, Option<Tensor<T>>> {
        self.0.grad.borrow()
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Names of every differentiable operation reachable from this node.
    pub fn op_names(&self) -> BTreeSet<&'static str> {
        topo_order(self)
            .iter()
            .filter_map(|v| v.0.node.as_ref().map(|n| n.op.name()))
            .collect()
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Back-propagates from a scalar root, accumulating into every leaf that
/// requires a gradient. Repeated calls add to existing leaf gradients.
pub fn backward<T: Element>(root: &Var<T>) -> Result<()> {
    if root.value().len() != 1 {
        return Err(Error::invalid(
            "backward",
            format!("root must be scalar, got shape {:?}", root.shape()),
        ));
    }
    if !root.requires_grad() {
        return Ok(());
    }
    let order = topo_order(root);
    let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
    pending.insert(root.key(), Tensor::ones(root.shape().to_vec()));

    for var in order.iter().rev() {
        let Some(grad) = pending.remove(&var.key()) else {
            continue;
        };
        let Some(node) = &var.0.node else {
            let mut slot = var.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(existing) => existing.add_assign(&grad)?,
                None => *slot = Some(grad),
            }
            continue;
        };
        let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| v.value()).collect();
        let needs: Vec<bool> = node.inputs.iter().map(|v| v.requires_grad()).collect();
        let grads = node.op.backward(&inputs, var.value(), &grad, &needs)?;
        debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op.name());
        for ((input, g), need) in node.inputs.iter().zip(grads).zip(needs) {
            let (Some(g), true) = (g, need) else { continue };
            if g.shape() != input.shape() {
                return Err(Error::shape(
                    node.op.name(),
                    format!(
                        "gradient shape {:?} does not match input shape {:?}",
                        g.shape(),
                        input.shape()
                    ),
                ));
            }
            match pending.get_mut(&input.key()) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    pending.insert(input.key(), g);
                }
            }
        }
    }
    Ok(())
}

/// Post-order DFS over nodes that require gradients.
fn topo_order<T: Element>(root: &Var<T>) -> Vec<Var<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((var, expanded)) = stack.pop() {
        if expanded {
            order.push(var);
            continue;
        }
        if !visited.insert(var.key()) {
            continue;
        }
        stack.push((var.clone(), true));
        if let Some(node) = &var.0.node {
            for input in &node.inputs {
                if input.requires_grad() && !visited.contains(&input.key()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
