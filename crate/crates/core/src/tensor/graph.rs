use crate::error::{Error, Result};

use super::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reverse rule of a recorded primitive. `out_grad` is the gradient of
/// the loss with respect to the primitive's output.
pub trait BackwardOp<T: Scalar> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out_grad: &[T]);
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Box<dyn BackwardOp<T>>>,
}

/// Access to forward values and input gradient buffers during backward.
pub struct BackwardCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, zero-initialised on first use.
    pub fn grad_mut(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        for (d, &s) in self.grad_mut(v).iter_mut().zip(g) {
            *d += s;
        }
    }
}

/// A dynamically recorded computation. Nodes are appended in evaluation
/// order and backward visits them in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            check_finite: false,
        }
    }

    /// Fail any primitive whose output holds NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shape(v);
        self.grad(v)
            .map(|g| Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"))
    }

    /// Appends the output of a primitive. The reverse rule is kept only
    /// when some input participates in differentiation.
    pub fn record<O: BackwardOp<T> + 'static>(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: O,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn BackwardOp<T>>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        Ok(self.push(value, requires_grad, op))
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        op: Option<Box<dyn BackwardOp<T>>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Propagates `d loss / d v` into every differentiable ancestor of
    /// `loss`, accumulating into existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            let mut ctx = BackwardCtx {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            op.backward(&mut ctx, &out_grad);
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }
}
