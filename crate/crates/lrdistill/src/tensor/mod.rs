//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable after creation. Operations that receive at least one
//! gradient-requiring input record a backward rule; calling [`Tensor::backward`]
//! on a scalar output walks the recorded graph in reverse topological order and
//! accumulates `d(root)/d(leaf)` into every reachable gradient-requiring leaf.
//!
//! Training runs in `f32`; gradient checking instantiates the same ops in `f64`.

mod ops;

pub mod gradcheck;

pub use ops::*;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Context handed to a backward rule.
pub struct BackCtx<'a, S: Scalar> {
    /// Gradient of the root w.r.t. this node's output.
    pub grad_out: &'a [S],
    /// The node's recorded inputs, in declaration order.
    pub inputs: &'a [Tensor<S>],
    /// The node's own forward output.
    pub out_data: &'a [S],
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

type BackwardRule<S> = Box<dyn Fn(&BackCtx<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    inputs: Vec<Tensor<S>>,
    rule: Option<BackwardRule<S>>,
}

/// Shared handle to an immutable tensor value in the computation graph.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    /// Leaf tensor from raw row-major data.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                data,
                shape: shape.to_vec(),
                requires_grad: false,
                grad: RefCell::new(None),
                inputs: Vec::new(),
                rule: None,
            }),
        }
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Self {
        let t = Self::from_vec(data, shape);
        Tensor {
            node: Rc::new(Node {
                data: t.node.data.clone(),
                shape: t.node.shape.clone(),
                requires_grad: true,
                grad: RefCell::new(None),
                inputs: Vec::new(),
                rule: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![S::zero(); numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::from_vec(vec![v; numel_of(shape)], shape)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_vec(vec![v], &[1])
    }

    /// Internal: result node of an operation.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<S>>,
        rule: BackwardRule<S>,
    ) -> Self {
        assert_eq!(data.len(), numel_of(&shape));
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        if requires_grad {
            Tensor {
                node: Rc::new(Node {
                    data,
                    shape,
                    requires_grad: true,
                    grad: RefCell::new(None),
                    inputs,
                    rule: Some(rule),
                }),
            }
        } else {
            // Constant-folded: keep no references so subgraphs of frozen
            // models are dropped eagerly.
            Tensor {
                node: Rc::new(Node {
                    data,
                    shape,
                    requires_grad: false,
                    grad: RefCell::new(None),
                    inputs: Vec::new(),
                    rule: None,
                }),
            }
        }
    }

    /// Public extension point for custom differentiable operations.
    ///
    /// `rule` receives the upstream gradient and must return one optional
    /// gradient buffer per input (shaped like that input).
    pub fn custom_op(
        data: Vec<S>,
        shape: &[usize],
        inputs: Vec<Tensor<S>>,
        rule: impl Fn(&BackCtx<'_, S>) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Self {
        Self::from_op(data, shape.to_vec(), inputs, Box::new(rule))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Leaf copy of this value that is cut off from the graph.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_vec(self.node.data.clone(), &self.node.shape)
    }

    /// Stable identity of the underlying value node.
    pub fn node_id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    fn accumulate_grad(&self, g: Vec<S>) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a += *b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients accumulate into existing buffers; clear leaves between
    /// unrelated sweeps.
    pub fn backward(&self) -> crate::Result<()> {
        if self.numel() != 1 {
            return Err(crate::Error::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", self.shape()),
            });
        }
        if !self.requires_grad() {
            // Nothing reachable requires a gradient.
            return Ok(());
        }

        // Topological order via iterative post-order DFS over input edges.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node_id());
        while let Some((t, child_idx)) = stack.pop() {
            let inputs = &t.node.inputs;
            if child_idx < inputs.len() {
                stack.push((t.clone(), child_idx + 1));
                let c = inputs[child_idx].clone();
                if c.requires_grad() && visited.insert(c.node_id()) {
                    stack.push((c, 0));
                }
            } else {
                order.push(t);
            }
        }

        self.accumulate_grad(vec![S::one()]);
        for t in order.iter().rev() {
            let Some(rule) = t.node.rule.as_ref() else {
                continue;
            };
            // Move the buffer out: intermediate grads are consumed by the
            // sweep, not retained, so repeated sweeps start from a clean slate.
            let grad_out = t
                .node
                .grad
                .borrow_mut()
                .take()
                .unwrap_or_else(|| vec![S::zero(); t.numel()]);
            let needs: Vec<bool> = t.node.inputs.iter().map(|i| i.requires_grad()).collect();
            let ctx = BackCtx {
                grad_out: &grad_out,
                inputs: &t.node.inputs,
                out_data: &t.node.data,
                needs: &needs,
            };
            let grads = rule(&ctx);
            debug_assert_eq!(grads.len(), t.node.inputs.len());
            for (inp, g) in t.node.inputs.iter().zip(grads) {
                if let Some(g) = g {
                    if inp.requires_grad() {
                        inp.accumulate_grad(g);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0, 0.5], &[2, 2]);
        let s = sum_all(&x);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::<f64>::param(vals.clone(), &[4]);
        let s = sum_all(&mul(&x, &x));
        s.backward().unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(vals.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]);
        let y = add(&x, &x);
        assert!(y.backward().is_err());
    }

    #[test]
    fn backward_twice_with_cleared_grads_is_identical() {
        let x = Tensor::<f64>::param(vec![0.3, -1.7, 2.2], &[3]);
        let y = sum_all(&mul(&sigmoid(&x), &x));
        y.backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        y.zero_grad();
        y.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn constants_fold_out_of_the_graph() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]);
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2]);
        let c = add(&a, &b);
        assert!(!c.requires_grad());
        assert!(c.node.inputs.is_empty());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]);
        let d = mul(&x, &x).detach();
        let y = sum_all(&mul(&d, &x));
        y.backward().unwrap();
        // d treated as constant 4.0, so dy/dx = 4, not 3x^2 = 12.
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }
}
