//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are handles onto graph nodes. Forward operations record a backward
//! closure when any input requires a gradient; `Tensor::backward` walks the
//! recorded graph once in reverse topological order. Everything is 64-bit and
//! single-threaded by design: small models, tight finite-difference checks.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

pub mod ops;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle onto a node of the computation graph. Cloning a `Tensor` clones the
/// handle, not the storage.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                parents,
                backward,
            }),
        }
    }

    /// A constant (non-trainable) tensor.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_node(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// A trainable leaf parameter.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new_node(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(&[], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::constant(shape, vec![v; numel_of(shape)])
    }

    /// Uniform init in [-limit, limit]; used for Xavier-style layer init.
    pub fn uniform_param(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor {
        let data = (0..numel_of(shape))
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Tensor::param(shape, data)
    }

    /// Internal constructor for op outputs. Skips recording when no input
    /// requires a gradient, so frozen/eval forward passes build no graph.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Tensor::new_node(shape, data, true, parents, Some(backward))
        } else {
            Tensor::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Freeze or unfreeze a leaf. Only meaningful for leaves: op nodes derive
    /// their flag from their inputs at construction time.
    pub fn set_requires_grad(&self, value: bool) {
        assert!(
            self.node.backward.is_none(),
            "requires_grad can only be toggled on leaf tensors"
        );
        self.node.requires_grad.set(value);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.node.data.borrow()[0]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.node.data.borrow()[i]
    }

    pub fn set(&self, i: usize, v: f64) {
        self.node.data.borrow_mut()[i] = v;
    }

    /// Replace the whole buffer (shapes must match).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    /// Elementwise in-place update, used by the optimizer.
    pub fn update_data(&self, mut f: impl FnMut(usize, f64) -> f64) {
        let mut d = self.node.data.borrow_mut();
        for (i, v) in d.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Zero the accumulated gradient (keeps the buffer allocated).
    pub fn zero_grad(&self) {
        let mut g = self.node.grad.borrow_mut();
        if let Some(buf) = g.as_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        if !self.requires_grad() {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                debug_assert_eq!(buf.len(), contrib.len());
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// A fresh leaf holding a copy of this tensor's current values.
    pub fn detached(&self, requires_grad: bool) -> Tensor {
        Tensor::new_node(
            self.node.shape.clone(),
            self.to_vec(),
            requires_grad,
            Vec::new(),
            None,
        )
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of leaf parameters
    /// accumulate across calls; call `zero_grad` between optimizer steps.
    /// Intermediate nodes are reset on every sweep, so repeating backward on
    /// the same graph (with leaves zeroed in between) is bit-identical.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(()); // nothing reachable requires a gradient
        }

        // Reverse post-order DFS over the grad-requiring subgraph gives a
        // topological order; each node's backward runs exactly once, after all
        // of its consumers.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, pi)) = stack.pop() {
            if pi < t.node.parents.len() {
                let parent = t.node.parents[pi].clone();
                stack.push((t, pi + 1));
                if parent.requires_grad() && visited.insert(parent.node.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(t);
            }
        }

        for t in &topo {
            if t.node.backward.is_some() {
                *t.node.grad.borrow_mut() = Some(vec![0.0; t.numel()]);
            }
        }
        self.accumulate_grad(&[1.0]);

        for t in topo.iter().rev() {
            if let Some(backward) = &t.node.backward {
                let g = t.node.grad.borrow();
                if let Some(g) = g.as_ref() {
                    backward(g);
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let preview: Vec<f64> = d.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?})",
            self.shape(),
            self.requires_grad(),
            preview.len(),
            preview
        )
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn backward_of_sum_is_all_ones() {
        let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let x = Tensor::param(&[], vec![3.0]);
        let loss = ops::mul(&x, &x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = ops::scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(Error::Shape(_))));
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // loss = y + y with y = 2x: gradient must be 4, not 8 (i.e. y's
        // backward must run once with the accumulated upstream gradient).
        let x = Tensor::param(&[], vec![5.0]);
        let y = ops::scale(&x, 2.0);
        let loss = ops::add(&y, &y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn repeated_backward_with_zeroing_is_bit_identical() {
        let x = Tensor::param(&[3], vec![0.3, -1.7, 2.2]);
        let y = ops::softmax(&ops::mul(&x, &x).unwrap(), 0).unwrap();
        let loss = ops::sum_all(&ops::mul(&y, &x).unwrap());
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        x.set_requires_grad(false);
        let loss = ops::sum_all(&x);
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
