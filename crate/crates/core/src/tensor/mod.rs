//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (reference counted) to a row-major buffer.
//! Every op that consumes at least one tensor with `requires_grad` records a
//! graph node holding its inputs and a backward closure; [`Tensor::backward`]
//! walks those nodes once each in reverse topological order.
//!
//! Graphs are single-threaded. Independent runs build their own graphs, and
//! plain `Vec<Float>` snapshots are what crosses thread boundaries.

mod io;
mod nn;
mod ops;
mod optim;

pub use io::{read_container, read_float_tensor, write_float_tensor, write_u8_tensor, DType, Stored};
pub use nn::{batch_norm_eval, batch_norm_train, concat_channels, cross_entropy};
pub use ops::{smooth_max, stack};
pub use optim::{Adam, Optimizer, OptimizerConfig, Sgd};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

/// Backward rule: maps the output gradient to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&[Float]) -> Vec<Option<Vec<Float>>>>;

struct GraphNode {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<Float>>,
    grad: RefCell<Option<Vec<Float>>>,
    requires_grad: bool,
    node: Option<GraphNode>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(invalid(op, format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape {
            op,
            dim: "element count",
            expected: n,
            got: len,
        });
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<Float>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node: None,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<Float>) -> Result<Tensor> {
        check_len("Tensor::new", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<Float>) -> Result<Tensor> {
        check_len("Tensor::param", shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], value: Float) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: Float) -> Tensor {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: Float, rng: &mut R) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as Float * std
            })
            .collect();
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Records an op. The output only joins the graph when some input needs a gradient.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<Float>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| GraphNode {
            op,
            inputs,
            backward,
        });
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op(&self) -> &'static str {
        self.0.node.as_ref().map_or("leaf", |n| n.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<Float>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<Float> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Float {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<Float>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the buffer in place (optimizer steps, checkpoint loads).
    pub fn set_data(&self, data: Vec<Float>) -> Result<()> {
        check_len("Tensor::set_data", &self.0.shape, data.len())?;
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [Float])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar. Gradients are summed into each
    /// reachable `requires_grad` tensor; call [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<*const Inner, Vec<Float>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let g = pending
                .remove(&t.key())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            if let Some(node) = &t.0.node {
                let input_grads = (node.backward)(&g);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "{} grad", node.op);
                    match pending.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.key(), ig);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul_scalar(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn diamond_graph_sums_paths() {
        // y = x*x + 2x, two paths from x
        let x = Tensor::param(&[1], vec![1.5]).unwrap();
        let y = x.mul(&x).unwrap().add(&x.mul_scalar(2.0)).unwrap();
        y.sum().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn intermediates_get_grads() {
        let x = Tensor::param(&[2], vec![1.0, -2.0]).unwrap();
        let h = x.mul_scalar(2.0);
        h.sum().backward().unwrap();
        assert_eq!(h.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn shape_length_checked() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }
}
