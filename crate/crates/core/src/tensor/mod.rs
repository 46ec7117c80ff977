//! Dense row-major tensors with reverse-mode gradients.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to an immutable node holding the
//! value, an optional gradient slot, and, for non-leaf nodes that need a
//! gradient, the parents and the vector-Jacobian product that produced it.
//! The graph is recorded eagerly during the forward pass and released when
//! the last handle to it is dropped.
//!
//! Values are stored as `f64`. In [`Precision::Single`] mode every op output
//! (and every accumulated gradient) is rounded through `f32`, while the op
//! internals, reductions included, accumulate in `f64`.

mod branch;
mod gemm;
pub mod gradcheck;
pub mod io;
mod nn;
mod ops;
mod spatial;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) use gemm::gemm;
pub(crate) use nn::sigmoid;
pub use spatial::PoolKind;

/// Storage precision of a computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "single" => Some(Precision::Single),
            "f64" | "double" => Some(Precision::Double),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Vector-Jacobian product of one node: `(parents, output value, output grad)`
/// to one optional gradient per parent.
type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.0.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("precision", &self.0.precision)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn leaf(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        precision: Precision,
        requires_grad: bool,
    ) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero extent in {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel_of(&shape), data.len()),
            ));
        }
        check_finite("tensor", &data)?;
        if precision == Precision::Single {
            data.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            precision,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        })))
    }

    /// A constant (no gradient) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, precision, false)
    }

    /// Double-precision constant; shorthand used throughout tests and examples.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, Precision::Double)
    }

    /// A trainable leaf whose gradient is recorded by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, precision, true)
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Result<Self> {
        Self::new(shape, vec![value; numel_of(shape)], precision)
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Result<Self> {
        Self::full(shape, 0.0, precision)
    }

    pub fn scalar(value: f64, precision: Precision) -> Result<Self> {
        Self::new(&[], vec![value], precision)
    }

    /// Builds the output node of an op. Rounds to the graph precision, rejects
    /// non-finite values, and only records parents when a gradient is needed.
    pub(crate) fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        precision: Precision,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Result<Self>
    where
        F: Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(numel_of(&shape), data.len(), "{op}");
        check_finite(op, &data)?;
        if precision == Precision::Single {
            data.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if requires_grad {
            (parents, Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            precision,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
            op,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn precision(&self) -> Precision {
        self.0.precision
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor (`"leaf"` for inputs).
    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    /// Accumulated gradient, if a backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    /// Same value, cut loose from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            precision: self.0.precision,
            requires_grad: false,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        }))
    }

    /// Same value as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor(Rc::new(Node {
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            precision: self.0.precision,
            requires_grad: true,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            op: "leaf",
        }))
    }

    /// Re-rounds the value into another precision. The result is a leaf that
    /// keeps the `requires_grad` flag.
    pub fn with_precision(&self, precision: Precision) -> Result<Tensor> {
        Self::leaf(
            self.0.shape.clone(),
            self.0.data.clone(),
            precision,
            self.0.requires_grad,
        )
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        {
            let mut g = self.0.grad.borrow_mut();
            match g.as_mut() {
                Some(existing) => existing[0] += 1.0,
                None => *g = Some(vec![1.0]),
            }
        }
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let grad_out = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parent_grads = backward(&node.0.parents, &node.0.data, &grad_out);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len(), "{}", node.0.op);
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                check_finite("backward", &pg)?;
                let precision = parent.precision();
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a = precision.round(*a + g);
                        }
                    }
                    None => {
                        let mut pg = pg;
                        if precision == Precision::Single {
                            pg.iter_mut().for_each(|v| *v = precision.round(*v));
                        }
                        *slot = Some(pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require a gradient.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(Rc::as_ptr(&self.0));
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if parent.requires_grad() && seen.insert(Rc::as_ptr(&parent.0)) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

pub(crate) fn common_precision(op: &'static str, tensors: &[&Tensor]) -> Result<Precision> {
    let p = tensors[0].precision();
    if tensors.iter().any(|t| t.precision() != p) {
        return Err(Error::PrecisionMismatch { op });
    }
    Ok(p)
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
