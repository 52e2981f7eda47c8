use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Context handed to a primitive's backward function.
pub(crate) struct BwdCtx<'a, T: Scalar> {
    pub inputs: &'a [Tensor<T>],
    pub out_data: &'a [T],
    pub out_grad: &'a [T],
}

type BackwardFn<T> = Box<dyn Fn(&BwdCtx<'_, T>)>;

pub(crate) struct OpRecord<T: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: RefCell<Option<OpRecord<T>>>,
}

/// Dense n-dimensional array, optionally gradient-tracked.
///
/// Image-like data is laid out `[batch, channel, height, width]`, row-major.
/// Cloning a `Tensor` clones the handle, not the storage.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Tensor<T> {
    fn alloc(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                op: RefCell::new(None),
            }),
        }
    }

    /// Leaf tensor. Set `requires_grad` for parameters and for inputs under
    /// gradient verification.
    pub fn from_vec(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Self {
        Self::alloc(shape.to_vec(), data, requires_grad)
    }

    /// Leaf tensor that never tracks gradients.
    pub fn constant(shape: &[usize], data: Vec<T>) -> Self {
        Self::alloc(shape.to_vec(), data, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::constant(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(&[1], vec![value])
    }

    /// Output of a primitive. Records the op when any input tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        name: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        #[cfg(debug_assertions)]
        {
            if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
                panic!("{name}: produced a non-finite value at flat index {idx}");
            }
        }
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let out = Self::alloc(shape, data, requires_grad);
        if requires_grad {
            *out.inner.op.borrow_mut() = Some(OpRecord {
                name,
                inputs,
                backward,
            });
        }
        out
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf; used to freeze parameters for
    /// inference paths.
    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.inner.requires_grad.set(requires_grad);
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable element access for optimizer updates. Must not be called while
    /// a recorded graph still references this tensor's forward value.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `f`'s output into the gradient buffer, allocating zeros first if
    /// the buffer does not exist. No-op for tensors that do not track
    /// gradients.
    pub(crate) fn accumulate_grad_with(&self, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad() {
            return;
        }
        let numel = self.numel();
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); numel]);
        f(buf);
    }

    /// Leaf copy that shares no graph history and tracks no gradients.
    pub fn detach(&self) -> Tensor<T> {
        Self::constant(self.shape(), self.to_vec())
    }

    /// Asserts every element is finite; returns the offending index otherwise.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if let Some(index) = self.inner.data.borrow().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, index });
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients accumulate (sum) into every reachable tensor that requires
    /// them; the recorded primitives are cleared afterwards, so each forward
    /// graph supports exactly one backward pass.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if self.inner.op.borrow().is_none() {
            return Err(TensorError::EmptyTape);
        }
        let tape = Tape::trace(self);
        tape.run_backward(self);
        Ok(())
    }
}

/// Ordered record of the primitives reachable from a loss tensor.
///
/// Node ids increase in execution order, so sorting the reachable set by id
/// yields a valid topological order: every primitive appears after all of its
/// inputs' producers. The reverse sweep therefore visits each node exactly
/// once with its output gradient complete.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !visited.insert(t.id()) {
                continue;
            }
            let op = t.inner.op.borrow();
            if let Some(record) = op.as_ref() {
                for input in &record.inputs {
                    stack.push(input.clone());
                }
                drop(op);
                nodes.push(t);
            }
        }
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn run_backward(&self, root: &Tensor<T>) {
        *root.inner.grad.borrow_mut() = Some(vec![T::one(); 1]);
        for node in self.nodes.iter().rev() {
            let grad = node.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let op = node.inner.op.borrow();
            let Some(record) = op.as_ref() else { continue };
            let data = node.inner.data.borrow();
            (record.backward)(&BwdCtx {
                inputs: &record.inputs,
                out_data: &data,
                out_grad: &grad,
            });
        }
        // Consume the tape: the graph is single-use.
        for node in &self.nodes {
            node.inner.op.borrow_mut().take();
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5], true);
        let loss = ops::sum_all(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_half_square_sum_is_identity() {
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = Tensor::<f64>::from_vec(&[4], vals.clone(), true);
        let sq = ops::mul(&x, &x).unwrap();
        let loss = ops::scalar_mul(&ops::sum_all(&sq).unwrap(), 0.5);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vals);
    }

    #[test]
    fn grad_accumulates_over_shared_input() {
        // y = x + x must deliver gradient 2 to x.
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0], true);
        let y = ops::add(&x, &x).unwrap();
        let loss = ops::sum_all(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0], true);
        let y = ops::add(&x, &x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_leaf_loss() {
        let x = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        assert!(matches!(x.backward(), Err(TensorError::EmptyTape)));
    }

    #[test]
    fn tape_is_cleared_after_backward() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0], true);
        let y = ops::mul(&x, &x).unwrap();
        let loss = ops::sum_all(&y).unwrap();
        loss.backward().unwrap();
        assert!(Tape::trace(&loss).is_empty());
    }
}
