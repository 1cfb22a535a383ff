//! Minimal n-dimensional tensor with reverse-mode differentiation.
//!
//! Values are stored flat in row-major order. `Tensor` is a cheaply clonable
//! handle into a computation graph built eagerly by the ops in [`crate::ops`];
//! [`backward`] walks that graph in reverse topological order and accumulates
//! gradients into the leaf tensors that were created with `requires_grad`.
//!
//! Graphs are single-threaded by design. Long-lived model state is kept as
//! plain [`NdArray`] data (which is `Send`) and bound into fresh leaves for
//! each forward/backward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Scalar element type of tensors: 64-bit by default, 32-bit selectable.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Plain n-dimensional array: shape plus flat row-major data, no gradient.
///
/// This is the storage type for parameters, datasets, and detached outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<E: Element = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> NdArray<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "NdArray::new",
                detail: format!("shape {:?} expects {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// 1-d array from a flat vector.
    pub fn from_vec(data: Vec<E>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-d array from equally sized rows.
    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "NdArray::from_rows",
                detail: "rows have unequal lengths".into(),
            });
        }
        let data: Vec<E> = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: E) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise cast through f64.
    pub fn cast<F: Element>(&self) -> NdArray<F> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

fn next_id() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &mut GradSink<E>)>;

struct OpRecord<E: Element> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct TensorInner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    values: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Option<OpRecord<E>>,
}

/// Handle into the computation graph. Cloning is cheap and aliases the node.
pub struct Tensor<E: Element = f64> {
    inner: Rc<RefCell<TensorInner<E>>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("id", &inner.id)
            .field("shape", &inner.shape)
            .field("values", &inner.values)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn from_inner(inner: TensorInner<E>) -> Self {
        Self {
            inner: Rc::new(RefCell::new(inner)),
        }
    }

    /// A graph leaf. Gradients accumulate here when `requires_grad` is set.
    pub fn leaf(array: NdArray<E>, requires_grad: bool) -> Self {
        let NdArray { shape, data } = array;
        Self::from_inner(TensorInner {
            id: next_id(),
            shape,
            values: data,
            grad: None,
            requires_grad,
            op: None,
        })
    }

    /// A leaf that never receives gradients.
    pub fn constant(array: NdArray<E>) -> Self {
        Self::leaf(array, false)
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(NdArray::from_vec(vec![v]))
    }

    /// Op output node. The record is kept only when some parent needs grads.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Self::from_inner(TensorInner {
            id: next_id(),
            shape,
            values,
            grad: None,
            requires_grad,
            op: requires_grad.then_some(OpRecord { parents, backward }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn values(&self) -> Vec<E> {
        self.inner.borrow().values.clone()
    }

    pub(crate) fn values_ref(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.borrow(), |i| i.values.as_slice())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let inner = self.inner.borrow();
        assert_eq!(inner.values.len(), 1, "item() on non-scalar tensor");
        inner.values[0]
    }

    pub fn to_array(&self) -> NdArray<E> {
        let inner = self.inner.borrow();
        NdArray {
            shape: inner.shape.clone(),
            data: inner.values.clone(),
        }
    }

    /// Accumulated gradient, if any has been produced by [`backward`].
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    fn accumulate_grad(&self, contribution: &[E]) -> Result<()> {
        if contribution.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("leaf tensor #{}", self.id())));
        }
        let mut inner = self.inner.borrow_mut();
        let grad = inner.grad.get_or_insert_with(|| vec![E::ZERO; contribution.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += *c;
        }
        Ok(())
    }

    fn parents(&self) -> Vec<Tensor<E>> {
        self.inner
            .borrow()
            .op
            .as_ref()
            .map(|op| op.parents.clone())
            .unwrap_or_default()
    }
}

/// Pass-local gradient accumulator keyed by tensor id.
pub(crate) struct GradSink<E: Element> {
    map: HashMap<u64, Vec<E>>,
}

impl<E: Element> GradSink<E> {
    fn new() -> Self {
        Self { map: HashMap::new() }
    }

    /// Gradient buffer for `t`, zero-initialized on first access.
    pub(crate) fn buf(&mut self, t: &Tensor<E>) -> &mut [E] {
        self.map
            .entry(t.id())
            .or_insert_with(|| vec![E::ZERO; t.len()])
            .as_mut_slice()
    }

    fn take(&mut self, id: u64) -> Option<Vec<E>> {
        self.map.remove(&id)
    }
}

/// Reverse-mode differentiation from a scalar loss.
///
/// Computes dloss/dt for every tensor in the graph below `loss` and adds the
/// result into the persistent `grad` buffer of each `requires_grad` leaf.
/// Repeated calls without [`Tensor::zero_grad`] keep accumulating.
pub fn backward<E: Element>(loss: &Tensor<E>) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "backward",
            detail: format!("loss must be scalar, got shape {:?}", loss.shape()),
        });
    }

    // Post-order DFS over parent edges; the reverse is a topological order
    // with every node preceding the nodes it feeds gradients into.
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, child)) = stack.pop() {
        let parents = node.parents();
        if child < parents.len() {
            stack.push((node, child + 1));
            let p = parents[child].clone();
            if visited.insert(p.id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut sink = GradSink::new();
    sink.map.insert(loss.id(), vec![E::ONE]);

    for node in order.iter().rev() {
        let Some(grad) = sink.take(node.id()) else {
            continue;
        };
        let inner = node.inner.borrow();
        match &inner.op {
            Some(op) => (op.backward)(&inner.values, &grad, &mut sink),
            None => {
                let requires = inner.requires_grad;
                drop(inner);
                if requires {
                    node.accumulate_grad(&grad)?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn ndarray_shape_product_checked() {
        assert!(NdArray::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(NdArray::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn leaf_roundtrip_and_item() {
        let t = Tensor::leaf(NdArray::from_vec(vec![1.0, 2.0, 3.0]), false);
        assert_eq!(t.shape(), vec![3]);
        assert_eq!(t.values(), vec![1.0, 2.0, 3.0]);
        assert_eq!(Tensor::scalar(4.5).item(), 4.5);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::leaf(NdArray::from_vec(vec![1.0, -2.0, 3.0]), true);
        let loss = ops::sum(&x);
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let x = Tensor::leaf(NdArray::from_vec(vec![2.0, 5.0]), true);
        let loss = ops::sum(&ops::relu(&x));
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Tensor::leaf(NdArray::from_vec(vec![1.0, 2.0]), true);
        let err = backward(&ops::relu(&x)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn no_grad_graph_is_pruned() {
        let x = Tensor::leaf(NdArray::from_vec(vec![1.0, 2.0]), false);
        let y = ops::relu(&x);
        assert!(!y.requires_grad());
        assert!(y.parents().is_empty());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(relu(x)) + sum(x) built as sum over concat-free graph:
        // reuse x twice through two ops feeding one scalar each, then add.
        let x = Tensor::leaf(NdArray::from_vec(vec![1.0, 2.0]), true);
        let a = ops::sum(&ops::relu(&x));
        let b = ops::sum(&ops::scale_by(&x, 3.0));
        let loss = ops::add_scalars(&a, &b);
        backward(&loss).unwrap();
        // d/dx [relu(x) positive] = 1 and d/dx [3x] = 3.
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn f32_tensors_work_end_to_end() {
        let x: Tensor<f32> = Tensor::leaf(NdArray::from_vec(vec![1.0f32, -1.0]), true);
        let loss = ops::sum(&ops::relu(&x));
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0f32, 0.0]);
    }
}
