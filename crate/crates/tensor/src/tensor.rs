//! The tensor value type and the reverse-mode engine.
//!
//! Every op produces a new immutable [`Tensor`]. When at least one input
//! requires a gradient (and recording is enabled), the result keeps its
//! inputs alive together with a backward closure. [`Tensor::backward`] walks
//! that graph in strictly decreasing node-id order, which is a valid reverse
//! topological order because a node is always created after its inputs.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any autodiff graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Gradients returned by a backward closure, one slot per parent.
pub type ParentGrads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> ParentGrads<T>>;

struct GradFn<T: Scalar> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// What a backward closure sees: the op inputs, the forward output and the
/// incoming gradient (same length as the output).
pub struct BackwardCtx<'a, T: Scalar> {
    pub parents: &'a [Tensor<T>],
    pub output: &'a [T],
    pub grad: &'a [T],
}

impl<T: Scalar> BackwardCtx<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].requires_grad()
    }
}

/// Dense row-major tensor with optional gradient tracking.
///
/// Cloning is cheap (reference counted) and shares the same graph node.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(gf) = &self.0.grad_fn {
            s.field("op", &gf.name);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(TensorError::DataLength {
            len,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            grad_fn: None,
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), Rc::new(data), false))
    }

    /// Builds a trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), Rc::new(data), true))
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), Rc::new(vec![value; n]), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    /// Records the result of a custom op.
    ///
    /// When no parent requires a gradient, or recording is disabled, the
    /// parents and closure are dropped and a plain leaf is returned.
    pub fn from_op<F>(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&BackwardCtx<'_, T>) -> ParentGrads<T> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::leaf(shape, Rc::new(data), false);
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::new(data),
            requires_grad: true,
            grad: RefCell::new(None),
            grad_fn: Some(GradFn {
                name,
                parents,
                backward: Box::new(backward),
            }),
        }))
    }

    /// Same buffer viewed with another shape; gradients pass straight through.
    pub(crate) fn share_with_shape(&self, shape: Vec<usize>) -> Self {
        let data = Rc::clone(&self.0.data);
        if !(is_grad_enabled() && self.requires_grad()) {
            return Self::leaf(shape, data, false);
        }
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: true,
            grad: RefCell::new(None),
            grad_fn: Some(GradFn {
                name: "reshape",
                parents: vec![self.clone()],
                backward: Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
            }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|x| x.to_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// A leaf sharing this tensor's values but cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), Rc::clone(&self.0.data), false)
    }

    /// A fresh leaf with the same values and the given grad flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.0.shape.clone(), Rc::clone(&self.0.data), requires_grad)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|x| x.is_finite())
    }

    /// Unpacks a 4-d shape as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.dims4_for("dims4")
    }

    pub(crate) fn dims4_for(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(TensorError::Rank {
                op,
                expected: 4,
                got: s.to_vec(),
            }),
        }
    }

    /// Accumulates d(self)/d(leaf) into every reachable trainable leaf.
    ///
    /// Gradients add onto whatever a previous call left behind; call
    /// [`Tensor::zero_grad`] on the leaves to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NoGradPath);
        }

        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.0.id, ());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.0.id, ()).is_none() {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.0.id, vec![T::ONE]);
        for node in &nodes {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let ctx = BackwardCtx {
                        parents: &gf.parents,
                        output: &node.0.data,
                        grad: &g,
                    };
                    let parent_grads = (gf.backward)(&ctx);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad length from {}", gf.name);
                        match grads.get_mut(&p.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(p.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
