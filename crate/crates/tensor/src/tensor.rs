use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{dim_err, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_DISABLED: Cell<u32> = const { Cell::new(0) };
}

/// Runs `f` without recording any backward graph on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_DISABLED.with(|g| g.set(g.get() - 1));
        }
    }
    GRAD_DISABLED.with(|g| g.set(g.get() + 1));
    let _guard = Guard;
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_DISABLED.with(|g| g.get() == 0)
}

/// Vector-Jacobian product of one recorded op. Receives the upstream gradient
/// and returns one gradient per parent (`None` for parents that need none).
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Mutex<Option<Node>>,
}

/// Row-major n-dimensional `f64` array with optional reverse-mode gradient.
///
/// Cloning is cheap (shared storage). Data is immutable after construction;
/// only the gradient buffer of leaves changes, through [`Tensor::backward`]
/// and [`Tensor::zero_grad`].
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.inner.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data[..8]", &preview)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                is_leaf: node.is_none(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node: Mutex::new(node),
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Numeric(format!("non-finite value {} at flat index {i}", data[i])));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: gradients accumulate into it on `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::build(t.inner.shape.clone(), t.inner.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel_of(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    /// Same data as a trainable leaf (or constant when `requires_grad` is false).
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), requires_grad, None)
    }

    /// Copy of the values cut from the graph.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {} elements", self.numel());
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.is_leaf
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Name of the op that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.lock().expect("node lock poisoned").as_ref().map(|n| n.op)
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Result of an op. Records a backward node when any parent carries
    /// gradient and recording is enabled; otherwise `backward` is dropped.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl FnOnce(&[f64]) -> Vec<Option<Vec<f64>>> + Send + 'static,
    ) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Numeric(format!(
                "{op} produced non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        let needs_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !needs_grad {
            return Ok(Self::build(shape, data, false, None));
        }
        let node = Node {
            op,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward),
        };
        Ok(Self::build(shape, data, true, Some(node)))
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls
    /// until [`Tensor::zero_grad`]. The recorded graph is released afterwards;
    /// a second sweep through the same intermediates is a usage error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(TensorError::Usage("loss does not depend on any parameter".into()));
        }

        // Iterative post-order DFS; ids are unique so a map is enough.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.id(), ()).is_some() {
                continue;
            }
            let parents: Vec<Tensor> = {
                let node = t.inner.node.lock().expect("node lock poisoned");
                match node.as_ref() {
                    Some(n) => n.parents.iter().filter(|p| p.requires_grad()).cloned().collect(),
                    None if !t.is_leaf() => {
                        return Err(TensorError::Usage(
                            "graph already freed by an earlier backward pass".into(),
                        ))
                    }
                    None => Vec::new(),
                }
            };
            stack.push((t, true));
            for p in parents {
                if !visited.contains_key(&p.id()) {
                    stack.push((p, false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            if t.is_leaf() {
                let mut slot = t.inner.grad.lock().expect("grad lock poisoned");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let node = t
                .inner
                .node
                .lock()
                .expect("node lock poisoned")
                .take()
                .ok_or_else(|| TensorError::Usage("graph already freed by an earlier backward pass".into()))?;
            let parent_grads = (node.backward)(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel(), "op {} grad length", node.op);
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}
