use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{Float, NumericsError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Computes parent gradients from `(grad_out, out_values)`.
///
/// The returned vector is aligned with the node's parents; `None` marks a
/// parent that does not need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Float> {
    op: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Immutable n-dimensional array with a gradient slot.
///
/// Cloning is cheap and shares the node. Values never change after
/// construction; only the gradient slot accumulates. Optimizers produce new
/// leaf tensors instead of mutating existing ones.
pub struct Tensor<T: Float = f32> {
    node: Arc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Arc::clone(&self.node) }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape);
        if self.numel() <= 16 {
            d.field("values", &self.node.data);
        }
        if let Some(g) = &self.node.grad_fn {
            d.field("op", &g.op);
        }
        d.field("requires_grad", &self.node.requires_grad).finish()
    }
}

fn check_shape(numel: usize, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(NumericsError::Dimension(format!("zero extent in shape {shape:?}")));
    }
    let expect: usize = shape.iter().product();
    if expect != numel {
        return Err(NumericsError::Dimension(format!(
            "shape {shape:?} needs {expect} values, got {numel}"
        )));
    }
    Ok(())
}

impl<T: Float> Tensor<T> {
    fn build(
        data: Arc<Vec<T>>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::build(Arc::new(data), shape.to_vec(), false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::build(Arc::new(data), shape.to_vec(), true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Arc::new(vec![v]), Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![T::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        Self::new(vec![v; shape.iter().product()], shape)
    }

    /// Result of an operation. The graph edge is dropped when no parent
    /// needs a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{op}");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { op, parents, backward });
        Self::build(Arc::new(data), shape, requires_grad, grad_fn)
    }

    /// Same values under a new shape; storage is shared.
    pub(crate) fn with_shape_shared(&self, shape: Vec<usize>, op: &'static str) -> Self {
        let requires_grad = self.requires_grad();
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            parents: vec![self.clone()],
            backward: Box::new(|g: &[T], _: &[T]| vec![Some(g.to_vec())]) as BackwardFn<T>,
        });
        Self::build(Arc::clone(&self.node.data), shape, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    /// Name of the producing op, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Constant copy cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(Arc::clone(&self.node.data), self.node.shape.clone(), false, None)
    }

    /// Leaf copy that requires a gradient, sharing storage.
    pub fn detach_param(&self) -> Self {
        Self::build(Arc::clone(&self.node.data), self.node.shape.clone(), true, None)
    }

    fn accumulate(&self, g: Vec<T>) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Every reachable tensor that requires a gradient has it added to its
    /// slot; calling twice without [`zero_grad`](Self::zero_grad) sums.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Creation ids are a topological order: parents always exist first.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && seen.insert(p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in nodes {
            let Some(g) = pending.remove(&t.id()) else { continue };
            if let Some(gf) = &t.node.grad_fn {
                let grads = (gf.backward)(&g, &t.node.data);
                debug_assert_eq!(grads.len(), gf.parents.len(), "{}", gf.op);
                for (p, pg) in gf.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "grad size from {}", gf.op);
                    match pending.get_mut(&p.id()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(pg) {
                                *a += b;
                            }
                        }
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate(g);
        }
        Ok(())
    }
}
