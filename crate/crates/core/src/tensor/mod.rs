//! Dense row-major tensors with a dynamically recorded reverse-mode graph.
//!
//! Every operation that has at least one gradient-requiring input records a
//! node holding its parents and a backward closure. [`Tensor::backward`]
//! walks the graph from a scalar loss in reverse topological order and
//! accumulates (`+=`) gradients into the gradient-requiring leaves. The
//! graph is owned by the tensors themselves, so dropping the loss (and any
//! other handles to intermediates) frees it.

mod element;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub(crate) use element::gemm;
pub use element::Element;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient closure: receives the output gradient and the parents, returns
/// one optional gradient per parent (`None` when the parent needs none).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Element> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// An n-dimensional float array, cheap to clone (shared storage).
pub struct Tensor<T: Element> {
    node: Arc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.grad_fn.as_ref().map(|g| g.name).unwrap_or("leaf");
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={}, op={})",
            T::NAME,
            self.node.shape,
            self.node.requires_grad,
            op
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
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

    fn checked(data: Vec<T>, shape: &[usize]) -> Result<Vec<T>> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("zero-sized dimension in {shape:?}"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(data)
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let data = Self::checked(data, shape)?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// A gradient-requiring leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let data = Self::checked(data, shape)?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), true, None))
    }

    /// A leaf over shared storage; no copy is made.
    pub fn from_shared(data: Arc<Vec<T>>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if numel(shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} does not fit {} values", data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), Arc::new(vec![v]), false, None)
    }

    /// Result of a recorded operation. The node is kept only if some parent
    /// requires a gradient.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward,
        });
        Self::build(shape, Arc::new(data), requires_grad, grad_fn)
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
        self.node.data.as_ref().clone()
    }

    pub fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the producing operation, `None` for leaves.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    /// Accumulated gradient. Gradient-requiring leaves that were never
    /// reached report zeros; tensors without `requires_grad` report `None`.
    pub fn grad(&self) -> Option<Vec<T>> {
        if !self.requires_grad() {
            return None;
        }
        let g = self.node.grad.lock().expect("grad lock poisoned");
        Some(g.clone().unwrap_or_else(|| vec![T::zero(); self.numel()]))
    }

    /// Whether backward has deposited anything into this tensor.
    pub fn has_grad(&self) -> bool {
        self.node.grad.lock().expect("grad lock poisoned").is_some()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same storage, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.shape().to_vec(), self.shared_data(), false, None)
    }

    fn accumulate(&self, g: &[T]) {
        let mut slot = self.node.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                None => t.accumulate(&g),
                Some(gf) => {
                    let grads = (gf.backward)(&g, &gf.parents);
                    debug_assert_eq!(grads.len(), gf.parents.len(), "{}", gf.name);
                    for (parent, pg) in gf.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", gf.name);
                        match pending.get_mut(&parent.node.id) {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(pg) {
                                    *a += v;
                                }
                            }
                            None => {
                                pending.insert(parent.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-requiring nodes (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
        let t = Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.rank(), 2);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let x = Tensor::<f64>::param(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -4.0, 0.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_holds_zero() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = Tensor::<f64>::param(vec![3.0, 4.0], &[2]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![0.0, 0.0]);
        assert!(!y.has_grad());
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        // y = x*x + x  -> dy/dx = 2x + 1
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Tensor::<f32>::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.relu().sigmoid();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn check<S: Send + Sync>() {}
        check::<Tensor<f32>>();
        check::<Tensor<f64>>();
    }
}
