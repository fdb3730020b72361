//! Dense f64 tensors with a reverse-mode tape.
//!
//! Every operation that consumes a gradient-requiring tensor records a node
//! holding its parents and a backward closure. The graph is an `Rc` DAG: it
//! exists only while some tensor still references it, so dropping the loss
//! (and any retained intermediate states) after `backward` frees the tape.
//! Parameters are leaves and survive across steps.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{fmt_shape, Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static SCOPE: RefCell<Vec<Rc<str>>> = const { RefCell::new(Vec::new()) };
}

type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    scope: Option<Rc<str>>,
}

/// A shared handle to one tensor node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn current_scope() -> Option<Rc<str>> {
    SCOPE.with(|s| s.borrow().last().cloned())
}

/// Runs `f` with gradient recording disabled; restores the previous state on exit.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Pushes a dotted scope segment onto the current thread's scope stack.
/// Nodes created while the guard lives are labeled with the joined path;
/// the labels drive dataflow assertions and attention dumps.
pub struct ScopeGuard(());

pub fn scope(name: &str) -> ScopeGuard {
    SCOPE.with(|s| {
        let mut st = s.borrow_mut();
        let full: Rc<str> = match st.last() {
            Some(parent) => format!("{parent}.{name}").into(),
            None => name.into(),
        };
        st.push(full);
    });
    ScopeGuard(())
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        SCOPE.with(|s| {
            s.borrow_mut().pop();
        });
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<usize> {
    let numel: usize = shape.iter().product();
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(
            "tensor",
            format!("every extent must be positive, got {}", fmt_shape(shape)),
        ));
    }
    if numel != len {
        return Err(Error::shape(
            "tensor",
            format!(
                "shape {} implies {numel} elements but {len} were provided",
                fmt_shape(shape)
            ),
        ));
    }
    Ok(numel)
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
                scope: current_scope(),
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Learnable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    /// Records a computed node. When recording is off or no parent needs a
    /// gradient the result is a plain constant and the closure is dropped.
    pub(crate) fn computed(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = is_grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if !track {
            return Tensor::leaf(shape, data, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
                scope: current_scope(),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Direct mutable access to the stored values. Intended for optimizer
    /// updates and finite-difference probes on leaves between passes.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `g` into the stored gradient (allocating zeros on first use).
    pub fn accum_grad(&self, g: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    /// Runs `f` over the mutable gradient buffer (zero-initialized on first
    /// use) so backward rules can accumulate without a temporary.
    pub fn with_grad_buf(&self, f: impl FnOnce(&mut [f64])) {
        if !self.inner.requires_grad {
            return;
        }
        let numel = self.numel();
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    }

    pub fn parents(&self) -> &[Tensor] {
        &self.inner.parents
    }

    pub fn scope_name(&self) -> Option<Rc<str>> {
        self.inner.scope.clone()
    }

    /// True when both handles alias the same graph node.
    pub fn same_node(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    /// Reverse-mode sweep from a scalar loss, seeding d(loss)/d(loss) = 1.
    pub fn backward(&self) -> Result<()> {
        self.backward_seeded(1.0)
    }

    /// Reverse-mode sweep with an explicit seed gradient, e.g. 1/batch.
    pub fn backward_seeded(&self, seed: f64) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {}", fmt_shape(self.shape())),
            ));
        }
        if !self.inner.requires_grad {
            return Err(Error::Config(
                "backward: loss does not depend on any learnable tensor".into(),
            ));
        }
        self.accum_grad(&[seed]);
        let order = topo_order(self);
        for node in order.iter().rev() {
            if let Some(bw) = &node.inner.backward {
                let slot = node.inner.grad.borrow();
                if let Some(g) = slot.as_ref() {
                    bw(g);
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Topological order with parents before consumers (iterative DFS, so deep
/// per-sample graphs cannot overflow the stack).
pub fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.id());
    stack.push((root.clone(), 0));
    while let Some((node, next_parent)) = stack.pop() {
        if next_parent < node.inner.parents.len() {
            let parent = node.inner.parents[next_parent].clone();
            stack.push((node, next_parent + 1));
            if visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// All nodes in `root`'s graph that read `target` as a direct input.
pub fn consumers_of(root: &Tensor, target: &Tensor) -> Vec<Tensor> {
    topo_order(root)
        .into_iter()
        .filter(|node| node.parents().iter().any(|p| Tensor::same_node(p, target)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_len_mismatch_rejected() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2 x 3]"), "message should name the shape: {msg}");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn constants_do_not_track() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.parents().is_empty());
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let out = no_grad(|| p.relu());
        assert!(!out.requires_grad());
        assert!(is_grad_enabled());
    }

    #[test]
    fn accumulation_sums_contributions() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        p.accum_grad(&[0.5, 0.5]);
        p.accum_grad(&[1.0, 2.0]);
        assert_eq!(p.grad().unwrap(), vec![1.5, 2.5]);
    }

    #[test]
    fn backward_requires_scalar() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = p.relu();
        assert!(y.backward().is_err());
    }

    #[test]
    fn scopes_nest_and_label_nodes() {
        let p = Tensor::param(&[2], vec![1.0, -1.0]).unwrap();
        let out;
        {
            let _outer = scope("block");
            let _inner = scope("sub");
            out = p.relu();
        }
        assert_eq!(out.scope_name().as_deref(), Some("block.sub"));
        let after = p.relu();
        assert_eq!(after.scope_name(), None);
    }

    #[test]
    fn consumers_found_by_identity() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let a = p.relu();
        let b = p.relu();
        let c = a.add(&b).unwrap();
        let consumers = consumers_of(&c, &p);
        assert_eq!(consumers.len(), 2);
    }
}
