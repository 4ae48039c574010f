use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::{checked_mode, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on this thread.
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
    GRAD_ENABLED.with(Cell::get)
}

pub(crate) struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: RefCell<Option<Tensor>>,
    op: Option<Op>,
}

/// A tensor participating in the computation graph.
///
/// Cloning a `Var` is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// A leaf whose gradient is accumulated by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor, name: &'static str, op: Op) -> Result<Var> {
        if checked_mode() && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Ok(Var(Rc::new(Node {
            value,
            requires_grad: track,
            grad: RefCell::new(None),
            op: if track { Some(op) } else { None },
        })))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode accumulation from a scalar. Leaf gradients add onto any
    /// gradient already stored from earlier calls.
    pub fn backward(&self) -> Result<()> {
        if self.value().len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
        grads.insert(self.key(), Tensor::ones(self.shape()));
        for var in order.iter().rev() {
            let Some(g) = grads.remove(&var.key()) else {
                continue;
            };
            match &var.0.op {
                None => {
                    let mut slot = var.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    op.backward(&var.0.value, &g, &mut |parent: &Var, pg: Tensor| {
                        if !parent.requires_grad() {
                            return;
                        }
                        debug_assert_eq!(parent.shape(), pg.shape());
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// Post-order over the tracked subgraph rooted here.
    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(var.key()) {
                continue;
            }
            stack.push((var.clone(), true));
            if let Some(op) = &var.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
