//! Dense f64 tensors with reverse-mode autodiff.
//!
//! Every tensor is an immutable row-major buffer plus an optional graph node.
//! Ops build the graph eagerly; `backward` walks reachable nodes in strict
//! reverse creation order, so each node's gradient is complete before its own
//! backward closure runs. The graph is confined to one thread by design
//! (`Rc`/`RefCell`, no locks).

mod conv;
mod fd;
mod io;
mod matmul;
mod norm;
mod ops;

pub use fd::{fd_gradient, fd_gradient_sampled, max_rel_err};
pub use conv::Conv2dSpec;
pub use io::{read_bmt, write_bmt};

use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_SEQ: Cell<u64> = const { Cell::new(1) };
}

fn next_seq() -> u64 {
    NEXT_SEQ.with(|c| {
        let s = c.get();
        c.set(s + 1);
        s
    })
}

/// Backward closure: receives d(out), returns d(parent) per parent slot
/// (None where a parent does not require grad).
pub type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    seq: u64,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

struct Inner {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    // ── construction ──

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::invalid(
                "tensor",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(Inner { shape: shape.to_vec(), data: Rc::new(data), node: None }),
        })
    }

    /// Leaf that participates in autodiff; its gradient is readable after
    /// `backward` on a descendant.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: t.inner.shape.clone(),
                data: Rc::clone(&t.inner.data),
                node: Some(Node {
                    seq: next_seq(),
                    grad: RefCell::new(None),
                    parents: Vec::new(),
                    backward: None,
                }),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel_of(shape)], shape).expect("zeros")
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::new(vec![v; numel_of(shape)], shape).expect("full")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[1]).expect("scalar")
    }

    /// Graph-op constructor: output tracks gradients iff any parent does.
    pub fn from_op(data: Vec<f64>, shape: &[usize], parents: Vec<Tensor>, backward: BackFn) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(shape));
        let tracked = parents.iter().any(|p| p.requires_grad());
        let node = if tracked {
            Some(Node {
                seq: next_seq(),
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner { shape: shape.to_vec(), data: Rc::new(data), node }),
        }
    }

    /// Same-data view with no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                node: None,
            }),
        }
    }

    // ── accessors ──

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.node.as_ref().and_then(|n| n.grad.borrow().clone())
    }

    fn seq(&self) -> u64 {
        self.inner.node.as_ref().map_or(0, |n| n.seq)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let node = self.inner.node.as_ref().expect("accumulate on untracked tensor");
        let mut slot = node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    // ── reverse pass ──

    /// Reverse-mode sweep seeded with d(self)=1. Self must be scalar.
    /// Gradients land in every reachable tracked leaf (and interior node).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("expected scalar loss, got shape {:?}", self.shape()),
            ));
        }
        let node = match self.inner.node.as_ref() {
            Some(n) => n,
            None => return Ok(()), // constant loss: nothing depends on parameters
        };
        if !self.inner.data[0].is_finite() {
            return Err(Error::NonFinite { op: "backward", msg: format!("loss = {}", self.inner.data[0]) });
        }
        *node.grad.borrow_mut() = Some(vec![1.0]);

        // Gather tracked nodes reachable from the loss, then replay newest
        // first. Creation order is a topological order, so the reverse is a
        // valid reverse-topological schedule.
        let mut seen: HashSet<u64> = HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        seen.insert(node.seq);
        while let Some(t) = stack.pop() {
            if let Some(n) = t.inner.node.as_ref() {
                for p in &n.parents {
                    if let Some(pn) = p.inner.node.as_ref() {
                        if seen.insert(pn.seq) {
                            stack.push(p.clone());
                        }
                    }
                }
            }
            order.push(t);
        }
        order.sort_by(|a, b| b.seq().cmp(&a.seq()));

        for t in &order {
            let n = t.inner.node.as_ref().unwrap();
            let back = match n.backward.as_ref() {
                Some(b) => b,
                None => continue, // leaf
            };
            let gout = match n.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // no gradient flowed here
            };
            let parent_grads = back(&gout);
            debug_assert_eq!(parent_grads.len(), n.parents.len());
            for (p, pg) in n.parents.iter().zip(parent_grads) {
                if let (true, Some(g)) = (p.requires_grad(), pg) {
                    debug_assert_eq!(g.len(), p.numel());
                    p.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}
