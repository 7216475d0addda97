//! The recording tape: computation graph nodes plus reverse-mode backward.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::Param;
use crate::tensor::Tensor;

/// Gradient contributions for each parent, aligned with the node's parent list.
pub(crate) type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<usize>,
    pub backward: Option<BackFn>,
    pub needs_grad: bool,
    /// Set when this node is a trainable-parameter leaf.
    pub param_id: Option<u64>,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// A single-use computation tape. Build a fresh one per forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone)]
pub struct Var {
    pub(crate) id: usize,
    pub(crate) tape: Tape,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_node(value, vec![], None, false, None)
    }

    /// A differentiable leaf that is not a parameter (used by tests and probes).
    pub fn input(&self, value: Tensor) -> Var {
        self.push_node(value, vec![], None, true, None)
    }

    /// Record a parameter leaf. Frozen parameters enter as constants, so no
    /// gradient is ever computed for them.
    pub fn param(&self, p: &Param) -> Var {
        let value = p.value();
        if p.trainable() {
            self.push_node(value, vec![], None, true, Some(p.id()))
        } else {
            self.constant(value)
        }
    }

    pub(crate) fn push_node(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackFn>,
        needs_grad: bool,
        param_id: Option<u64>,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
            param_id,
        });
        Var {
            id,
            tape: self.clone(),
        }
    }

    /// Record an op. `needs_grad` is derived from the parents; the backward
    /// closure is dropped when no parent needs gradients.
    pub(crate) fn op(&self, value: Tensor, parents: Vec<&Var>, backward: BackFn) -> Var {
        let needs_grad = {
            let inner = self.inner.borrow();
            parents.iter().any(|p| inner.nodes[p.id].needs_grad)
        };
        let parent_ids = parents.iter().map(|p| p.id).collect();
        self.push_node(value, parent_ids, Some(backward), needs_grad, None)
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// differentiable leaf reachable from it.
    pub fn backward(&self, loss: &Var) -> Grads {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.tape.inner),
            "loss does not belong to this tape"
        );
        let inner = self.inner.borrow();
        assert!(
            inner.nodes[loss.id].value.is_scalar(),
            "backward requires a scalar loss, got {:?}",
            inner.nodes[loss.id].value.shape()
        );

        let mut grads: Vec<Option<Tensor>> = vec![None; inner.nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        let mut leaf_grads: HashMap<usize, Tensor> = HashMap::new();
        let mut param_grads: HashMap<u64, Tensor> = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.backward {
                Some(back) => {
                    let contribs = back(&grad);
                    assert_eq!(
                        contribs.len(),
                        node.parents.len(),
                        "backward arity mismatch at node {id}"
                    );
                    for (pid, contrib) in node.parents.iter().zip(contribs) {
                        if !inner.nodes[*pid].needs_grad {
                            continue;
                        }
                        match &mut grads[*pid] {
                            Some(acc) => acc.accumulate(&contrib),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
                None => {
                    // Differentiable leaf.
                    if let Some(pid) = node.param_id {
                        match param_grads.get_mut(&pid) {
                            Some(acc) => acc.accumulate(&grad),
                            None => {
                                param_grads.insert(pid, grad.clone());
                            }
                        }
                    }
                    leaf_grads.insert(id, grad);
                }
            }
        }

        Grads {
            leaf_grads,
            param_grads,
        }
    }
}

/// Result of a backward sweep.
pub struct Grads {
    leaf_grads: HashMap<usize, Tensor>,
    param_grads: HashMap<u64, Tensor>,
}

impl Grads {
    /// Gradient with respect to a leaf `Var` (input or parameter leaf).
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.id)
    }

    /// Gradient with respect to a parameter, by its stable id.
    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.param_grads.get(&p.id())
    }

    pub fn param_by_id(&self, id: u64) -> Option<&Tensor> {
        self.param_grads.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.param_grads.keys().copied()
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn scalar_value(&self) -> f32 {
        self.value().scalar_value()
    }
}
