//! Append-only reverse-mode tape. Every operation pushes one node holding its
//! value, its parent indices and a backward closure; node order is therefore a
//! topological order and the backward pass is a single reverse sweep.

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward closure: the upstream gradient, the node's
/// own forward value and the parent values, in parent order.
pub struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub value: &'a Tensor,
    pub parents: &'a [&'a Tensor],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs) -> Vec<Tensor>>;

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) parents: Vec<Var>,
    /// None marks a leaf (or an explicitly non-differentiable node).
    pub(crate) backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Result of a backward pass, indexed by [`Var`]. Vars that do not influence
/// the root (or were never visited) have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves receive gradients but propagate none.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()), "parent var from a different tape");
        self.nodes.push(Node { value, parents, backward });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar root. Gradients of unreachable nodes
    /// are skipped entirely, so dead branches cost nothing.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let n = root.0 + 1;

        let mut needed = vec![false; n];
        needed[root.0] = true;
        for i in (0..n).rev() {
            if needed[i] {
                for p in &self.nodes[i].parents {
                    needed[p.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));

        for i in (0..n).rev() {
            if !needed[i] || grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let grad = grads[i].take().expect("checked above");
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let args = BackwardArgs { grad: &grad, value: &node.value, parents: &parent_values };
            let parent_grads = backward(&args);
            assert_eq!(parent_grads.len(), node.parents.len(), "backward closure returned wrong arity");
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape(), "gradient shape mismatch for parent {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_scaled_assign(&pg, 1.0),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are dropped once consumed; only leaves and
            // still-pending nodes keep theirs. Re-inserting for callers that
            // inspect interior grads: keep it simple and retain nothing.
        }

        Gradients { grads }
    }

    /// Like [`Tape::backward`] but keeps gradients of every visited node, not
    /// just leaves. Used by tests that inspect intermediate gradients.
    pub fn backward_retain_all(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let n = root.0 + 1;

        let mut needed = vec![false; n];
        needed[root.0] = true;
        for i in (0..n).rev() {
            if needed[i] {
                for p in &self.nodes[i].parents {
                    needed[p.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));

        for i in (0..n).rev() {
            if !needed[i] || grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let grad = grads[i].clone().expect("checked above");
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let args = BackwardArgs { grad: &grad, value: &node.value, parents: &parent_values };
            let parent_grads = backward(&args);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(acc) => acc.add_scaled_assign(&pg, 1.0),
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Gradients { grads }
    }
}
