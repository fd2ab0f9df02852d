//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar root with respect to every leaf.

use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// `(grad_out, parent_values, own_value, parent_needs_grad) -> parent grads`
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<usize>,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    /// A graph that keeps values only; `backward` yields nothing.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Frees the value of `v` in an inference graph once no later op will
    /// read it. No-op while recording.
    pub fn discard(&mut self, v: Var) {
        if !self.record {
            self.nodes[v.0].value = Tensor::zeros(&[0]);
        }
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf. `id` is an opaque tag returned with its gradient.
    pub fn leaf(&mut self, id: usize, value: Tensor) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                parents: parents.iter().map(|p| p.0).collect(),
                backward: Some(backward),
                requires_grad,
                param: None,
            }
        } else {
            Node { value, parents: Vec::new(), backward: None, requires_grad: false, param: None }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`, seeded with `d root = 1`.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with(root, Tensor::filled(self.value(root).shape(), 1.0))
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads, params: Vec::new() };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pgrads = backward(&g, &parent_vals, &node.value, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape for node {p}");
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients of one backward sweep, available for leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(leaf id, gradient)` for every leaf that received one.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, &Tensor)> + '_ {
        self.params.iter().filter_map(|&(id, i)| self.grads[i].as_ref().map(|g| (id, g)))
    }

    pub fn into_leaves(mut self) -> Vec<(usize, Tensor)> {
        let params = std::mem::take(&mut self.params);
        params.into_iter().filter_map(|(id, i)| self.grads[i].take().map(|g| (id, g))).collect()
    }
}
