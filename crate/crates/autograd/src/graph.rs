use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward closure sees: the upstream gradient, the input values and
/// the value it produced in the forward pass.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

/// Returns one gradient per input (`None` when the input gets no gradient).
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true, params: RefCell::new(HashMap::new()) }
    }

    /// A graph that records no backward closures; parameters are constants.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf that is not a stored parameter (used by gradient checks).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(value, self.grad_enabled)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push_leaf(store.get(id).clone(), self.grad_enabled);
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Records an operation. The backward closure is dropped when no input
    /// needs a gradient.
    pub fn custom(&self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward() needs a scalar loss, got shape {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&j| &nodes[j].value).collect(),
                output: &node.value,
            };
            let input_grads = back(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[j].value.shape(), "gradient shape mismatch");
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let params = self.params.borrow().iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }
}

/// Gradients of leaves after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients sorted by parameter id; untouched parameters are skipped.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> =
            self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
