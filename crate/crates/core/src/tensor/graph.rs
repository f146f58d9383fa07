use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Result, VigtError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Recorded operation with the inputs and saved state its backward needs.
#[derive(Debug)]
pub(crate) enum Op<E> {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
    },
    /// `b` broadcast over the leading dimensions of `a`.
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    Minimum {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: E,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Log {
        a: Var,
    },
    Clamp {
        a: Var,
        lo: E,
        hi: E,
    },
    SmoothL1 {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<E>,
        k: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<E>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Debug)]
pub(crate) enum Value<E> {
    Owned(Tensor<E>),
    Param(ParamId),
}

#[derive(Debug)]
pub(crate) struct Node<E> {
    pub(crate) value: Value<E>,
    pub(crate) op: Op<E>,
    pub(crate) requires_grad: bool,
}

/// Per-parameter gradients produced by one or more backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<E> {
    by_param: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            by_param: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<E>> {
        self.by_param.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<E>)> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Element-wise sum, in place. Summation order is the caller's order.
    pub fn add_assign(&mut self, other: &Gradients<E>) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (slot, g) in self.by_param.iter_mut().zip(&other.by_param) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn scale(&mut self, k: E) {
        for g in self.by_param.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * k;
            }
        }
    }
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<'p, E: Scalar> {
    pub(crate) store: &'p ParamStore<E>,
    pub(crate) nodes: Vec<Node<E>>,
    param_vars: Vec<Option<Var>>,
    touched: Vec<ParamId>,
    /// Gradients accumulated into leaves across backward calls.
    leaf_grads: Vec<Option<Vec<E>>>,
    training: bool,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) track_branches: bool,
    pub(crate) branch_signature: u64,
}

impl<'p, E: Scalar> Graph<'p, E> {
    pub fn new(store: &'p ParamStore<E>, training: bool, seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            touched: Vec::new(),
            leaf_grads: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            track_branches: false,
            branch_signature: 0,
        }
    }

    /// Eval-mode graph; dropout is the identity.
    pub fn eval(store: &'p ParamStore<E>) -> Self {
        Self::new(store, false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'p ParamStore<E> {
        self.store
    }

    /// Record which side of every piecewise-linear kink (relu, max, min,
    /// clamp, smooth-L1 threshold) each element fell on.
    pub fn track_branches(&mut self, on: bool) {
        self.track_branches = on;
    }

    /// Hash of the branch pattern seen so far; equal signatures mean the
    /// forward passes took the same piecewise branches everywhere.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    pub(crate) fn note_branch(&mut self, bit: bool) {
        if self.track_branches {
            self.branch_signature = self
                .branch_signature
                .wrapping_mul(0x100_0000_01b3)
                .wrapping_add(bit as u64 + 1);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// An input leaf whose gradient is tracked (see [`Graph::grad`]).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// The graph node for a stored parameter. Repeated calls return the same
    /// node, so a parameter used twice accumulates both contributions.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let requires_grad = self.store.get(id).requires_grad;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        self.touched.push(id);
        v
    }

    /// Parameters read by this graph, in first-use order.
    pub fn touched_params(&self) -> &[ParamId] {
        &self.touched
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> E {
        self.value(v).data()[0]
    }

    /// Accumulated gradient of a leaf or parameter node after `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every parameter touched by this graph.
    pub fn param_grads(&self) -> Gradients<E> {
        let mut out = Gradients::empty(self.store.len());
        for (i, slot) in self.param_vars.iter().enumerate() {
            let Some(v) = slot else { continue };
            if let Some(g) = self.leaf_grads.get(v.0).and_then(Option::as_ref) {
                out.by_param[i] =
                    Some(Tensor::new(self.value(*v).shape().to_vec(), g.clone()).expect("grad"));
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf and parameter gradients accumulate across calls: running backward
    /// twice on the same graph doubles them. Intermediate gradients are
    /// recomputed on every call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(VigtError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![E::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input | Op::Param => match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g),
                },
                _ => self.backprop_node(i, &g, &mut grads),
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate(grads: &mut [Option<Vec<E>>], v: Var, g: Vec<E>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    /// Adds into an input's gradient slot through a closure over a zeroed or
    /// existing buffer.
    pub(crate) fn accumulate_with(
        grads: &mut [Option<Vec<E>>],
        v: Var,
        len: usize,
        f: impl FnOnce(&mut [E]),
    ) {
        let slot = grads[v.0].get_or_insert_with(|| vec![E::zero(); len]);
        f(slot);
    }
}
