//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value, the ids of its
//! inputs and a closure mapping the output gradient to input gradients. Node
//! ids increase monotonically, so reverse id order is a valid reverse
//! topological order and each node is visited once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S> {
    value: Rc<Tensor<S>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recording of one forward pass.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    gates: RefCell<Gates>,
}

/// Which inputs of each ReLU on a tape were passed through, in call order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReluGates(Vec<Vec<bool>>);

impl ReluGates {
    /// Number of ReLU calls covered.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

enum Gates {
    Live,
    Record(Vec<Vec<bool>>),
    Replay { gates: Vec<Vec<bool>>, next: usize },
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for Var<'_, S> {}

impl<S> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            gates: RefCell::new(Gates::Live),
        }
    }

    /// A tape that remembers the ReLU gates of its forward pass; read them
    /// back with [`Tape::take_gates`].
    pub fn recording_gates() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            gates: RefCell::new(Gates::Record(Vec::new())),
        }
    }

    /// A tape whose ReLUs reuse `gates` instead of the signs of their inputs,
    /// which makes the forward pass a smooth function of the parameters
    /// around the point where the gates were recorded.
    pub fn replaying_gates(gates: ReluGates) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            gates: RefCell::new(Gates::Replay { gates: gates.0, next: 0 }),
        }
    }

    /// Gates recorded so far (empty unless built with
    /// [`Tape::recording_gates`]).
    pub fn take_gates(&self) -> ReluGates {
        match &mut *self.gates.borrow_mut() {
            Gates::Record(g) => ReluGates(std::mem::take(g)),
            _ => ReluGates::default(),
        }
    }

    /// The gate of each element of a ReLU input.
    pub(crate) fn relu_gate(&self, x: &Tensor<S>) -> Result<Vec<bool>> {
        let live = || x.data().iter().map(|&v| v > S::zero()).collect::<Vec<_>>();
        match &mut *self.gates.borrow_mut() {
            Gates::Live => Ok(live()),
            Gates::Record(g) => {
                g.push(live());
                Ok(g.last().cloned().unwrap_or_default())
            }
            Gates::Replay { gates, next } => {
                let gate = gates
                    .get(*next)
                    .filter(|g| g.len() == x.numel())
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("replayed ReLU gate {next} does not fit {:?}", x.shape())))?;
                *next += 1;
                Ok(gate)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A free leaf whose gradient can be read back from [`Gradients`].
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    /// Binds parameter `index` of `store` as a leaf.
    pub fn param(&self, store: &ParamStore<S>, index: usize) -> Var<'_, S> {
        let p = store.get(index);
        self.push(Node {
            value: Rc::new(p.value.clone()),
            inputs: Vec::new(),
            backward: None,
            requires_grad: p.requires_grad,
            param: Some(index),
        })
    }

    /// Appends an op node. The backward closure returns one optional gradient
    /// per input, in input order.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<S>,
        inputs: &[Var<'t, S>],
        backward: BackwardFn<S>,
    ) -> Var<'t, S> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    /// Back-propagates from a scalar `loss` and returns per-node gradients.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), S::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let input_grads = backward(&out_grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Back-propagates and adds parameter gradients into `store`.
    ///
    /// Gradients accumulate on top of whatever `store` already holds; call
    /// [`ParamStore::zero_grad`] between steps.
    pub fn backward_into(&self, loss: Var<'_, S>, store: &mut ParamStore<S>) -> Result<()> {
        let grads = self.backward(loss)?;
        let nodes = self.nodes.borrow();
        for (node, g) in nodes.iter().zip(&grads.grads) {
            if let (Some(index), Some(g)) = (node.param, g) {
                store.get_mut(index).grad.add_assign(g);
            }
        }
        Ok(())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value as f64.
    pub fn item(&self) -> f64 {
        self.value().item().to_f64_lossy()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf (intermediate gradients are released during the sweep).
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}
