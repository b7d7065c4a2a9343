use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Maps the upstream gradient of a node to one optional gradient per input.
pub type BackwardFn<S> = Box<dyn FnOnce(&Tensor<S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Real> {
    value: Rc<Tensor<S>>,
    inputs: Vec<NodeId>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
    leaf: bool,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward simply walks the node list in reverse. The tape is confined to
/// one thread; independent tapes may run on separate workers.
pub struct Tape<S: Real = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    generation: Cell<u64>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Real = f32> {
    tape: &'t Tape<S>,
    id: NodeId,
    generation: u64,
}

impl<S: Real> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
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
            generation: self.generation.get(),
        }
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            leaf: true,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            leaf: true,
        })
    }

    /// Record a differentiable operation. The backward rule is dropped when
    /// no input requires a gradient.
    pub fn record<'t>(
        &'t self,
        inputs: &[Var<'t, S>],
        value: Tensor<S>,
        backward: impl FnOnce(&Tensor<S>) -> Vec<Option<Tensor<S>>> + 'static,
    ) -> Var<'t, S> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            leaf: false,
        })
    }

    /// Record a value that is a function of `inputs` but has no gradient.
    pub fn record_nondiff<'t>(&'t self, inputs: &[Var<'t, S>], value: Tensor<S>) -> Var<'t, S> {
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: None,
            requires_grad: false,
            leaf: false,
        })
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate across
    /// fan-out in tape order; the tape is cleared afterwards and every
    /// outstanding [`Var`] becomes stale.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        if loss.generation != self.generation.get() || !std::ptr::eq(loss.tape, self) {
            return Err(Error::NoActiveTape);
        }
        let mut nodes = self.nodes.take();
        self.generation.set(self.generation.get() + 1);
        if loss.id >= nodes.len() {
            return Err(Error::NoActiveTape);
        }
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let needs: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        nodes.truncate(loss.id + 1);

        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(shapes[loss.id].clone()));
        let mut out = HashMap::new();
        while let Some(node) = nodes.pop() {
            let id = nodes.len();
            let Some(g) = grads[id].take() else { continue };
            if node.leaf {
                if node.requires_grad {
                    out.insert(id, g);
                }
                continue;
            }
            let Some(rule) = node.backward else { continue };
            drop(node.value);
            let contribs = rule(&g);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (&input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !needs[input] {
                    continue;
                }
                debug_assert_eq!(
                    c.shape(),
                    &shapes[input][..],
                    "gradient shape for node {input}"
                );
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { by_node: out })
    }
}

impl<'t, S: Real> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    fn node<R>(&self, f: impl FnOnce(&Node<S>) -> R) -> R {
        assert_eq!(
            self.generation,
            self.tape.generation.get(),
            "variable used after its tape was cleared"
        );
        f(&self.tape.nodes.borrow()[self.id])
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.node(|n| Rc::clone(&n.value))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node(|n| n.value.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.node(|n| n.requires_grad)
    }
}

/// Gradients of the requires-grad leaves reachable from a loss.
#[derive(Debug, Default)]
pub struct Gradients<S: Real = f32> {
    by_node: HashMap<NodeId, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, var: &Var<'_, S>) -> Option<&Tensor<S>> {
        self.by_node.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, S>) -> Option<Tensor<S>> {
        self.by_node.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}
