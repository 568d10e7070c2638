use std::cell::RefCell;
use std::fmt;

use crate::{Real, Tensor};

/// Backward rule of a recorded operation.
///
/// Receives the gradient of the operation's output and a mask telling which
/// inputs need a gradient; returns one optional gradient per input, in the
/// order the inputs were recorded.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records operations on [`Var`]s for reverse-mode differentiation.
///
/// A tape lives for one forward/backward pass. Operations whose inputs are all
/// constants are evaluated eagerly without storing a backward rule, so
/// inference through a tape of constants costs no extra memory beyond the
/// intermediate values.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A differentiable input (parameter or input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records the result of an operation over `inputs`.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                assert!(std::ptr::eq(v.tape, self), "mixing vars from different tapes");
                nodes[v.id].requires_grad
            })
        };
        if requires_grad {
            let parents = inputs.iter().map(|v| v.id).collect();
            self.push(value, parents, Some(Box::new(backward)), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    pub(crate) fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the single-element `root` with respect to every leaf.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let seed = {
            let nodes = self.nodes.borrow();
            let shape = nodes[root.id].value.shape().to_vec();
            assert_eq!(
                shape.iter().product::<usize>(),
                1,
                "backward root must hold one element, got shape {shape:?}"
            );
            Tensor::full(shape, T::one())
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of [`Tape::backward`]: gradients of leaves reachable from the root.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`, zeros if the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
