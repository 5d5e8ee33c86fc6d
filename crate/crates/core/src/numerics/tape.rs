//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded node owns its
//! forward value and, unless it is a leaf, a [`Backward`] rule that maps the
//! gradient of the node's output onto gradients of its inputs. Nodes are
//! appended in evaluation order, so walking them in reverse is a valid
//! topological order for backpropagation.

use crate::error::{contract_err, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Backward {
    /// Input nodes, in the order `backward` returns their gradients.
    fn inputs(&self) -> Vec<Var>;

    /// Returns, per input, the gradient contribution for `out_grad`, or
    /// `None` for inputs that do not require a gradient.
    fn backward(&self, tape: &Tape, out_grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf (a parameter or free variable).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, None, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, None, false)
    }

    /// Records the output of an operation together with its backward rule.
    pub fn record(&mut self, value: Tensor, rule: Box<dyn Backward>) -> Var {
        let requires_grad = rule.inputs().iter().any(|&v| self.requires_grad(v));
        self.push_node(value, Some(rule), requires_grad)
    }

    fn push_node(&mut self, value: Tensor, rule: Option<Box<dyn Backward>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(contract_err!("loss node {} is not on this tape", loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {}",
                loss_value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs = rule.inputs();
            let contributions = rule.backward(self, &g);
            debug_assert_eq!(inputs.len(), contributions.len());
            for (input, contribution) in inputs.into_iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut out = Vec::with_capacity(grads.len());
        for (idx, g) in grads.into_iter().enumerate() {
            out.push(if self.nodes[idx].rule.is_none() { g } else { None });
        }
        Ok(Gradients {
            grads: out,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().clone())
                .collect(),
        })
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<crate::numerics::Shape>,
}

impl Gradients {
    /// Gradient for leaf `v`; zeros if `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match (self.grads.get(v.0), self.shapes.get(v.0)) {
            (Some(Some(g)), Some(shape)) => {
                Tensor::new(shape.clone(), g.clone()).expect("gradient matches its node shape")
            }
            (_, Some(shape)) => Tensor::zeros(shape.clone()),
            (_, None) => panic!("variable {} does not belong to this tape", v.0),
        }
    }

    pub fn contributed(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}
