use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;

/// Backward rule of a recorded op. Receives the gradient of the op output and
/// a mask of which parents need a gradient; returns one optional gradient per
/// parent in the order the parents were recorded.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes that do not depend on any gradient-requiring leaf keep no backward
/// closure, so a graph built purely from constants is a plain forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value), false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Records an op with an explicit backward rule.
    pub fn custom<'g>(
        &'g self,
        parents: &[Var<'g>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'g> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| {
                debug_assert!(std::ptr::eq(p.graph, self), "var from another graph");
                nodes[p.id].requires_grad
            })
        };
        self.push(Node {
            value: Rc::new(value),
            parents: if requires_grad {
                parents.iter().map(|p| p.id).collect()
            } else {
                Vec::new()
            },
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        assert_eq!(root.value.numel(), 1, "backward() needs a scalar, got {:?}", root.value.shape());
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients retained for leaf nodes after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Cuts the gradient path: a constant holding the same value.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf_rc(self.value(), false)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
