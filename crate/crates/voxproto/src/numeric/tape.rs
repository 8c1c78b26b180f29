//! Reverse-mode autodiff tape.
//!
//! The tape is a Wengert list: forward execution appends one node per
//! whole-tensor operation, so node ids are already a topological order and
//! [`Var::backward`] is a single reverse sweep. Each node stores the closure
//! that maps its output gradient to parent-gradient contributions; closures
//! receive parent values through [`BackwardCtx`] rather than capturing them,
//! and must *accumulate* (`+=`) into the buffers handed to them because a
//! parent may feed several consumers.
//!
//! Gradients only flow where they are needed: a node requires grad iff one of
//! its parents does, and [`BackwardCtx::grad_mut`] returns `None` for parents
//! that do not, letting expensive backwards (convolutions, bilinear sampling)
//! skip constant inputs such as rendered feature maps.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&mut BackwardCtx<'_>)>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    name: &'static str,
}

/// Records differentiable operations; build one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Cheap handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(super) tape: &'t Tape,
    pub(super) id: usize,
}

/// Per-parent gradient slot: a lazily allocated buffer for parents that
/// require grad, `Skip` otherwise. Buffers are merged into the global
/// gradient store after the closure returns, so duplicate parents (the same
/// var appearing twice in one op) each accumulate separately and then sum.
enum GradSlot {
    Temp { buf: Option<Vec<f64>>, numel: usize },
    Skip,
}

/// Everything a backward closure may touch. Fields are disjoint on purpose:
/// holding a parent-gradient buffer from [`ParentGrads::get`] does not block
/// reading `out_grad`, `out_value`, or `parents`.
pub struct BackwardCtx<'a> {
    pub out_grad: &'a [f64],
    pub out_value: &'a Tensor,
    pub parents: &'a [Tensor],
    pub grads: ParentGrads<'a>,
}

/// Parent-gradient accumulation slots.
pub struct ParentGrads<'a> {
    slots: &'a mut [GradSlot],
}

impl<'a> ParentGrads<'a> {
    /// Whether the i-th parent wants a gradient.
    pub fn needs(&self, i: usize) -> bool {
        !matches!(self.slots[i], GradSlot::Skip)
    }

    /// Gradient buffer of the i-th parent (zero-initialised on first touch),
    /// or `None` if that parent does not require grad. Closures accumulate.
    pub fn get(&mut self, i: usize) -> Option<&mut [f64]> {
        match &mut self.slots[i] {
            GradSlot::Skip => None,
            GradSlot::Temp { buf, numel } => {
                Some(buf.get_or_insert_with(|| vec![0.0; *numel]).as_mut_slice())
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input: participates in gradient flow.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, "leaf", Vec::new(), None, true)
    }

    /// Non-trainable input: gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, "const", Vec::new(), None, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Appends an operation node. `backward` maps the node's output gradient
    /// to parent contributions; it is dropped (and never called) when no
    /// parent requires grad.
    pub fn push_op(
        &self,
        name: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&mut BackwardCtx<'_>) + 'static,
    ) -> Var<'_> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let bw: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.push_raw(value, name, ids, bw, requires)
    }

    fn push_raw(
        &self,
        value: Tensor,
        name: &'static str,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        debug_assert!(value.is_finite(), "non-finite output of op `{}`", name);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, backward, requires_grad, name });
        Var { tape: self, id }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Forward value (cheap: shares the payload).
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].name
    }

    /// Reverse sweep from this scalar; returns per-node gradients.
    pub fn backward(&self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward root must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(Error::data("backward root is non-finite".to_string()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.id + 1);
        grads.resize_with(self.id + 1, || None);
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let out_grad = grads[id].take().expect("grad presence checked above");

            let parent_values: Vec<Tensor> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let mut slots: Vec<GradSlot> = node
                .parents
                .iter()
                .map(|&p| {
                    if nodes[p].requires_grad {
                        GradSlot::Temp { buf: None, numel: nodes[p].value.numel() }
                    } else {
                        GradSlot::Skip
                    }
                })
                .collect();

            let mut ctx = BackwardCtx {
                out_grad: &out_grad,
                out_value: &node.value,
                parents: &parent_values,
                grads: ParentGrads { slots: &mut slots },
            };
            bw(&mut ctx);

            for (pi, slot) in slots.into_iter().enumerate() {
                if let GradSlot::Temp { buf: Some(b), .. } = slot {
                    let pid = node.parents[pi];
                    match &mut grads[pid] {
                        Some(g) => {
                            for (gi, bi) in g.iter_mut().zip(&b) {
                                *gi += bi;
                            }
                        }
                        None => grads[pid] = Some(b),
                    }
                }
            }
            grads[id] = Some(out_grad);
        }

        let shapes: Vec<Vec<usize>> =
            nodes.iter().take(self.id + 1).map(|n| n.value.shape().to_vec()).collect();
        drop(nodes);
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads
            .get(v.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Gradient of the root w.r.t. `v`, zeros if none reached it.
    pub fn tensor(&self, v: Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}
