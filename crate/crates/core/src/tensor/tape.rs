use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle of a recorded node; carries the id of its owning tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// A tensor value, optionally tracked by a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<NodeId>,
}

impl Var {
    /// An untracked value. Operations whose inputs are all constants are
    /// evaluated without touching the tape.
    pub fn constant(value: Tensor) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.value.clone())
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) value: Tensor,
}

/// Append-only operation record. Node indices are a topological order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.by_node.get(&n))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: value.clone(),
        });
        self.leaves.push(index);
        Var {
            value,
            node: Some(NodeId {
                tape: self.id,
                index,
            }),
        }
    }

    fn local_index(&self, var: &Var) -> Result<Option<usize>> {
        match var.node {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::Graph("variable belongs to a different tape".into())),
        }
    }

    /// Records `value` as the result of `op`, unless no input is tracked.
    pub(crate) fn record(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        let mut tracked = false;
        for v in &inputs {
            tracked |= self.local_index(v)?.is_some();
        }
        if !tracked {
            return Ok(Var::constant(value));
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value: value.clone(),
        });
        Ok(Var {
            value,
            node: Some(NodeId {
                tape: self.id,
                index,
            }),
        })
    }

    fn scalar_root(&self, loss: &Var) -> Result<usize> {
        if loss.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        self.local_index(loss)?
            .ok_or_else(|| Error::Graph("loss is not recorded on this tape".into()))
    }

    /// Reverse sweep from `loss` to the nodes in `wrt`. Returns one entry per
    /// `wrt` index; `None` when no path connects it to the loss.
    fn sweep(
        &mut self,
        loss: &Var,
        wrt: &[usize],
        create_graph: bool,
    ) -> Result<HashMap<usize, Var>> {
        let top = self.scalar_root(loss)?;
        let mut found = HashMap::new();
        let Some(lo) = wrt.iter().copied().filter(|&w| w <= top).min() else {
            return Ok(found);
        };
        let span = top + 1 - lo;

        // Only descendants of a `wrt` node can carry gradient toward it.
        let mut live = vec![false; span];
        let mut target = vec![false; span];
        for &w in wrt.iter().filter(|&&w| w <= top) {
            live[w - lo] = true;
            target[w - lo] = true;
        }
        let in_span = |v: &Var, live: &[bool]| -> Option<usize> {
            match v.node {
                Some(n) if n.index >= lo && live[n.index - lo] => Some(n.index),
                _ => None,
            }
        };
        for i in lo..=top {
            if !live[i - lo] {
                live[i - lo] = self.nodes[i].inputs.iter().any(|v| in_span(v, &live).is_some());
            }
        }
        if !live[top - lo] {
            return Ok(found);
        }

        let mut grads: Vec<Option<Var>> = vec![None; span];
        grads[top - lo] = Some(Var::constant(Tensor::ones(loss.shape())));
        for i in (lo..=top).rev() {
            let Some(g) = grads[i - lo].take() else {
                continue;
            };
            if target[i - lo] {
                found.insert(i, g.clone());
            }
            let node = &self.nodes[i];
            let sources: Vec<Option<usize>> =
                node.inputs.iter().map(|v| in_span(v, &live)).collect();
            if sources.iter().all(Option::is_none) {
                continue;
            }
            let needs: Vec<bool> = sources.iter().map(Option::is_some).collect();
            let op = node.op.clone();
            let (inputs, output, g) = if create_graph {
                let output = Var {
                    value: node.value.clone(),
                    node: Some(NodeId {
                        tape: self.id,
                        index: i,
                    }),
                };
                (node.inputs.clone(), output, g)
            } else {
                let inputs = node.inputs.iter().map(Var::detach).collect();
                (inputs, Var::constant(node.value.clone()), g.detach())
            };
            let contributions = op.vjp(self, &inputs, &output, &g, &needs)?;
            for (src, contribution) in sources.into_iter().zip(contributions) {
                let (Some(src), Some(c)) = (src, contribution) else {
                    continue;
                };
                let slot = &mut grads[src - lo];
                let acc = match slot.take() {
                    None => c,
                    Some(prev) => self.add(&prev, &c)?,
                };
                grads[src - lo] = Some(acc);
            }
        }
        Ok(found)
    }

    /// Gradients of a scalar `loss` with respect to each of `wrt`. Inputs
    /// with no path to the loss get zeros. With `create_graph`, the returned
    /// gradients are themselves recorded and can be differentiated again.
    pub fn grad(&mut self, loss: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let (grads, _) = self.grad_checked(loss, wrt, create_graph)?;
        Ok(grads)
    }

    /// Like [`Tape::grad`], also reporting which inputs were unreachable.
    pub(crate) fn grad_checked(
        &mut self,
        loss: &Var,
        wrt: &[Var],
        create_graph: bool,
    ) -> Result<(Vec<Var>, Vec<bool>)> {
        let mut indices = Vec::with_capacity(wrt.len());
        for v in wrt {
            indices.push(self.local_index(v)?);
        }
        let idx: Vec<usize> = indices.iter().flatten().copied().collect();
        let found = self.sweep(loss, &idx, create_graph)?;
        let mut reached = Vec::with_capacity(wrt.len());
        let grads = wrt
            .iter()
            .zip(&indices)
            .map(|(v, i)| match i.and_then(|i| found.get(&i)) {
                Some(g) => {
                    reached.push(true);
                    g.clone()
                }
                None => {
                    reached.push(false);
                    Var::constant(Tensor::zeros(v.shape()))
                }
            })
            .collect();
        Ok((grads, reached))
    }

    /// Gradients of `loss` for every leaf recorded before it. Adds nothing
    /// to the tape, so it may be called repeatedly.
    pub fn backward(&mut self, loss: &Var) -> Result<Gradients> {
        let top = self.scalar_root(loss)?;
        let leaves: Vec<usize> = self.leaves.iter().copied().filter(|&l| l <= top).collect();
        let found = self.sweep(loss, &leaves, false)?;
        let mut by_node = HashMap::with_capacity(leaves.len());
        for l in leaves {
            let id = NodeId {
                tape: self.id,
                index: l,
            };
            let grad = match found.get(&l) {
                Some(g) => g.value().clone(),
                None => Tensor::zeros(self.nodes[l].value.shape()),
            };
            by_node.insert(id, grad);
        }
        Ok(Gradients { by_node })
    }

    /// One gradient-descent step recorded on the tape:
    /// `p' = p - lr * dloss/dp` for every `p` in `params`. The gradient is
    /// kept as a differentiable subgraph, so later backward passes reach
    /// `lr`, the parameters' ancestors and whatever produced `loss`.
    pub fn sgd_step(&mut self, params: &[Var], loss: &Var, lr: &Var) -> Result<Vec<Var>> {
        if lr.value().numel() != 1 {
            return Err(Error::Graph("learning rate must be a scalar".into()));
        }
        let (grads, reached) = self.grad_checked(loss, params, true)?;
        if let Some(pos) = reached.iter().position(|r| !r) {
            return Err(Error::Graph(format!(
                "parameter {pos} is not reachable from the loss"
            )));
        }
        params
            .iter()
            .zip(&grads)
            .map(|(p, g)| {
                let step = self.scale(g, lr)?;
                self.sub(p, &step)
            })
            .collect()
    }
}
