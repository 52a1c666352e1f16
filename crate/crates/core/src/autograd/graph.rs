use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    pub needs: Vec<bool>,
}

impl BackwardCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode tape. One graph per forward pass; drop it after `backward`.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<String, Var>,
    stat_updates: Vec<(String, Tensor)>,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), true)
    }

    /// Leaf for a named parameter. Repeated lookups return the same node, so
    /// shared parameters accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .get_entry(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let v = self.leaf(entry.value_arc(), entry.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Queue a running-statistics update computed during a training forward.
    pub(crate) fn record_stat(&mut self, name: String, value: Tensor) {
        self.stat_updates.push((name, value));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaves.insert(i, g);
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &*self.nodes[p].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        let params = self
            .params
            .iter()
            .map(|(name, v)| (name.clone(), v.0))
            .collect();
        Ok(Gradients { leaves, params })
    }
}

pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Gradients keyed by parameter name; parameters off the loss path are absent.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.leaves.get(id).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, id)| self.leaves.remove(&id).map(|g| (name, g)))
            .collect()
    }
}
