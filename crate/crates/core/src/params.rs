//! Named parameter storage shared by the encoder, probe and pre-training head.

use crate::tensor::{Graph, ParamId, Tensor, Var};

/// Optimizer parameter group; each group has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: Group,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(true),
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Graph leaf for parameter `id`.
    pub fn leaf(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id, self.get(id))
    }

    /// Add the parameter gradients held by `g` into the stored tensors.
    pub fn accumulate(&mut self, g: &Graph) {
        for (id, grad) in g.param_grads() {
            self.params[id.0].tensor.accumulate_grad(grad);
        }
    }

    /// Add externally collected gradients (e.g. from per-utterance graphs).
    pub fn accumulate_list(&mut self, grads: &[(ParamId, Vec<f32>)]) {
        for (id, grad) in grads {
            self.params[id.0].tensor.accumulate_grad(grad);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

/// Owned copy of every parameter gradient in `g`.
pub fn collect_grads(g: &Graph) -> Vec<(ParamId, Vec<f32>)> {
    g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect()
}
