use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Which part of the network a parameter belongs to. Fusion parameters
/// train at the scaled learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Backbone,
    Head,
    Fusion,
    FusionNorm,
    Shortcut,
}

impl ParamGroup {
    pub fn lr_scaled(self) -> bool {
        matches!(self, ParamGroup::Fusion | ParamGroup::FusionNorm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Receives the ℓ2 decay term.
    pub decay: bool,
}

/// Non-trainable state, e.g. normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Every named tensor of a network, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name: names are generated by the builder.
    pub(crate) fn add_param(
        &mut self,
        name: String,
        value: Tensor<T>,
        group: ParamGroup,
        decay: bool,
    ) -> usize {
        let i = self.params.len();
        let prev = self.index.insert(name.clone(), Slot::Param(i));
        assert!(prev.is_none(), "duplicate parameter `{name}`");
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
        i
    }

    pub(crate) fn add_buffer(&mut self, name: String, value: Tensor<T>) -> usize {
        let i = self.buffers.len();
        let prev = self.index.insert(name.clone(), Slot::Buffer(i));
        assert!(prev.is_none(), "duplicate buffer `{name}`");
        self.buffers.push(Buffer { name, value });
        i
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        match self.slot(name)? {
            Slot::Param(i) => Some(&self.params[i].value),
            Slot::Buffer(i) => Some(&self.buffers[i].value),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match self.slot(name)? {
            Slot::Param(i) => Some(&mut self.params[i].value),
            Slot::Buffer(i) => Some(&mut self.buffers[i].value),
        }
    }

    /// Total trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// `(name, tensor)` for every parameter, then every buffer.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    /// Mutable access to two distinct buffers at once.
    pub(crate) fn buffer_pair_mut(&mut self, a: usize, b: usize) -> (&mut [T], &mut [T]) {
        assert_ne!(a, b);
        if a < b {
            let (lo, hi) = self.buffers.split_at_mut(b);
            (lo[a].value.data_mut(), hi[0].value.data_mut())
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a);
            (hi[0].value.data_mut(), lo[b].value.data_mut())
        }
    }
}
