//! Trainable parameters and the store that owns them.

use crate::tensor::Tensor;

/// The loss terms that can write gradient into a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Ctc,
    Attention,
    Regularizer,
}

/// Set of [`LossTerm`]s admitted by a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask(u8);

impl UpdateMask {
    pub const NONE: UpdateMask = UpdateMask(0);
    pub const ALL: UpdateMask = UpdateMask(0b111);
    pub const CTC_ONLY: UpdateMask = UpdateMask(1);

    const fn bit(term: LossTerm) -> u8 {
        match term {
            LossTerm::Ctc => 1,
            LossTerm::Attention => 2,
            LossTerm::Regularizer => 4,
        }
    }

    pub fn admits(self, term: LossTerm) -> bool {
        self.0 & Self::bit(term) != 0
    }

    pub fn with(self, term: LossTerm) -> Self {
        UpdateMask(self.0 | Self::bit(term))
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub update_mask: UpdateMask,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, update_mask: UpdateMask) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            update_mask,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Parameter) -> ParamId {
        debug_assert!(
            self.find(&param.name).is_none(),
            "duplicate parameter {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
