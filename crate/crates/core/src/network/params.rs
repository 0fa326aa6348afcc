use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// What a parameter tensor does; drives the fine-tuning mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Bias,
    NormGain,
    NormBias,
    Embedding,
    Weight,
}

impl Role {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Role::Bias => 0,
            Role::NormGain => 1,
            Role::NormBias => 2,
            Role::Embedding => 3,
            Role::Weight => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Role> {
        Some(match tag {
            0 => Role::Bias,
            1 => Role::NormGain,
            2 => Role::NormBias,
            3 => Role::Embedding,
            4 => Role::Weight,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Bias => "bias",
            Role::NormGain => "norm_gain",
            Role::NormBias => "norm_bias",
            Role::Embedding => "embedding",
            Role::Weight => "weight",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

/// Named, role-tagged parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> usize {
        self.entries.push(Param {
            name: name.into(),
            role,
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Total number of scalar elements.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Checks that `other` has the same names, roles and shapes in order.
    pub fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if self.len() != other.len() {
            bail!(
                Dimension,
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            );
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.role != b.role || a.value.shape() != b.value.shape() {
                bail!(
                    Dimension,
                    "parameter mismatch: expected {} {:?} ({}), found {} {:?} ({})",
                    a.name,
                    a.value.shape(),
                    a.role.name(),
                    b.name,
                    b.value.shape(),
                    b.role.name()
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    /// Biases, normalisation affine parameters and embedding tables only.
    BiasNormEmbed,
}

/// Result of [`finetune_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableSet {
    /// One flag per parameter tensor.
    pub mask: Vec<bool>,
    pub selected_elements: usize,
    pub total_elements: usize,
}

impl TrainableSet {
    pub fn ratio(&self) -> f64 {
        self.selected_elements as f64 / self.total_elements as f64
    }
}

pub fn finetune_mask(params: &ModelParams, mode: FinetuneMode) -> TrainableSet {
    let mask: Vec<bool> = params
        .iter()
        .map(|p| match mode {
            FinetuneMode::Full => true,
            FinetuneMode::BiasNormEmbed => p.role != Role::Weight,
        })
        .collect();
    let selected_elements = params
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.value.len())
        .sum();
    TrainableSet {
        mask,
        selected_elements,
        total_elements: params.element_count(),
    }
}
