//! The conditional noise predictor: a small patch transformer driven by a
//! timestep embedding plus a two-level label embedding.

mod checkpoint;
mod mha;
mod model;
mod params;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use model::{Bound, Denoiser};
pub use params::{finetune_mask, FinetuneMode, ModelParams, Param, Role, TrainableSet};

/// Fixed superclass/subclass hierarchy: subclass `s` belongs to superclass
/// `s / subs_per_super`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub n_super: usize,
    pub subs_per_super: usize,
}

impl Hierarchy {
    pub fn new(n_super: usize, subs_per_super: usize) -> Result<Self> {
        if n_super == 0 || subs_per_super == 0 {
            bail!(Config, "hierarchy needs at least one class per level");
        }
        if n_super * subs_per_super > u16::MAX as usize {
            bail!(Config, "too many subclasses for 16-bit labels");
        }
        Ok(Self {
            n_super,
            subs_per_super,
        })
    }

    pub fn n_sub(&self) -> usize {
        self.n_super * self.subs_per_super
    }

    pub fn parent_of(&self, sub: usize) -> usize {
        sub / self.subs_per_super
    }
}

impl Default for Hierarchy {
    fn default() -> Self {
        Self {
            n_super: 4,
            subs_per_super: 5,
        }
    }
}

/// A label at both levels; `None` means the level is absent (null token).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TieredCondition {
    pub sub: Option<usize>,
    pub sup: Option<usize>,
}

impl TieredCondition {
    pub const NULL: TieredCondition = TieredCondition {
        sub: None,
        sup: None,
    };

    /// Both levels set, superclass derived from the subclass.
    pub fn full(sub: usize, h: &Hierarchy) -> Self {
        Self {
            sub: Some(sub),
            sup: Some(h.parent_of(sub)),
        }
    }

    pub fn sub_only(self) -> Self {
        Self { sup: None, ..self }
    }

    pub fn super_only(self) -> Self {
        Self { sub: None, ..self }
    }

    /// Drops the levels flagged `(sub, super)`.
    pub fn dropped(self, drop: (bool, bool)) -> Self {
        Self {
            sub: if drop.0 { None } else { self.sub },
            sup: if drop.1 { None } else { self.sup },
        }
    }

    pub fn is_null(&self) -> bool {
        self.sub.is_none() && self.sup.is_none()
    }

    pub fn validate(&self, h: &Hierarchy) -> Result<()> {
        if let Some(s) = self.sub {
            if s >= h.n_sub() {
                bail!(Contract, "subclass {s} out of range (n_sub = {})", h.n_sub());
            }
        }
        if let Some(p) = self.sup {
            if p >= h.n_super {
                bail!(Contract, "superclass {p} out of range (n_super = {})", h.n_super);
            }
        }
        if let (Some(s), Some(p)) = (self.sub, self.sup) {
            if h.parent_of(s) != p {
                bail!(Contract, "subclass {s} belongs to superclass {}, not {p}", h.parent_of(s));
            }
        }
        Ok(())
    }
}

/// Which label levels the embedder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Subclass and superclass tables, summed.
    Tiered,
    /// Subclass table only; superclass labels are ignored.
    SubclassOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Pro,
    Dense,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    pub n_super: usize,
    pub subs_per_super: usize,
    pub embedder: EmbedderKind,
    pub attention: AttentionMode,
    pub attention_c: f64,
    pub attention_seed: u64,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch: 4,
            d_model: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            time_embed_dim: 64,
            n_super: 4,
            subs_per_super: 5,
            embedder: EmbedderKind::Tiered,
            attention: AttentionMode::Pro,
            attention_c: 5.0,
            attention_seed: 0,
            ln_eps: 1e-6,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hierarchy(&self) -> Result<Hierarchy> {
        Hierarchy::new(self.n_super, self.subs_per_super)
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("time_embed_dim", self.time_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!(Config, "model.{name} must be positive");
            }
        }
        if self.image_size % self.patch != 0 {
            bail!(
                Config,
                "image size {} is not divisible by patch {}",
                self.image_size,
                self.patch
            );
        }
        if self.d_model % self.heads != 0 {
            bail!(Config, "d_model {} is not divisible by {} heads", self.d_model, self.heads);
        }
        if self.time_embed_dim % 2 != 0 {
            bail!(Config, "time_embed_dim must be even");
        }
        if !(self.attention_c > 0.0) || !self.attention_c.is_finite() {
            bail!(Config, "attention_c must be positive");
        }
        if !(self.ln_eps >= 0.0) || !self.ln_eps.is_finite() {
            bail!(Config, "ln_eps must be >= 0");
        }
        self.hierarchy()?;
        Ok(())
    }
}
