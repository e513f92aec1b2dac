//! Dense linear-algebra kernels, reverse-mode differentiation, and the
//! vision-transformer encoder with masked-image-modeling and classification
//! heads.

pub mod checkpoint;
pub mod linalg;
pub mod tape;
mod vit;

pub use linalg::Tensor;
pub use tape::{Tape, VarId};
pub use vit::{
    cls_forward, cls_loss, count_params, forward_encoder, mim_loss, named_param_shapes,
    patch_matrix, saliency_grad, BoundParams, EncoderOutput, ModelParams,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("checkpoint error on {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture hyperparameters; every parameter shape follows from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_side: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            mlp_ratio: 4.0,
            patch_size: 16,
            image_side: 224,
            channels: 1,
            vocab_size: 8192,
            n_classes: 2,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            vocab_size: 64,
            ..Default::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        (self.hidden as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden % self.heads != 0 {
            return Err(ModelError::Argument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(ModelError::Argument(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.vocab_size < 2 || self.n_classes < 2 {
            return Err(ModelError::Argument(
                "vocab_size and n_classes must be at least 2".into(),
            ));
        }
        Ok(())
    }
}
