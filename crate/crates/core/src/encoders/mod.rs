//! Toy dual transformer encoders, their EMA shadow, and the checkpoint file format.

mod checkpoint;
mod ema;
mod image;
mod params;
mod text;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointRecord};
pub use ema::{ema_blend, momentum_schedule, EmaState, BASE_MOMENTUM};
pub use image::{ImageBatchOutput, ImageEncoder, ImageInput};
pub use params::{MlpHead, ParamSet};
pub use text::TextEncoder;

use crate::error::{Error, Result};

/// Architecture sizes shared by the image and text encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_patches: usize,
    pub patch_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub ff_hidden: usize,
    pub d_joint: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_patches: 16,
            patch_dim: 12,
            d_model: 64,
            heads: 4,
            image_layers: 3,
            text_layers: 2,
            ff_hidden: 128,
            d_joint: 32,
            vocab: 64,
            max_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        let sizes = [
            ("num_patches", self.num_patches),
            ("patch_dim", self.patch_dim),
            ("image_layers", self.image_layers),
            ("text_layers", self.text_layers),
            ("ff_hidden", self.ff_hidden),
            ("d_joint", self.d_joint),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// CLS-query attention rows of one image forward pass.
///
/// `weights[l][h]` is the softmax row of the CLS query against every surviving token
/// (CLS first), so each row has `1 + kept.len()` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Patch count of the complete image.
    pub num_patches: usize,
    /// Original patch indices of the surviving tokens, in sequence order.
    pub kept: Vec<usize>,
}

impl AttentionTrace {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn tokens(&self) -> usize {
        1 + self.kept.len()
    }

    /// True when every patch of the image took part in the pass.
    pub fn is_complete(&self) -> bool {
        self.kept.len() == self.num_patches
    }
}
