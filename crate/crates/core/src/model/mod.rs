//! Two-branch multimodal encoder-decoder.
//!
//! The RGB branch sees the colour image; the auxiliary branch sees the
//! channel-concatenated thermal and LIDAR images. Each encoder stage is a
//! stride-2 3x3 convolution followed by ReLU. At every stage the two
//! branch activations are fused as
//!
//! ```text
//! g = sigmoid(W_g [a_rgb; a_aux] + b_g)
//! f = a_rgb + g ⊙ a_aux
//! ```
//!
//! Decoder heads project every stage to class logits with a 1x1 map,
//! upsample bilinearly to input resolution and sum. The joint head decodes
//! the fused features; the optional RGB and auxiliary heads decode their
//! branch's activations only.

mod checkpoint;
mod net;
pub mod ops;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use net::{
    backward, forward, mask_modality, predict, predict_logits, softmax_ce, softmax_ce_with_grad, softmax_nll_map, ForwardCache,
    HeadGradients, PredictionSet,
};
pub use params::{init_params, Params};

use crate::{Error, Result};

pub const RGB_CHANNELS: usize = 3;
pub const AUX_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Adds the RGB-only and auxiliary-only decoder heads.
    pub multihead: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 3,
            channels: vec![8, 16, 32],
            classes: crate::raster::NUM_CLASSES,
            height: 64,
            width: 64,
            multihead: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Invalid("model needs at least one stage".into()));
        }
        if self.channels.len() != self.stages || self.channels.contains(&0) {
            return Err(Error::Invalid(format!(
                "channels {:?} must list {} positive counts",
                self.channels, self.stages
            )));
        }
        if self.classes < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        let step = 1usize << self.stages;
        if self.height == 0 || self.width == 0 || self.height % step != 0 || self.width % step != 0 {
            return Err(Error::Invalid(format!(
                "input {}x{} must be divisible by {step}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Spatial size of stage `s` output.
    pub fn stage_dims(&self, s: usize) -> (usize, usize) {
        (self.height >> (s + 1), self.width >> (s + 1))
    }
}
