//! Model hyperparameters and reserved token ids.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Reserved token ids shared by the model, the sampler, and the dataset
/// vocabulary. Word tokens start at [`special::FIRST_WORD`].
pub mod special {
    /// Placeholder id stored at visual positions (embedded from pixels).
    pub const IMG: usize = 0;
    /// Opens the reasoning span.
    pub const THINK_OPEN: usize = 1;
    /// Closes the reasoning span; generation switches to the answer segment.
    pub const THINK_CLOSE: usize = 2;
    /// End of sequence.
    pub const EOS: usize = 3;
    pub const FIRST_WORD: usize = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layer count.
    pub layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Model width; must be divisible by `heads`.
    pub width: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Visual patch grid.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Pixel side length of one square patch.
    pub patch_px: usize,
    /// Maximum sequence length (visual block + prompt + response).
    pub max_len: usize,
    /// Normalization epsilon.
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 64,
            vocab: 64,
            grid_rows: 6,
            grid_cols: 6,
            patch_px: 4,
            max_len: 80,
            eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.vocab == 0 {
            return Err(Error::Config("layers, heads, width, and vocab must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_px == 0 {
            return Err(Error::Config("grid dimensions and patch_px must be positive".into()));
        }
        if self.vocab <= special::FIRST_WORD {
            return Err(Error::Config(format!(
                "vocab {} leaves no room after the {} reserved ids",
                self.vocab,
                special::FIRST_WORD
            )));
        }
        if self.max_len <= self.num_patches() {
            return Err(Error::Config(format!(
                "max_len {} cannot hold the {}-patch visual block plus text",
                self.max_len,
                self.num_patches()
            )));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Flattened pixel count of one patch (3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * 3
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.width
    }

    pub fn image_width(&self) -> usize {
        self.grid_cols * self.patch_px
    }

    pub fn image_height(&self) -> usize {
        self.grid_rows * self.patch_px
    }
}
