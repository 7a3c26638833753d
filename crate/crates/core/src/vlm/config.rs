use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            vocab_size: 512,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            max_seq_len: 160,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("image_size, patch_size and channels must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.layers == 0 {
            return bad("model needs at least one layer".into());
        }
        if self.max_seq_len <= self.num_patches() {
            return bad(format!(
                "max_seq_len {} leaves no room for text after {} patches",
                self.max_seq_len,
                self.num_patches()
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = ModelConfig { patch_size: 5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { vocab_size: 1, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
