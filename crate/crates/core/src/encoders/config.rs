use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Residual width of both towers; also the shared embedding dimension.
    pub width: usize,
    /// Transformer layers per tower.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Maximum text length including start and end tokens.
    pub context_length: usize,
    /// 1-based layer indices whose patch tokens feed the local branch.
    pub tap_layers: Vec<usize>,
    /// Learnable prefix tokens per layer.
    pub prefix_len: usize,
    /// Text layers that receive prefix tokens (the vision tower always uses all).
    pub text_prefix_depth: usize,
    /// Weight of the previous layer's prefix output in the progressive blend.
    pub alpha: f64,
    pub progressive: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            patch_size: 8,
            image_size: 64,
            context_length: 16,
            tap_layers: vec![2, 3, 4, 6],
            prefix_len: 4,
            text_prefix_depth: 6,
            alpha: 0.1,
            progressive: true,
        }
    }
}

impl EncoderConfig {
    /// Two layers, 8x8 images and tiny widths: the gradient-check scale.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            image_size: 8,
            context_length: 12,
            tap_layers: vec![1, 2],
            prefix_len: 2,
            text_prefix_depth: 2,
            alpha: 0.1,
            progressive: true,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Fails unless `other` describes the same backbone tensors. Prefix and
    /// tap settings are free to differ.
    pub fn check_backbone_shape(&self, other: &EncoderConfig) -> Result<()> {
        let pairs = [
            ("width", self.width, other.width),
            ("depth", self.depth, other.depth),
            ("heads", self.heads, other.heads),
            ("mlp_ratio", self.mlp_ratio, other.mlp_ratio),
            ("patch_size", self.patch_size, other.patch_size),
            ("image_size", self.image_size, other.image_size),
            ("context_length", self.context_length, other.context_length),
        ];
        let diff: Vec<String> = pairs
            .iter()
            .filter(|(_, a, b)| a != b)
            .map(|(n, a, b)| format!("{n} {a} vs {b}"))
            .collect();
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("backbone shape mismatch: {}", diff.join(", "))))
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("width, depth, heads and mlp_ratio must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.tap_layers.is_empty() {
            return fail("at least one tap layer is required".into());
        }
        if let Some(bad) = self.tap_layers.iter().find(|l| **l == 0 || **l > self.depth) {
            return fail(format!("tap layer {bad} outside [1, {}]", self.depth));
        }
        let mut sorted = self.tap_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.tap_layers {
            return fail("tap layers must be strictly increasing".into());
        }
        if self.text_prefix_depth > self.depth {
            return fail(format!(
                "text_prefix_depth {} exceeds depth {}",
                self.text_prefix_depth, self.depth
            ));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1)", self.alpha));
        }
        if self.context_length < 3 {
            return fail("context_length must hold start, end and one word".into());
        }
        Ok(())
    }
}
