//! Miniature text and image transformers with learnable per-layer prefixes.

pub mod config;
pub mod pretrain;
pub mod tower;
pub mod vocab;
pub mod weights;

pub use config::EncoderConfig;
pub use pretrain::{contrastive_loss, pretrain_backbone, CaptionPair, PretrainConfig, PretrainOutcome};
pub use tower::{
    encode_images, encode_text, patchify, prefix_injection, progressive_prefix_step, tap_features, ImageEncoding, PrefixState,
    PrefixVars, TextEncoding, TextPiece, TextSequence,
};
pub use vocab::Vocabulary;
pub use weights::{BackboneWeights, BoundBackbone, BoundText, BoundVision};

use crate::error::Result;
use crate::image::Image;
use crate::numerics::{Graph, Tensor};

/// Plain-value image features: unit global embeddings and raw tap grids.
#[derive(Clone, Debug)]
pub struct ImageFeatures {
    pub global: Tensor,
    pub taps: Vec<Tensor>,
}

impl BackboneWeights {
    /// Encode token sequences without building a trainable graph.
    pub fn embed_texts(
        &self,
        vocab: &Vocabulary,
        texts: &[Vec<usize>],
        prefix: Option<&PrefixState>,
        cfg: &EncoderConfig,
    ) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let vars = prefix.map(|p| p.bind(&g, false));
        let prefix = vars.as_ref().map_or(&[][..], |p| &p.text[..]);
        let seqs: Vec<TextSequence> = texts.iter().cloned().map(TextSequence::words).collect();
        let out = encode_text(&g, &bound.text, vocab, &seqs, prefix, cfg)?;
        Ok(g.value(out.embeddings))
    }

    /// Encode images without building a trainable graph.
    pub fn embed_images(
        &self,
        images: &[&Image],
        prefix: Option<&PrefixState>,
        cfg: &EncoderConfig,
    ) -> Result<ImageFeatures> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let vars = prefix.map(|p| p.bind(&g, false));
        let prefix = vars.as_ref().map_or(&[][..], |p| &p.vision[..]);
        let out = encode_images(&g, &bound.vision, images, prefix, cfg)?;
        Ok(ImageFeatures {
            global: g.value(out.global),
            taps: out.taps.iter().map(|&t| g.value(t)).collect(),
        })
    }
}
