//! Contrastive pretraining that produces the frozen backbone.

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::tower::{encode_images, encode_text, TextSequence};
use super::vocab::Vocabulary;
use super::weights::BackboneWeights;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::Adam;
use crate::rng::RngHandle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Consecutive corpus pairs that are shuffled as one unit and so always
    /// share a batch.
    pub group_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            temperature: 0.07,
            group_size: crate::data::CAPTION_GROUP,
            seed: 7,
        }
    }
}

/// A captioned image; the caption is already tokenized.
#[derive(Clone, Debug)]
pub struct CaptionPair {
    pub image: Image,
    pub caption: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub weights: BackboneWeights,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Symmetric InfoNCE over matched rows of two `B x d` unit-norm matrices.
pub fn contrastive_loss(g: &Graph, image_emb: Var, text_emb: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let b = g.shape(image_emb)[0];
    let logits = g.matmul(image_emb, g.transpose(text_emb)?)?;
    let logits = g.scale(logits, 1.0 / temperature);
    let diag = g.constant(Tensor::eye(b));
    let by_row = g.sum(g.mul(g.log_softmax(logits, 1)?, diag)?);
    let by_col = g.sum(g.mul(g.log_softmax(logits, 0)?, diag)?);
    let total = g.add(by_row, by_col)?;
    Ok(g.scale(total, -0.5 / b as f64))
}

/// Train every backbone weight on in-batch image/caption matching and return
/// the result flagged frozen. Batches of one pair are skipped.
pub fn pretrain_backbone(
    corpus: &[CaptionPair],
    vocab: &Vocabulary,
    cfg: &EncoderConfig,
    pcfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Validation("pretraining corpus is empty".into()));
    }
    if pcfg.batch_size == 0 || pcfg.group_size == 0 {
        return Err(Error::Config("batch_size and group_size must be positive".into()));
    }
    cfg.validate()?;
    let mut weights = BackboneWeights::init(cfg, vocab.len(), &mut RngHandle::derive(pcfg.seed, 0));
    let mut order_rng = RngHandle::derive(pcfg.seed, 1);
    let mut adam = Adam::new(pcfg.lr);
    let mut epoch_losses = Vec::with_capacity(pcfg.epochs);
    for epoch in 0..pcfg.epochs {
        let gs = pcfg.group_size;
        let order: Vec<usize> = order_rng
            .permutation(corpus.len().div_ceil(gs))
            .into_iter()
            .flat_map(|grp| grp * gs..((grp + 1) * gs).min(corpus.len()))
            .collect();
        let (mut total, mut batches) = (0.0, 0usize);
        for (step, chunk) in order.chunks(pcfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let g = Graph::new();
            let bound = weights.bind(&g, true);
            let images: Vec<&Image> = chunk.iter().map(|&i| &corpus[i].image).collect();
            let texts: Vec<TextSequence> = chunk
                .iter()
                .map(|&i| TextSequence::words(corpus[i].caption.clone()))
                .collect();
            let img = encode_images(&g, &bound.vision, &images, &[], cfg)?;
            let txt = encode_text(&g, &bound.text, vocab, &texts, &[], cfg)?;
            let loss = contrastive_loss(&g, img.global, txt.embeddings, pcfg.temperature)?;
            let value = g.item(loss)?;
            if !value.is_finite() {
                return Err(Error::Validation(format!(
                    "pretraining loss became {value} at epoch {epoch}, step {step}"
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .vars()
                .into_iter()
                .map(|v| g.grad(v).expect("trainable leaf has a gradient"))
                .collect();
            adam.step(&mut weights.tensors_mut(), &grads);
            total += value;
            batches += 1;
        }
        epoch_losses.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    weights.frozen = true;
    Ok(PretrainOutcome { weights, epoch_losses })
}
