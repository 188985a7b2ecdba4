use crate::alignment::{
    adapt_patches, global_logits, global_loss, local_loss, similarity_maps, upsample_channels, upsample_matrix,
    AdapterStack,
};
use crate::data::SampleRecord;
use crate::encoders::{
    encode_images, tap_features, BackboneWeights, BoundBackbone, PrefixState, PrefixVars, Vocabulary,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, Tensor, Var};
use crate::prompts::{aggregate_abnormal, embed_state_prototypes, init_prompt_bank, PromptBank, PrototypeVars};
use crate::rng::RngHandle;

use super::RunConfig;

const STREAM_PROMPTS: u64 = 10;
const STREAM_PREFIX: u64 = 11;

/// Names of the trainable groups, in optimizer order.
pub const TRAINABLE_GROUPS: [&str; 5] = ["V", "W", "U_text", "U_vision", "adapters"];

/// Frozen backbone plus every learnable piece of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct DapoModel {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub backbone: BackboneWeights,
    pub bank: PromptBank,
    pub prefix: PrefixState,
    pub adapters: AdapterStack,
    /// Defects seen in training; the checkpoint records these, not the
    /// evaluation-time registrations.
    pub train_defects: Vec<String>,
}

/// Graph handles for one forward pass.
pub struct BoundModel {
    pub backbone: BoundBackbone,
    pub context: (Var, Var),
    pub prefix: PrefixVars,
    pub adapters: Vec<(Var, Var)>,
}

/// Graph outputs for a batch of images.
pub struct BatchForward {
    pub protos: PrototypeVars,
    /// `B x d` unit image embeddings.
    pub global: Var,
    /// `B x 2` cosine logits over [normal, abnormal].
    pub logits: Var,
    /// One `(B*grid^2) x (K+1)` softmax map per tap stage.
    pub stage_maps: Vec<Var>,
}

/// Scalar loss handles for one training batch.
pub struct BatchLoss {
    pub global: Var,
    pub local: Var,
    pub total: Var,
}

impl DapoModel {
    /// Fresh learnable state on top of a frozen backbone.
    pub fn new(
        config: RunConfig,
        vocab: Vocabulary,
        backbone: BackboneWeights,
        train_defects: &[String],
    ) -> Result<Self> {
        config.validate()?;
        if !backbone.frozen {
            return Err(Error::Config("DAPO training needs a frozen (pretrained) backbone".into()));
        }
        let cfg = &config.encoder;
        let bank = init_prompt_bank(
            config.init,
            backbone.token_embedding_stats(),
            config.offset_mult,
            config.prompts_per_state,
            config.context_len,
            cfg.width,
            train_defects,
            &vocab,
            &mut RngHandle::derive(config.seed, STREAM_PROMPTS),
        )?;
        let prefix = PrefixState::normal(
            cfg,
            0.0,
            config.prefix_init_std,
            &mut RngHandle::derive(config.seed, STREAM_PREFIX),
        );
        let adapters = AdapterStack::from_map(cfg.tap_layers.len(), &backbone.vision.projection)?;
        Ok(Self {
            config,
            vocab,
            backbone,
            bank,
            prefix,
            adapters,
            train_defects: train_defects.to_vec(),
        })
    }

    /// Trainable tensors in optimizer order with their group names.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("V", &self.bank.normal), ("W", &self.bank.abnormal)];
        out.extend(self.prefix.text.iter().map(|t| ("U_text", t)));
        out.extend(self.prefix.vision.iter().map(|t| ("U_vision", t)));
        for (w, b) in self.adapters.weights.iter().zip(&self.adapters.biases) {
            out.push(("adapters", w));
            out.push(("adapters", b));
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.bank.normal, &mut self.bank.abnormal];
        out.extend(self.prefix.text.iter_mut());
        out.extend(self.prefix.vision.iter_mut());
        for (w, b) in self.adapters.weights.iter_mut().zip(self.adapters.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.bank.parameter_count() + self.prefix.parameter_count() + self.adapters.parameter_count()
    }

    /// The same learned state with a prompt bank for `defects`, in that order.
    /// New names are registered from their words alone.
    pub fn for_defects(&self, defects: &[String]) -> Result<Self> {
        let unknown: Vec<&str> = defects
            .iter()
            .filter(|d| self.vocab.tokenize(d).is_err())
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "defect names not in the vocabulary: {}",
                unknown.join(", ")
            )));
        }
        Ok(Self {
            bank: self.bank.with_defects(&self.vocab, defects)?,
            ..self.clone()
        })
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(g, false),
            context: self.bank.bind(g, trainable),
            prefix: self.prefix.bind(g, trainable),
            adapters: self.adapters.bind(g, trainable),
        }
    }

    /// Text prototypes followed by the image side of the model.
    pub fn forward(&self, g: &Graph, bm: &BoundModel, images: &[&Image]) -> Result<BatchForward> {
        let cfg = &self.config.encoder;
        let protos = embed_state_prototypes(
            g,
            &self.bank,
            &self.vocab,
            bm.context,
            &bm.backbone.text,
            &bm.prefix.text,
            cfg,
        )?;
        let enc = encode_images(g, &bm.backbone.vision, images, &bm.prefix.vision, cfg)?;
        let agg = aggregate_abnormal(
            g,
            protos.defects,
            self.config.aggregation,
            Some(enc.global),
            self.config.agg_temperature,
        )?;
        let logits = global_logits(g, enc.global, protos.normal, agg, self.config.temperature)?;
        let stacked = g.concat_rows(&[protos.normal, protos.defects])?;
        let stage_maps = enc
            .taps
            .iter()
            .zip(&bm.adapters)
            .map(|(&tap, &ad)| {
                let adapted = adapt_patches(g, tap_features(g, &bm.backbone.vision, tap)?, ad)?;
                similarity_maps(g, adapted, stacked, self.config.temperature)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchForward {
            protos,
            global: enc.global,
            logits,
            stage_maps,
        })
    }

    /// Global cross-entropy plus lambda times the mean per-image local loss.
    pub fn batch_loss(&self, g: &Graph, bm: &BoundModel, samples: &[&SampleRecord]) -> Result<BatchLoss> {
        if samples.is_empty() {
            return Err(Error::dim("empty training batch"));
        }
        let cfg = &self.config.encoder;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let fwd = self.forward(g, bm, &images)?;
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let global = global_loss(g, fwd.logits, &labels)?;

        let (grid, n) = (cfg.grid(), cfg.num_patches());
        let (h, w) = (samples[0].image.height(), samples[0].image.width());
        let up = g.constant(upsample_matrix(grid, grid, h, w)?);
        let channels = 1 + self.bank.num_defects();
        let mut per_image = Vec::with_capacity(samples.len());
        for (b, s) in samples.iter().enumerate() {
            let target = s.one_hot(channels)?;
            let stages = fwd
                .stage_maps
                .iter()
                .map(|&m| {
                    let rows = g.slice_rows(m, b * n, (b + 1) * n)?;
                    upsample_channels(g, g.transpose(rows)?, up)
                })
                .collect::<Result<Vec<_>>>()?;
            per_image.push(local_loss(g, &stages, &target, &self.config.local)?);
        }
        let summed = g.sum(g.concat_rows(
            &per_image
                .iter()
                .map(|&v| g.reshape(v, &[1, 1]))
                .collect::<Result<Vec<_>>>()?,
        )?);
        let local = g.scale(summed, 1.0 / samples.len() as f64);
        let total = crate::alignment::total_loss(g, global, local, self.config.lambda)?;
        Ok(BatchLoss { global, local, total })
    }
}
