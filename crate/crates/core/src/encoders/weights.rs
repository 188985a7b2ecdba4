//! Parameters of the two transformer towers.

use sha2::{Digest, Sha256};

use super::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::RngHandle;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Tensor,
    pub fc2: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextTower {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    pub projection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTower {
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub class_token: Tensor,
    pub position_embedding: Tensor,
    pub ln_pre_gain: Tensor,
    pub ln_pre_bias: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_post_gain: Tensor,
    pub ln_post_bias: Tensor,
    pub projection: Tensor,
}

/// Both towers. Once `frozen`, prompt training treats every value as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub text: TextTower,
    pub vision: VisionTower,
    pub frozen: bool,
}

impl BlockWeights {
    fn init(cfg: &EncoderConfig, rng: &mut RngHandle) -> Self {
        let d = cfg.width;
        let hidden = d * cfg.mlp_ratio;
        let std_attn = (d as f64).powf(-0.5);
        let std_out = std_attn / ((2 * cfg.depth) as f64).sqrt();
        let std_fc2 = (hidden as f64).powf(-0.5) / ((2 * cfg.depth) as f64).sqrt();
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], 0.0, std_attn, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::randn(&[d, d], 0.0, std_attn, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::randn(&[d, d], 0.0, std_attn, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::randn(&[d, d], 0.0, std_out, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            fc1: Tensor::randn(&[d, hidden], 0.0, std_attn, rng),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2: Tensor::randn(&[hidden, d], 0.0, std_fc2, rng),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("fc1", &self.fc1),
            ("fc1_bias", &self.fc1_bias),
            ("fc2", &self.fc2),
            ("fc2_bias", &self.fc2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1,
            &mut self.fc1_bias,
            &mut self.fc2,
            &mut self.fc2_bias,
        ]
    }
}

impl BackboneWeights {
    pub fn init(cfg: &EncoderConfig, vocab_size: usize, rng: &mut RngHandle) -> Self {
        let d = cfg.width;
        let proj_std = (d as f64).powf(-0.5);
        let text = TextTower {
            token_embedding: Tensor::randn(&[vocab_size, d], 0.0, 0.02, rng),
            position_embedding: Tensor::randn(&[cfg.context_length, d], 0.0, 0.01, rng),
            blocks: (0..cfg.depth).map(|_| BlockWeights::init(cfg, rng)).collect(),
            ln_final_gain: Tensor::full(&[d], 1.0),
            ln_final_bias: Tensor::zeros(&[d]),
            projection: Tensor::randn(&[d, d], 0.0, proj_std, rng),
        };
        let pd = cfg.patch_dim();
        let vision = VisionTower {
            patch_weight: Tensor::randn(&[pd, d], 0.0, (pd as f64).powf(-0.5), rng),
            patch_bias: Tensor::zeros(&[d]),
            class_token: Tensor::randn(&[1, d], 0.0, 0.02, rng),
            position_embedding: Tensor::randn(&[cfg.num_patches() + 1, d], 0.0, 0.02, rng),
            ln_pre_gain: Tensor::full(&[d], 1.0),
            ln_pre_bias: Tensor::zeros(&[d]),
            blocks: (0..cfg.depth).map(|_| BlockWeights::init(cfg, rng)).collect(),
            ln_post_gain: Tensor::full(&[d], 1.0),
            ln_post_bias: Tensor::zeros(&[d]),
            projection: Tensor::randn(&[d, d], 0.0, proj_std, rng),
        };
        Self {
            text,
            vision,
            frozen: false,
        }
    }

    /// Every tensor with a stable dotted name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let t = &self.text;
        let v = &self.vision;
        let mut out: Vec<(String, &Tensor)> = vec![
            ("text.token_embedding".into(), &t.token_embedding),
            ("text.position_embedding".into(), &t.position_embedding),
        ];
        for (i, b) in t.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, x)| (format!("text.blocks.{i}.{n}"), x)));
        }
        out.extend([
            ("text.ln_final_gain".into(), &t.ln_final_gain),
            ("text.ln_final_bias".into(), &t.ln_final_bias),
            ("text.projection".into(), &t.projection),
            ("vision.patch_weight".into(), &v.patch_weight),
            ("vision.patch_bias".into(), &v.patch_bias),
            ("vision.class_token".into(), &v.class_token),
            ("vision.position_embedding".into(), &v.position_embedding),
            ("vision.ln_pre_gain".into(), &v.ln_pre_gain),
            ("vision.ln_pre_bias".into(), &v.ln_pre_bias),
        ]);
        for (i, b) in v.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, x)| (format!("vision.blocks.{i}.{n}"), x)));
        }
        out.extend([
            ("vision.ln_post_gain".into(), &v.ln_post_gain),
            ("vision.ln_post_bias".into(), &v.ln_post_bias),
            ("vision.projection".into(), &v.projection),
        ]);
        out
    }

    /// Mutable view in the same order as [`BackboneWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let t = &mut self.text;
        let v = &mut self.vision;
        let mut out: Vec<&mut Tensor> = vec![&mut t.token_embedding, &mut t.position_embedding];
        for b in &mut t.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([
            &mut t.ln_final_gain,
            &mut t.ln_final_bias,
            &mut t.projection,
            &mut v.patch_weight,
            &mut v.patch_bias,
            &mut v.class_token,
            &mut v.position_embedding,
            &mut v.ln_pre_gain,
            &mut v.ln_pre_bias,
        ]);
        for b in &mut v.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut v.ln_post_gain, &mut v.ln_post_bias, &mut v.projection]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuild from tensors in [`BackboneWeights::named_tensors`] order.
    pub fn from_tensors(cfg: &EncoderConfig, vocab_size: usize, tensors: Vec<Tensor>, frozen: bool) -> Result<Self> {
        let mut w = Self::init(cfg, vocab_size, &mut RngHandle::new(0));
        let slots = w.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "backbone expects {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "backbone tensor shape {:?} does not match config shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        w.frozen = frozen;
        Ok(w)
    }

    /// Little-endian bytes of every value in serialization order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_le_bytes()))
    }

    /// Mean and standard deviation over all entries of the token embedding
    /// table: the statistics used for in-space prompt initialization.
    pub fn token_embedding_stats(&self) -> (f64, f64) {
        let d = self.text.token_embedding.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Put every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundBackbone {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let block = |b: &BlockWeights| BoundBlock {
            ln1_gain: leaf(&b.ln1_gain),
            ln1_bias: leaf(&b.ln1_bias),
            wq: leaf(&b.wq),
            bq: leaf(&b.bq),
            wk: leaf(&b.wk),
            bk: leaf(&b.bk),
            wv: leaf(&b.wv),
            bv: leaf(&b.bv),
            wo: leaf(&b.wo),
            bo: leaf(&b.bo),
            ln2_gain: leaf(&b.ln2_gain),
            ln2_bias: leaf(&b.ln2_bias),
            fc1: leaf(&b.fc1),
            fc1_bias: leaf(&b.fc1_bias),
            fc2: leaf(&b.fc2),
            fc2_bias: leaf(&b.fc2_bias),
        };
        let t = &self.text;
        let v = &self.vision;
        BoundBackbone {
            text: BoundText {
                token_embedding: leaf(&t.token_embedding),
                position_embedding: leaf(&t.position_embedding),
                blocks: t.blocks.iter().map(block).collect(),
                ln_final_gain: leaf(&t.ln_final_gain),
                ln_final_bias: leaf(&t.ln_final_bias),
                projection: leaf(&t.projection),
            },
            vision: BoundVision {
                patch_weight: leaf(&v.patch_weight),
                patch_bias: leaf(&v.patch_bias),
                class_token: leaf(&v.class_token),
                position_embedding: leaf(&v.position_embedding),
                ln_pre_gain: leaf(&v.ln_pre_gain),
                ln_pre_bias: leaf(&v.ln_pre_bias),
                blocks: v.blocks.iter().map(block).collect(),
                ln_post_gain: leaf(&v.ln_post_gain),
                ln_post_bias: leaf(&v.ln_post_bias),
                projection: leaf(&v.projection),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub fc1: Var,
    pub fc1_bias: Var,
    pub fc2: Var,
    pub fc2_bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundText {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_final_gain: Var,
    pub ln_final_bias: Var,
    pub projection: Var,
}

#[derive(Clone, Debug)]
pub struct BoundVision {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub class_token: Var,
    pub position_embedding: Var,
    pub ln_pre_gain: Var,
    pub ln_pre_bias: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_post_gain: Var,
    pub ln_post_bias: Var,
    pub projection: Var,
}

/// Backbone tensors placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub text: BoundText,
    pub vision: BoundVision,
}

impl BoundBackbone {
    /// Leaves in [`BackboneWeights::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let block = |b: &BoundBlock| {
            [
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.ln2_gain,
                b.ln2_bias, b.fc1, b.fc1_bias, b.fc2, b.fc2_bias,
            ]
        };
        let t = &self.text;
        let v = &self.vision;
        let mut out = vec![t.token_embedding, t.position_embedding];
        t.blocks.iter().for_each(|b| out.extend(block(b)));
        out.extend([
            t.ln_final_gain,
            t.ln_final_bias,
            t.projection,
            v.patch_weight,
            v.patch_bias,
            v.class_token,
            v.position_embedding,
            v.ln_pre_gain,
            v.ln_pre_bias,
        ]);
        v.blocks.iter().for_each(|b| out.extend(block(b)));
        out.extend([v.ln_post_gain, v.ln_post_bias, v.projection]);
        out
    }
}
