use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::encoders::{BackboneWeights, Vocabulary};
use crate::error::Result;
use crate::image::Image;
use crate::numerics::{relative_error, Graph, Tensor};
use crate::rng::RngHandle;

use super::{DapoModel, RunConfig, TRAINABLE_GROUPS};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub parameters: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_relative_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Scale the focal term's backward pass; a negative control.
    pub focal_grad_fault: Option<f64>,
}

fn fixture(cfg: &RunConfig, seed: u64) -> Result<(DapoModel, Vec<SampleRecord>)> {
    let vocab = Vocabulary::builtin();
    let mut rng = RngHandle::derive(seed, 0);
    let mut backbone = BackboneWeights::init(&cfg.encoder, vocab.len(), &mut rng);
    backbone.frozen = true;
    let defects = vec!["scratch".to_string(), "hole".to_string()];
    let mut model = DapoModel::new(cfg.clone(), vocab, backbone, &defects)?;
    // Off-identity adapters and non-trivial prefixes exercise every path.
    for t in model.trainable_mut() {
        for v in t.data_mut() {
            *v += rng.normal(0.0, 0.05);
        }
    }
    let s = cfg.encoder.image_size;
    let mut samples = Vec::new();
    for i in 0..cfg.batch_size {
        let data: Vec<f64> = (0..s * s * 3).map(|_| rng.uniform()).collect();
        let image = Image::new(s, s, data)?;
        let mask: Vec<u8> = if i % 2 == 0 {
            vec![0; s * s]
        } else {
            (0..s * s).map(|p| if p % 3 == 0 { 1 + (p % 2) as u8 } else { 0 }).collect()
        };
        samples.push(SampleRecord {
            name: format!("gradcheck_{i}"),
            label: u8::from(mask.iter().any(|&m| m != 0)),
            image,
            mask,
            object: "disc".into(),
            defects: Vec::new(),
        });
    }
    Ok((model, samples))
}

fn loss_value(model: &DapoModel, batch: &[&SampleRecord]) -> Result<f64> {
    let g = Graph::new();
    let bm = model.bind(&g, false);
    g.item(model.batch_loss(&g, &bm, batch)?.total)
}

/// Central differences of the total loss against the tape gradient for
/// every trainable tensor, on the tiny configuration.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut cfg = RunConfig::tiny();
    cfg.local.focal_grad_fault = opts.focal_grad_fault;
    let (model, samples) = fixture(&cfg, opts.seed)?;
    let batch: Vec<&SampleRecord> = samples.iter().collect();

    let g = Graph::new();
    let bm = model.bind(&g, true);
    let loss = model.batch_loss(&g, &bm, &batch)?;
    g.backward(loss.total)?;
    let mut leaves = vec![bm.context.0, bm.context.1];
    leaves.extend(&bm.prefix.text);
    leaves.extend(&bm.prefix.vision);
    for (w, b) in &bm.adapters {
        leaves.push(*w);
        leaves.push(*b);
    }
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(&g.shape(v))))
        .collect();
    let groups: Vec<&'static str> = model.trainable().iter().map(|(name, _)| *name).collect();

    let mut errors: Vec<GroupError> = TRAINABLE_GROUPS
        .iter()
        .map(|name| GroupError {
            group: name.to_string(),
            parameters: 0,
            max_relative_error: 0.0,
        })
        .collect();
    let mut probe = model.clone();
    for (i, grad) in analytic.iter().enumerate() {
        let slot = TRAINABLE_GROUPS.iter().position(|n| *n == groups[i]).expect("known group");
        for j in 0..grad.len() {
            let orig = probe.trainable_mut()[i].data()[j];
            probe.trainable_mut()[i].data_mut()[j] = orig + STEP;
            let plus = loss_value(&probe, &batch)?;
            probe.trainable_mut()[i].data_mut()[j] = orig - STEP;
            let minus = loss_value(&probe, &batch)?;
            probe.trainable_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let e = &mut errors[slot];
            e.parameters += 1;
            e.max_relative_error = e.max_relative_error.max(relative_error(grad.data()[j], numeric));
        }
    }
    Ok(GradcheckReport {
        groups: errors,
        tolerance: GRADCHECK_TOLERANCE,
    })
}
