use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::optim::Adam;
use crate::rng::RngHandle;

use super::DapoModel;

const STREAM_ORDER: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

/// Resumable optimizer state around a [`DapoModel`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: DapoModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps taken inside the current epoch.
    pub step_in_epoch: usize,
    /// Sample order of the current epoch; empty between epochs.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub rng: RngHandle,
    pub log: Vec<LossRecord>,
    /// Where a non-finite batch is dumped.
    pub dump_dir: PathBuf,
    backbone_hash: String,
}

impl Trainer {
    pub fn new(model: DapoModel) -> Self {
        let adam = Adam::new(model.config.lr);
        let rng = RngHandle::derive(model.config.seed, STREAM_ORDER);
        Self::resume(model, adam, 0, 0, Vec::new(), 0, rng, Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn resume(
        model: DapoModel,
        adam: Adam,
        epoch: usize,
        step_in_epoch: usize,
        order: Vec<usize>,
        cursor: usize,
        rng: RngHandle,
        log: Vec<LossRecord>,
    ) -> Self {
        let backbone_hash = model.backbone.sha256();
        Self {
            model,
            adam,
            epoch,
            step_in_epoch,
            order,
            cursor,
            rng,
            log,
            dump_dir: std::env::temp_dir(),
            backbone_hash,
        }
    }

    /// One optimizer step on the next batch of `split`.
    pub fn step(&mut self, split: &Split) -> Result<LossRecord> {
        let n = split.samples.len();
        if n == 0 {
            return Err(Error::Validation("training split is empty".into()));
        }
        if split.defects != self.model.train_defects {
            return Err(Error::Validation(format!(
                "split defects {:?} differ from the model's {:?}",
                split.defects, self.model.train_defects
            )));
        }
        if self.order.is_empty() {
            self.order = self.rng.permutation(n);
            self.cursor = 0;
            self.step_in_epoch = 0;
        }
        if self.order.len() != n {
            return Err(Error::Validation(format!(
                "epoch order covers {} samples but the split has {n}",
                self.order.len()
            )));
        }
        let end = (self.cursor + self.model.config.batch_size).min(n);
        let batch: Vec<&SampleRecord> = self.order[self.cursor..end].iter().map(|&i| &split.samples[i]).collect();

        let g = Graph::new();
        let bm = self.model.bind(&g, true);
        let loss = self.model.batch_loss(&g, &bm, &batch)?;
        let record = LossRecord {
            epoch: self.epoch,
            step: self.step_in_epoch,
            global: g.item(loss.global)?,
            local: g.item(loss.local)?,
            total: g.item(loss.total)?,
        };
        if !record.total.is_finite() {
            return Err(self.dump(&record, &batch));
        }
        g.backward(loss.total)?;
        let mut leaves = vec![bm.context.0, bm.context.1];
        leaves.extend(&bm.prefix.text);
        leaves.extend(&bm.prefix.vision);
        for (w, b) in &bm.adapters {
            leaves.push(*w);
            leaves.push(*b);
        }
        let grads: Vec<Tensor> = leaves
            .iter()
            .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(&g.shape(v))))
            .collect();
        self.adam.step(&mut self.model.trainable_mut(), &grads);

        self.cursor = end;
        self.step_in_epoch += 1;
        if self.cursor >= n {
            self.epoch += 1;
            self.order.clear();
            self.cursor = 0;
        }
        self.log.push(record.clone());
        Ok(record)
    }

    /// Steps until the current epoch completes.
    pub fn run_epoch(&mut self, split: &Split) -> Result<Vec<LossRecord>> {
        let target = self.epoch + 1;
        let mut out = Vec::new();
        while self.epoch < target {
            out.push(self.step(split)?);
        }
        Ok(out)
    }

    /// Mean total loss of each completed epoch in the log.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in &self.log {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.total;
            sums[r.epoch].1 += 1;
        }
        sums.iter().map(|(s, c)| s / *c as f64).collect()
    }

    /// Fails if the backbone changed since this trainer was created.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.model.backbone.sha256();
        if now != self.backbone_hash {
            return Err(Error::Validation(format!(
                "backbone weights changed during training ({} -> {now})",
                self.backbone_hash
            )));
        }
        Ok(())
    }

    pub fn backbone_hash(&self) -> &str {
        &self.backbone_hash
    }

    pub fn loss_log_csv(&self) -> String {
        let mut s = String::from("epoch,step,global,local,total\n");
        for r in &self.log {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.global, r.local, r.total));
        }
        s
    }

    fn dump(&self, record: &LossRecord, batch: &[&SampleRecord]) -> Error {
        let path = self
            .dump_dir
            .join(format!("nonfinite_epoch{}_step{}.json", record.epoch, record.step));
        let doc = serde_json::json!({
            "epoch": record.epoch,
            "step": record.step,
            "global": format!("{}", record.global),
            "local": format!("{}", record.local),
            "total": format!("{}", record.total),
            "samples": batch.iter().map(|s| serde_json::json!({
                "name": s.name,
                "object": s.object,
                "label": s.label,
                "defects": s.defects,
            })).collect::<Vec<_>>(),
            "trainable_finite": self.model.trainable().iter().map(|(g, t)| (g.to_string(), t.all_finite())).collect::<Vec<_>>(),
        });
        if let Err(e) = crate::metrics::write_text(&path, &doc.to_string()) {
            return e;
        }
        Error::NonFiniteLoss {
            epoch: record.epoch,
            step: record.step,
            dump: path,
        }
    }
}
