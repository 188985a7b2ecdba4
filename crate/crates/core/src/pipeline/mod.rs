//! Orchestration: run configuration, the training loop, checkpoints,
//! evaluation protocols, inference export, gradient checking and ablations.

mod ablate;
pub mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod model;
mod train;

use std::path::Path;

pub use ablate::{ablate, ablation_csv, AblationAxis, AblationRow};
pub use config::RunConfig;
pub use eval::{
    evaluate, evaluate_predictions, export_embeddings, infer, list_images, predict, EmbeddingExport, EvalTask,
    InferenceRecord, InferenceSummary, Prediction,
};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, GroupError, GRADCHECK_TOLERANCE};
pub use model::{BatchForward, BatchLoss, BoundModel, DapoModel, TRAINABLE_GROUPS};
pub use train::{LossRecord, Trainer};

use crate::data::{CaptionRecord, Corpus, Split};
use crate::encoders::{pretrain_backbone, CaptionPair, PretrainOutcome, Vocabulary};
use crate::error::Result;
use crate::metrics::{write_text, MetricsReport};

/// Tokenize caption records for contrastive pretraining.
pub fn caption_pairs(captions: &[CaptionRecord], vocab: &Vocabulary) -> Result<Vec<CaptionPair>> {
    captions
        .iter()
        .map(|c| {
            Ok(CaptionPair {
                image: c.image.clone(),
                caption: vocab.tokenize(&c.caption)?,
            })
        })
        .collect()
}

/// Contrastive pretraining of a fresh backbone on the corpus captions.
pub fn pretrain(config: &RunConfig, captions: &[CaptionRecord], vocab: &Vocabulary) -> Result<PretrainOutcome> {
    config.validate()?;
    let pairs = caption_pairs(captions, vocab)?;
    pretrain_backbone(&pairs, vocab, &config.encoder, &config.pretrain)
}

/// Metrics after one training epoch.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trainer: Trainer,
    pub epochs: Vec<EpochReport>,
    /// Epoch (1-based) with the highest mean image AUROC, when evaluated.
    pub best_epoch: Option<usize>,
}

/// Train for `config.epochs`, optionally evaluating `eval` after every epoch
/// and writing the run directory (config echo, loss log, per-epoch
/// checkpoints and reports).
pub fn train_run(
    mut trainer: Trainer,
    train: &Split,
    eval: Option<(&Split, &[EvalTask])>,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let cfg = trainer.model.config.clone();
    if let Some(dir) = run_dir {
        cfg.save(&dir.join("config.json"))?;
        trainer.dump_dir = dir.to_path_buf();
    }
    let mut epochs = Vec::new();
    while trainer.epoch < cfg.epochs {
        let records = trainer.run_epoch(train)?;
        let mean_loss = records.iter().map(|r| r.total).sum::<f64>() / records.len() as f64;
        let report = match eval {
            Some((split, tasks)) => Some(evaluate(&trainer.model, split, tasks)?),
            None => None,
        };
        if let Some(dir) = run_dir {
            checkpoint::save(&trainer, &dir.join(format!("epoch_{}.ckpt", trainer.epoch)))?;
            write_text(&dir.join("loss_log.csv"), &trainer.loss_log_csv())?;
            if let Some(r) = &report {
                r.write(dir, &format!("report_epoch_{}", trainer.epoch))?;
            }
        }
        epochs.push(EpochReport {
            epoch: trainer.epoch,
            mean_loss,
            report,
        });
    }
    trainer.verify_frozen()?;
    let best_epoch = epochs
        .iter()
        .filter_map(|e| Some((e.epoch, e.report.as_ref()?.mean.image_auroc?)))
        .fold(None, |best: Option<(usize, f64)>, (e, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((e, v)),
        })
        .map(|(e, _)| e);
    if let Some(dir) = run_dir {
        checkpoint::save(&trainer, &dir.join("final.ckpt"))?;
        let summary = serde_json::json!({
            "epochs": epochs.iter().map(|e| serde_json::json!({
                "epoch": e.epoch,
                "mean_loss": e.mean_loss,
                "image_auroc": e.report.as_ref().and_then(|r| r.mean.image_auroc),
                "pixel_auroc": e.report.as_ref().and_then(|r| r.mean.pixel_auroc),
            })).collect::<Vec<_>>(),
            "best_epoch": best_epoch,
            "final_epoch": trainer.epoch,
            "backbone_sha256": trainer.backbone_hash(),
        });
        write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(RunOutcome {
        trainer,
        epochs,
        best_epoch,
    })
}

/// Fresh model on `backbone`, trained on the corpus train split.
pub fn train_on_corpus(
    config: &RunConfig,
    backbone: &crate::encoders::BackboneWeights,
    corpus: &Corpus,
    eval: Option<&[EvalTask]>,
    run_dir: Option<&Path>,
) -> Result<RunOutcome> {
    let model = DapoModel::new(
        config.clone(),
        Vocabulary::builtin(),
        backbone.clone(),
        &corpus.train.defects,
    )?;
    train_run(Trainer::new(model), &corpus.train, eval.map(|t| (&corpus.target, t)), run_dir)
}
