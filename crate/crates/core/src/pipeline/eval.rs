use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    binary_anomaly_map, image_score, label_argmax, multilabel_probs, upsample_matrix, SimilarityMapSet,
};
use crate::data::{load_image, save_gray, save_mask, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{
    aupro, auroc, average_precision, confusion_at, per_class_f1, roc_curve, write_text, ClassMetrics,
    MetricsReport, ObjectMetrics, ScoredSet,
};
use crate::numerics::{Graph, Tensor};

use super::DapoModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    BinaryAd,
    BinaryAs,
    MultitypeAs,
}

impl EvalTask {
    pub const ALL: [EvalTask; 3] = [EvalTask::BinaryAd, EvalTask::BinaryAs, EvalTask::MultitypeAs];

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::BinaryAd => "binary_ad",
            EvalTask::BinaryAs => "binary_as",
            EvalTask::MultitypeAs => "multitype_as",
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (binary_ad, binary_as, multitype_as)")))
    }
}

/// Everything the model says about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Unit global image embedding.
    pub embedding: Vec<f64>,
    /// `[normal, abnormal]` global probabilities.
    pub global: [f64; 2],
    /// Fused image-level anomaly score.
    pub score: f64,
    /// `H x W` binary anomaly map in [0, 1].
    pub anomaly_map: Tensor,
    /// `(K+1) x HW` stage-mean class probabilities at image resolution.
    pub class_probs: Tensor,
    /// Per-pixel class ids, argmax of the stage maps.
    pub class_labels: Vec<u8>,
    /// One sigmoid probability per defect.
    pub multilabel: Vec<f64>,
    /// Stage maps on the patch grid.
    pub maps: SimilarityMapSet,
}

/// Run the frozen model over `images` in evaluation batches.
pub fn predict(model: &DapoModel, images: &[&Image]) -> Result<Vec<Prediction>> {
    let cfg = &model.config.encoder;
    let (grid, n) = (cfg.grid(), cfg.num_patches());
    let channels = 1 + model.bank.num_defects();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(model.config.eval_batch_size) {
        let g = Graph::new();
        let bm = model.bind(&g, false);
        let fwd = model.forward(&g, &bm, chunk)?;
        let global = g.value(g.softmax(fwd.logits, 1)?);
        let emb = g.value(fwd.global);
        let z_n = g.value(fwd.protos.normal);
        let z_d = g.value(fwd.protos.defects);
        let stage_vals: Vec<Tensor> = fwd.stage_maps.iter().map(|&m| g.value(m)).collect();
        for (b, img) in chunk.iter().enumerate() {
            let (h, w) = (img.height(), img.width());
            let maps = stage_vals
                .iter()
                .map(|m| {
                    let rows = &m.data()[b * n * channels..(b + 1) * n * channels];
                    let mut t = vec![0.0; channels * n];
                    for p in 0..n {
                        for c in 0..channels {
                            t[c * n + p] = rows[p * channels + c];
                        }
                    }
                    Tensor::matrix(channels, n, t)
                })
                .collect::<Result<Vec<_>>>()?;
            let set = SimilarityMapSet::new(maps, grid)?;
            let anomaly_map = binary_anomaly_map(&set, h, w)?;
            let probs = [global.get2(b, 0), global.get2(b, 1)];
            let class_probs = stage_mean_upsampled(&set, h, w)?;
            let class_labels = label_argmax(&class_probs)?;
            out.push(Prediction {
                embedding: emb.row(b).to_vec(),
                global: probs,
                score: image_score(probs, &anomaly_map, model.config.beta)?,
                multilabel: multilabel_probs(emb.row(b), z_n.data(), &z_d, model.config.temperature)?,
                anomaly_map,
                class_probs,
                class_labels,
                maps: set,
            });
        }
    }
    Ok(out)
}

fn stage_mean_upsampled(set: &SimilarityMapSet, h: usize, w: usize) -> Result<Tensor> {
    let c = set.channels();
    let n = set.grid * set.grid;
    let mut mean = vec![0.0; c * n];
    for m in &set.maps {
        for (a, v) in mean.iter_mut().zip(m.data()) {
            *a += v / set.maps.len() as f64;
        }
    }
    let up = upsample_matrix(set.grid, set.grid, h, w)?;
    let g = Graph::new();
    Ok(g.value(g.matmul(g.constant(Tensor::matrix(c, n, mean)?), g.constant(up))?))
}

fn defined(r: Result<f64>) -> Option<f64> {
    r.ok()
}

/// Metrics for the requested tasks over precomputed predictions.
pub fn evaluate_predictions(
    split: &Split,
    preds: &[Prediction],
    tasks: &[EvalTask],
    fpr_limit: f64,
) -> Result<MetricsReport> {
    if preds.len() != split.samples.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} samples",
            preds.len(),
            split.samples.len()
        )));
    }
    let channels = split.channels();
    if let Some(p) = preds.first() {
        if p.class_probs.shape()[0] != channels {
            return Err(Error::dim(format!(
                "predictions carry {} channels, split has {channels}",
                p.class_probs.shape()[0]
            )));
        }
    }
    let mut objects = Vec::new();
    for object in split.objects() {
        let idx: Vec<usize> = (0..split.samples.len())
            .filter(|&i| split.samples[i].object == object)
            .collect();
        let mut om = ObjectMetrics {
            object: object.clone(),
            ..Default::default()
        };
        if tasks.contains(&EvalTask::BinaryAd) {
            let s = ScoredSet::from_u8(
                idx.iter().map(|&i| preds[i].score).collect(),
                &idx.iter().map(|&i| split.samples[i].label).collect::<Vec<_>>(),
            )?;
            om.image_auroc = defined(auroc(&s));
            om.image_ap = defined(average_precision(&s));
            om.image_f1 = Some(confusion_at(&s, 0.5).f1());
        }
        if tasks.contains(&EvalTask::BinaryAs) {
            let scores: Vec<f64> = idx.iter().flat_map(|&i| preds[i].anomaly_map.data().to_vec()).collect();
            let labels: Vec<bool> = idx
                .iter()
                .flat_map(|&i| split.samples[i].mask.iter().map(|&m| m != 0))
                .collect();
            om.pixel_auroc = defined(auroc(&ScoredSet::new(scores, labels)?));
            let masks: Vec<Vec<bool>> = idx
                .iter()
                .map(|&i| split.samples[i].mask.iter().map(|&m| m != 0).collect())
                .collect();
            let maps: Vec<&[f64]> = idx.iter().map(|&i| preds[i].anomaly_map.data()).collect();
            let mask_refs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
            let width = split.samples[idx[0]].image.width();
            om.aupro = defined(aupro(&maps, &mask_refs, width, fpr_limit));
        }
        objects.push(om);
    }
    let task_name = tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join("+");
    let mut report = MetricsReport::new(&task_name, fpr_limit, objects);
    if tasks.contains(&EvalTask::BinaryAd) {
        let s = ScoredSet::from_u8(
            preds.iter().map(|p| p.score).collect(),
            &split.samples.iter().map(|s| s.label).collect::<Vec<_>>(),
        )?;
        report.roc = roc_curve(&s).unwrap_or_default();
    }
    if tasks.contains(&EvalTask::MultitypeAs) {
        let pred_labels: Vec<usize> = preds
            .iter()
            .flat_map(|p| p.class_labels.iter().map(|&c| c as usize))
            .collect();
        let target: Vec<usize> = split
            .samples
            .iter()
            .flat_map(|s| s.mask.iter().map(|&c| c as usize))
            .collect();
        let f1 = per_class_f1(&pred_labels, &target, channels)?;
        let names: Vec<String> = std::iter::once("normal".to_string())
            .chain(split.defects.iter().cloned())
            .collect();
        let mut classes = Vec::with_capacity(channels);
        for (c, name) in names.iter().enumerate() {
            let scores: Vec<f64> = preds
                .iter()
                .flat_map(|p| p.class_probs.data()[c * p.class_labels.len()..(c + 1) * p.class_labels.len()].to_vec())
                .collect();
            let labels: Vec<bool> = target.iter().map(|&t| t == c).collect();
            let support = labels.iter().filter(|l| **l).count();
            let s = ScoredSet::new(scores, labels)?;
            classes.push(ClassMetrics {
                class: name.clone(),
                auroc: defined(auroc(&s)),
                ap: defined(average_precision(&s)),
                f1: f1[c],
                support,
            });
        }
        report = report.with_classes(classes);
    }
    report.notes.push(format!(
        "AUPRO integrates per-region overlap up to FPR {fpr_limit} (a convention, not a value from the method description)"
    ));
    report.validate()?;
    Ok(report)
}

/// Register the split's defect list on a copy of the model, predict, score.
pub fn evaluate(model: &DapoModel, split: &Split, tasks: &[EvalTask]) -> Result<MetricsReport> {
    let m = model.for_defects(&split.defects)?;
    let images: Vec<&Image> = split.samples.iter().map(|s| &s.image).collect();
    let preds = predict(&m, &images)?;
    evaluate_predictions(split, &preds, tasks, m.config.aupro_fpr_limit)
}

/// Per-image inference record written next to the maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub image: String,
    pub score: f64,
    pub global_abnormal: f64,
    pub defects: Vec<String>,
    pub multilabel: Vec<f64>,
    pub anomaly_map_png: String,
    pub anomaly_map_csv: String,
    pub type_mask_png: String,
}

#[derive(Clone, Debug, Default)]
pub struct InferenceSummary {
    pub written: Vec<InferenceRecord>,
    pub failures: Vec<(PathBuf, String)>,
}

fn map_csv(map: &Tensor) -> String {
    let (h, w) = map.rows_cols();
    let mut s = String::new();
    for y in 0..h {
        let row: Vec<String> = (0..w).map(|x| format!("{}", map.get2(y, x))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Image files directly under `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Score each input image and write its maps, type mask and JSON record.
/// Unreadable or wrongly sized images are reported and skipped.
pub fn infer(model: &DapoModel, inputs: &[PathBuf], defects: &[String], out_dir: &Path) -> Result<InferenceSummary> {
    let m = model.for_defects(defects)?;
    let channels = 1 + m.bank.num_defects();
    let size = m.config.encoder.image_size;
    let mut summary = InferenceSummary::default();
    for path in inputs {
        let image = match load_image(path) {
            Ok(img) if img.height() == size && img.width() == size => img,
            Ok(img) => {
                summary.failures.push((
                    path.clone(),
                    format!("image is {}x{}, model expects {size}x{size}", img.height(), img.width()),
                ));
                continue;
            }
            Err(e) => {
                summary.failures.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let pred = predict(&m, &[&image])?.remove(0);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let map_png = format!("{stem}_anomaly.png");
        let map_csv_name = format!("{stem}_anomaly.csv");
        let types_png = format!("{stem}_types.png");
        save_gray(pred.anomaly_map.data(), size, size, &out_dir.join(&map_png))?;
        write_text(&out_dir.join(&map_csv_name), &map_csv(&pred.anomaly_map))?;
        save_mask(&pred.class_labels, size, size, channels, &out_dir.join(&types_png))?;
        let record = InferenceRecord {
            image: path.display().to_string(),
            score: pred.score,
            global_abnormal: pred.global[1],
            defects: m.bank.defect_names().to_vec(),
            multilabel: pred.multilabel.clone(),
            anomaly_map_png: map_png,
            anomaly_map_csv: map_csv_name,
            type_mask_png: types_png,
        };
        write_text(&out_dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(&record)?)?;
        summary.written.push(record);
    }
    Ok(summary)
}

/// Files written by [`export_embeddings`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub rows: usize,
}

/// Adapted last-stage patch embeddings of every sample followed by the
/// `K+1` state prototypes, as CSV matrices for external projection tools.
pub fn export_embeddings(model: &DapoModel, split: &Split, out_dir: &Path) -> Result<EmbeddingExport> {
    let m = model.for_defects(&split.defects)?;
    let cfg = &m.config.encoder;
    let (grid, n, ps) = (cfg.grid(), cfg.num_patches(), cfg.patch_size);
    let mut emb = String::new();
    let mut labels = String::from("row,kind,source,patch,class\n");
    let mut rows = 0usize;
    let push_row = |emb: &mut String, v: &[f64]| {
        let cells: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        emb.push_str(&cells.join(","));
        emb.push('\n');
    };
    let mut protos = None;
    for chunk in split.samples.chunks(m.config.eval_batch_size) {
        let g = Graph::new();
        let bm = m.bind(&g, false);
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let enc = crate::encoders::encode_images(&g, &bm.backbone.vision, &images, &bm.prefix.vision, cfg)?;
        let last = enc.taps.len() - 1;
        let adapted = g.value(crate::alignment::adapt_patches(
            &g,
            crate::encoders::tap_features(&g, &bm.backbone.vision, enc.taps[last])?,
            bm.adapters[last],
        )?);
        for (b, s) in chunk.iter().enumerate() {
            let width = s.image.width();
            for p in 0..n {
                push_row(&mut emb, adapted.row(b * n + p));
                let (gy, gx) = (p / grid, p % grid);
                let mut counts = vec![0usize; split.channels()];
                for dy in 0..ps {
                    for dx in 0..ps {
                        counts[s.mask[(gy * ps + dy) * width + gx * ps + dx] as usize] += 1;
                    }
                }
                let class = crate::alignment::argmax_low(counts.iter().map(|&c| c as f64));
                labels.push_str(&format!("{rows},patch,{},{p},{class}\n", s.name));
                rows += 1;
            }
        }
        if protos.is_none() {
            let pv = crate::prompts::embed_state_prototypes(
                &g,
                &m.bank,
                &m.vocab,
                bm.context,
                &bm.backbone.text,
                &bm.prefix.text,
                cfg,
            )?;
            protos = Some(g.value(g.concat_rows(&[pv.normal, pv.defects])?));
        }
    }
    let protos = match protos {
        Some(p) => p,
        None => crate::prompts::state_prototypes(
            &m.bank,
            &m.vocab,
            &m.backbone,
            Some(&m.prefix),
            cfg,
            crate::prompts::Aggregation::Mean,
            None,
            m.config.agg_temperature,
        )
        .and_then(|p| p.stacked())?,
    };
    let names: Vec<String> = std::iter::once("normal".to_string())
        .chain(m.bank.defect_names().iter().cloned())
        .collect();
    for (c, name) in names.iter().enumerate() {
        push_row(&mut emb, protos.row(c));
        labels.push_str(&format!("{rows},prototype,{name},,{c}\n"));
        rows += 1;
    }
    let out = EmbeddingExport {
        embeddings: out_dir.join("embeddings.csv"),
        labels: out_dir.join("labels.csv"),
        rows,
    };
    write_text(&out.embeddings, &emb)?;
    write_text(&out.labels, &labels)?;
    Ok(out)
}
