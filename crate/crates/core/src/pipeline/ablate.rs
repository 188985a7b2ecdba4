use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::encoders::BackboneWeights;
use crate::error::{Error, Result};

use super::{train_on_corpus, EvalTask, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Lambda,
    PromptLen,
    DepthNd,
    Progressive,
    Aggregation,
    Init,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::Lambda,
        AblationAxis::PromptLen,
        AblationAxis::DepthNd,
        AblationAxis::Progressive,
        AblationAxis::Aggregation,
        AblationAxis::Init,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Lambda => "lambda",
            AblationAxis::PromptLen => "prompt_len",
            AblationAxis::DepthNd => "depth_nd",
            AblationAxis::Progressive => "progressive",
            AblationAxis::Aggregation => "aggregation",
            AblationAxis::Init => "init",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = |what: &str| Error::Config(format!("{} value `{value}` is not {what}", self.name()));
        match self {
            AblationAxis::Lambda => cfg.lambda = value.parse().map_err(|_| bad("a number"))?,
            AblationAxis::PromptLen => cfg.context_len = value.parse().map_err(|_| bad("a token count"))?,
            AblationAxis::DepthNd => {
                cfg.encoder.text_prefix_depth = value.parse().map_err(|_| bad("a layer count"))?
            }
            AblationAxis::Progressive => {
                cfg.encoder.progressive = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(bad("on/off")),
                }
            }
            AblationAxis::Aggregation => cfg.aggregation = value.parse()?,
            AblationAxis::Init => cfg.init = value.parse()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation axis `{s}` (lambda, prompt_len, depth_nd, progressive, aggregation, init)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub trainable_parameters: Option<usize>,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
    pub error: Option<String>,
}

/// One full train + evaluate per value with a shared seed. A failing value
/// is recorded in its row and the sweep continues.
pub fn ablate(
    axis: AblationAxis,
    values: &[String],
    base: &RunConfig,
    backbone: &BackboneWeights,
    corpus: &Corpus,
) -> Vec<AblationRow> {
    values
        .iter()
        .map(|value| {
            let mut row = AblationRow {
                axis: axis.name().to_string(),
                value: value.clone(),
                trainable_parameters: None,
                image_auroc: None,
                image_ap: None,
                pixel_auroc: None,
                aupro: None,
                error: None,
            };
            let run = axis.apply(base, value).and_then(|cfg| {
                train_on_corpus(&cfg, backbone, corpus, Some(&[EvalTask::BinaryAd, EvalTask::BinaryAs]), None)
            });
            match run {
                Ok(out) => {
                    row.trainable_parameters = Some(out.trainer.model.trainable_parameter_count());
                    if let Some(r) = out.epochs.last().and_then(|e| e.report.as_ref()) {
                        row.image_auroc = r.mean.image_auroc;
                        row.image_ap = r.mean.image_ap;
                        row.pixel_auroc = r.mean.pixel_auroc;
                        row.aupro = r.mean.aupro;
                    }
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
    w.write_record([
        "axis",
        "value",
        "trainable_parameters",
        "image_auroc",
        "image_ap",
        "pixel_auroc",
        "aupro",
        "error",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.value.clone(),
            r.trainable_parameters.map(|p| p.to_string()).unwrap_or_default(),
            opt(r.image_auroc),
            opt(r.image_ap),
            opt(r.pixel_auroc),
            opt(r.aupro),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Metric(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
