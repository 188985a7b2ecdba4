use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_text, RocPoint};
use crate::error::{Error, Result};

/// Image- and pixel-level metrics for one object class. Metrics that are
/// undefined for the class (single-class ground truth) are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub object: String,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub image_f1: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
}

impl ObjectMetrics {
    fn entries(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("image_auroc", self.image_auroc),
            ("image_ap", self.image_ap),
            ("image_f1", self.image_f1),
            ("pixel_auroc", self.pixel_auroc),
            ("aupro", self.aupro),
        ]
    }

    /// Mean over objects of each metric, skipping undefined entries.
    pub fn mean(name: &str, objects: &[ObjectMetrics]) -> ObjectMetrics {
        let avg = |f: fn(&ObjectMetrics) -> Option<f64>| {
            let v: Vec<f64> = objects.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        ObjectMetrics {
            object: name.to_string(),
            image_auroc: avg(|o| o.image_auroc),
            image_ap: avg(|o| o.image_ap),
            image_f1: avg(|o| o.image_f1),
            pixel_auroc: avg(|o| o.pixel_auroc),
            aupro: avg(|o| o.aupro),
        }
    }
}

/// One row of the multi-type table: channel 0 is `normal`, then one row per defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub aupro_fpr_limit: f64,
    pub objects: Vec<ObjectMetrics>,
    pub mean: ObjectMetrics,
    pub classes: Vec<ClassMetrics>,
    pub macro_auroc: Option<f64>,
    pub macro_ap: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Image-level ROC over the whole split.
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(task: &str, aupro_fpr_limit: f64, objects: Vec<ObjectMetrics>) -> Self {
        let mean = ObjectMetrics::mean("mean", &objects);
        MetricsReport {
            task: task.to_string(),
            aupro_fpr_limit,
            objects,
            mean,
            ..Default::default()
        }
    }

    /// Attaches the multi-type table and fills the macro averages.
    pub fn with_classes(mut self, classes: Vec<ClassMetrics>) -> Self {
        let avg = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.macro_auroc = avg(classes.iter().filter_map(|c| c.auroc).collect());
        self.macro_ap = avg(classes.iter().filter_map(|c| c.ap).collect());
        self.macro_f1 = avg(classes.iter().map(|c| c.f1).collect());
        self.classes = classes;
        self
    }

    /// Every (scope, metric, value) triple, the flat form used for CSV.
    pub fn rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = Vec::new();
        for o in self.objects.iter().chain(std::iter::once(&self.mean)) {
            for (name, v) in o.entries() {
                if let Some(v) = v {
                    rows.push((o.object.clone(), name.to_string(), v));
                }
            }
        }
        for c in &self.classes {
            let scope = format!("class:{}", c.class);
            for (name, v) in [("auroc", c.auroc), ("ap", c.ap), ("f1", Some(c.f1))] {
                if let Some(v) = v {
                    rows.push((scope.clone(), name.to_string(), v));
                }
            }
        }
        for (name, v) in [
            ("macro_auroc", self.macro_auroc),
            ("macro_ap", self.macro_ap),
            ("macro_f1", self.macro_f1),
        ] {
            if let Some(v) = v {
                rows.push(("classes".into(), name.to_string(), v));
            }
        }
        rows
    }

    /// Checks that every reported value lies in [0, 1].
    pub fn validate(&self) -> Result<()> {
        for (scope, metric, v) in self.rows() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Metric(format!("{scope}/{metric} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        w.write_record(["scope", "metric", "value"]).map_err(csv_err)?;
        for (scope, metric, v) in self.rows() {
            w.write_record([scope, metric, format!("{v}")]).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Metric(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.json`, `<stem>.csv` and, when present, `<stem>_roc.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let mut out = vec![dir.join(format!("{stem}.json")), dir.join(format!("{stem}.csv"))];
        write_text(&out[0], &self.to_json()?)?;
        write_text(&out[1], &self.to_csv()?)?;
        if !self.roc.is_empty() {
            let path = dir.join(format!("{stem}_roc.csv"));
            write_text(&path, &roc_csv(&self.roc))?;
            out.push(path);
        }
        Ok(out)
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    s
}
