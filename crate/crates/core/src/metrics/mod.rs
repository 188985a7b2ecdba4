//! Ranking, overlap and classification metrics for anomaly detection and
//! segmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod report;

pub use report::{roc_csv, ClassMetrics, MetricsReport, ObjectMetrics};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Scores paired with binary ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn from_u8(scores: Vec<f64>, labels: &[u8]) -> Result<Self> {
        ScoredSet::new(scores, labels.iter().map(|&l| l != 0).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (p, n) = (self.positives(), self.negatives());
        if p == 0 || n == 0 {
            return Err(Error::Metric(format!(
                "need both classes, got {p} positives and {n} negatives"
            )));
        }
        Ok((p, n))
    }

    /// Groups of tied scores in descending score order, as (score, positives, negatives).
    fn descending_groups(&self) -> Vec<(f64, usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(f64, usize, usize)> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            match groups.last_mut() {
                Some(g) if g.0 == s => {}
                _ => groups.push((s, 0, 0)),
            }
            let g = groups.last_mut().expect("group pushed above");
            if self.labels[i] {
                g.1 += 1;
            } else {
                g.2 += 1;
            }
        }
        groups
    }
}

/// Mann-Whitney AUROC with midranks, so tied pairs count one half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.require_both()?;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && s.scores[idx[end + 1]] == s.scores[idx[start]] {
            end += 1;
        }
        let midrank = (start + end + 2) as f64 / 2.0;
        let pos = idx[start..=end].iter().filter(|&&i| s.labels[i]).count();
        rank_sum += midrank * pos as f64;
        start = end + 1;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Step-wise average precision over a descending sweep with tied scores grouped.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::Metric("average precision needs a positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, gp, gn) in s.descending_groups() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += gp as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value are predicted positive.
    pub threshold: f64,
}

/// ROC points from (0, 0) to (1, 1), one per distinct score.
pub fn roc_curve(s: &ScoredSet) -> Result<Vec<RocPoint>> {
    let (p, n) = s.require_both()?;
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (score, gp, gn) in s.descending_groups() {
        tp += gp;
        fp += gn;
        pts.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: score,
        });
    }
    Ok(pts)
}

/// Trapezoid area under a piecewise-linear curve given as (x, y) points.
pub fn trapezoid(points: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let mut area = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for (x, y) in points {
        if let Some((px, py)) = prev {
            area += (x - px) * (y + py) / 2.0;
        }
        prev = Some((x, y));
    }
    area
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.true_pos, self.false_pos, self.false_neg)
    }
}

/// Confusion counts with `score >= threshold` predicted positive.
pub fn confusion_at(s: &ScoredSet, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&score, &label) in s.scores.iter().zip(&s.labels) {
        match (score >= threshold, label) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    c
}

/// 2PR/(P+R), defined as 0 when the class is never predicted and never present.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-class one-vs-rest F1 for integer class predictions.
pub fn per_class_f1(pred: &[usize], target: &[usize], classes: usize) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "{} predictions but {} targets",
            pred.len(),
            target.len()
        )));
    }
    if classes == 0 {
        return Err(Error::Metric("F1 needs at least one class".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p >= classes || t >= classes {
            return Err(Error::Metric(format!(
                "class index {} out of range for {classes} classes",
                p.max(t)
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok((0..classes)
        .map(|k| f1_from_counts(tp[k], fp[k], fn_[k]))
        .collect())
}

/// Unweighted mean of per-class F1.
pub fn f1_macro(pred: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    let f = per_class_f1(pred, target, classes)?;
    Ok(f.iter().sum::<f64>() / classes as f64)
}

/// Labels connected foreground regions with 8-connectivity. Background is 0,
/// regions are numbered from 1 in raster order of their first pixel.
pub fn label_regions(mask: &[bool], width: usize) -> Result<(Vec<usize>, usize)> {
    if width == 0 || mask.len() % width != 0 {
        return Err(Error::dim(format!(
            "mask of {} pixels is not a multiple of width {width}",
            mask.len()
        )));
    }
    let height = mask.len() / width;
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let mut join = |j: usize| {
                if mask[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            };
            if x > 0 {
                join(i - 1);
            }
            if y > 0 {
                join(i - width);
                if x > 0 {
                    join(i - width - 1);
                }
                if x + 1 < width {
                    join(i - width + 1);
                }
            }
        }
    }
    let mut labels = vec![0usize; mask.len()];
    let mut ids = vec![0usize; mask.len()];
    let mut count = 0;
    for i in 0..mask.len() {
        if mask[i] {
            let r = find(&mut parent, i);
            if ids[r] == 0 {
                count += 1;
                ids[r] = count;
            }
            labels[i] = ids[r];
        }
    }
    Ok((labels, count))
}

/// A point of the per-region-overlap curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProPoint {
    pub fpr: f64,
    pub pro: f64,
}

/// Per-region overlap against global false-positive rate, one point per
/// distinct score, starting at (0, 0). Regions are the 8-connected
/// components of each mask.
pub fn pro_curve(maps: &[&[f64]], masks: &[&[bool]], width: usize) -> Result<Vec<ProPoint>> {
    if maps.len() != masks.len() {
        return Err(Error::dim(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut sizes: Vec<usize> = Vec::new();
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.len() {
            return Err(Error::dim(format!(
                "map of {} pixels vs mask of {}",
                map.len(),
                mask.len()
            )));
        }
        let (labels, count) = label_regions(mask, width)?;
        let base = sizes.len();
        sizes.resize(base + count, 0);
        for (&score, &label) in map.iter().zip(&labels) {
            if !score.is_finite() {
                return Err(Error::Metric(format!("non-finite score {score}")));
            }
            if label > 0 {
                sizes[base + label - 1] += 1;
                pixels.push((score, Some(base + label - 1)));
            } else {
                pixels.push((score, None));
            }
        }
    }
    if sizes.is_empty() {
        return Err(Error::Metric("no anomalous pixels in the whole set".into()));
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if negatives == 0 {
        return Err(Error::Metric("no normal pixels in the whole set".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let regions = sizes.len() as f64;
    let mut overlap = 0.0;
    let mut fp = 0usize;
    let mut curve = vec![ProPoint { fpr: 0.0, pro: 0.0 }];
    let mut i = 0;
    while i < pixels.len() {
        let score = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == score {
            match pixels[i].1 {
                Some(r) => overlap += 1.0 / sizes[r] as f64,
                None => fp += 1,
            }
            i += 1;
        }
        curve.push(ProPoint {
            fpr: fp as f64 / negatives as f64,
            pro: overlap / regions,
        });
    }
    Ok(curve)
}

/// Area under a curve up to `limit` on the x axis, normalized by `limit`.
/// The curve is linearly interpolated at the cut.
pub fn normalized_area_to(points: &[(f64, f64)], limit: f64) -> Result<f64> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(Error::Metric(format!("FPR limit {limit} outside (0, 1]")));
    }
    let mut clipped = Vec::with_capacity(points.len());
    for (k, &(x, y)) in points.iter().enumerate() {
        if x <= limit {
            clipped.push((x, y));
            continue;
        }
        if let Some(&(px, py)) = k.checked_sub(1).map(|j| &points[j]) {
            if px < limit {
                let t = (limit - px) / (x - px);
                clipped.push((limit, py + t * (y - py)));
            }
        }
        break;
    }
    Ok(trapezoid(clipped) / limit)
}

/// Area under the per-region-overlap curve up to `fpr_limit`, normalized to [0, 1].
pub fn aupro(maps: &[&[f64]], masks: &[&[bool]], width: usize, fpr_limit: f64) -> Result<f64> {
    let curve = pro_curve(maps, masks, width)?;
    let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.fpr, p.pro)).collect();
    normalized_area_to(&pts, fpr_limit)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
