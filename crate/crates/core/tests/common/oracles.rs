//! Brute-force reference implementations, written independently of the
//! library kernels.

#![allow(dead_code)]

use std::collections::VecDeque;

use dapo_core::rng::RngHandle;

/// Pairwise AUROC: fraction of (positive, negative) pairs ranked correctly,
/// ties worth one half. Counted in half-units so the result is exact.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut halves = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                halves += 2;
            } else if scores[i] == scores[j] {
                halves += 1;
            }
        }
    }
    halves as f64 / 2.0 / (p as f64 * n as f64)
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

/// Average precision by recounting precision and recall at every distinct threshold.
pub fn ap_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|l| **l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(scores) {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1.0;
                if *l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

/// Macro F1 from a full confusion matrix.
pub fn f1_confusion_matrix(pred: &[usize], target: &[usize], classes: usize) -> f64 {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(target) {
        m[t][p] += 1;
    }
    let mut sum = 0.0;
    for k in 0..classes {
        let tp = m[k][k] as f64;
        let predicted: usize = (0..classes).map(|t| m[t][k]).sum();
        let actual: usize = m[k].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        sum += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    sum / classes as f64
}

/// Breadth-first 8-connected components; returns the pixel lists.
pub fn components(mask: &[bool], width: usize) -> Vec<Vec<usize>> {
    let height = mask.len() / width;
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// AUPRO by recomputing every region overlap and the FPR at each distinct threshold.
pub fn aupro_enumerate(maps: &[Vec<f64>], masks: &[Vec<bool>], width: usize, limit: f64) -> f64 {
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(m, mask)| components(mask, width).into_iter().map(move |c| (m, c)))
        .collect();
    let negatives: usize = masks.iter().map(|m| m.iter().filter(|v| !**v).count()).sum();
    let all: Vec<f64> = maps.iter().flatten().copied().collect();
    let mut curve = vec![(0.0, 0.0)];
    for t in distinct_desc(&all) {
        let mut pro = 0.0;
        for (m, comp) in &regions {
            let hit = comp.iter().filter(|&&i| maps[*m][i] >= t).count();
            pro += hit as f64 / comp.len() as f64;
        }
        pro /= regions.len() as f64;
        let mut fp = 0usize;
        for (map, mask) in maps.iter().zip(masks) {
            fp += map.iter().zip(mask).filter(|(s, m)| !**m && **s >= t).count();
        }
        curve.push((fp as f64 / negatives as f64, pro));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 > limit {
            (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
        } else {
            (x1, y1)
        };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / limit
}

/// A random scored set with both classes present. Half the instances draw
/// from a coarse grid so ties are common.
pub fn random_scored(rng: &mut RngHandle) -> (Vec<f64>, Vec<bool>) {
    let n = rng.index(4, 41);
    let coarse = rng.bernoulli(0.5);
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        if labels.iter().any(|l| *l) && labels.iter().any(|l| !*l) {
            let scores = (0..n)
                .map(|_| {
                    if coarse {
                        rng.index(0, 6) as f64 / 5.0
                    } else {
                        rng.uniform()
                    }
                })
                .collect();
            return (scores, labels);
        }
    }
}

/// Random maps and masks on an 8×8 grid with at least one anomalous and one
/// normal pixel overall.
pub fn random_maps(rng: &mut RngHandle) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let images = rng.index(1, 4);
    loop {
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..images {
            let mut mask = vec![false; 64];
            for _ in 0..rng.index(0, 4) {
                let (x, y) = (rng.index(0, 7), rng.index(0, 7));
                let (w, h) = (rng.index(1, 4), rng.index(1, 4));
                for yy in y..(y + h).min(8) {
                    for xx in x..(x + w).min(8) {
                        mask[yy * 8 + xx] = true;
                    }
                }
            }
            let map = mask
                .iter()
                .map(|&m| {
                    let v = rng.index(0, 10) as f64 / 9.0;
                    if m { (v + 0.3).min(1.0) } else { v }
                })
                .collect();
            maps.push(map);
            masks.push(mask);
        }
        let pos = masks.iter().flatten().any(|m| *m);
        let neg = masks.iter().flatten().any(|m| !*m);
        if pos && neg {
            return (maps, masks);
        }
    }
}

/// Scalar-loop focal loss on channel-major `pred` and one-hot `target`
/// (channels × pixels), averaged over pixels.
pub fn focal_scalar(pred: &[f64], target: &[f64], channels: usize, gamma: f64) -> f64 {
    let pixels = pred.len() / channels;
    let mut total = 0.0;
    for p in 0..pixels {
        let mut pt = 0.0;
        for c in 0..channels {
            pt += pred[c * pixels + p] * target[c * pixels + p];
        }
        let pt = pt.max(1e-12);
        total += -(1.0 - pt).max(0.0).powf(gamma) * pt.ln();
    }
    total / pixels as f64
}

/// Scalar-loop soft dice loss 1 − (2Σpt + ε)/(Σp + Σt + ε).
pub fn dice_scalar(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for i in 0..p.len() {
        inter += p[i] * t[i];
        sp += p[i];
        st += t[i];
    }
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}
