//! Patch/text alignment: adapters, similarity maps, losses and inference maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const LOG_FLOOR: f64 = 1e-12;

/// One affine map per tap layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl AdapterStack {
    pub fn identity(stages: usize, width: usize) -> Self {
        Self {
            weights: (0..stages).map(|_| Tensor::eye(width)).collect(),
            biases: (0..stages).map(|_| Tensor::zeros(&[width])).collect(),
        }
    }

    /// Every stage starts as a copy of the given `d x d` map with zero bias.
    pub fn from_map(stages: usize, map: &Tensor) -> Result<Self> {
        let s = map.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim(format!("adapter init map must be square, got {s:?}")));
        }
        Ok(Self {
            weights: vec![map.clone(); stages],
            biases: vec![Tensor::zeros(&[s[0]]); stages],
        })
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Vec<(Var, Var)> {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        self.weights.iter().zip(&self.biases).map(|(w, b)| (leaf(w), leaf(b))).collect()
    }
}

/// Affine map of every patch row, then L2 normalization.
pub fn adapt_patches(g: &Graph, patches: Var, adapter: (Var, Var)) -> Result<Var> {
    let y = g.add(g.matmul(patches, adapter.0)?, adapter.1)?;
    g.l2_normalize(y)
}

/// Channel softmax of `cos(patch, prototype) / tau`: `N x (K+1)`.
pub fn similarity_maps(g: &Graph, adapted: Var, prototypes: Var, tau: f64) -> Result<Var> {
    let cos = g.matmul(adapted, g.transpose(prototypes)?)?;
    g.softmax(g.scale(cos, 1.0 / tau), 1)
}

/// `B x 2` probabilities `[normal, abnormal]` from cosine logits. `z_agg` has
/// one row, or one row per image.
pub fn global_score(g: &Graph, z_x: Var, z_n: Var, z_agg: Var, tau: f64) -> Result<Var> {
    g.softmax(global_logits(g, z_x, z_n, z_agg, tau)?, 1)
}

pub fn global_logits(g: &Graph, z_x: Var, z_n: Var, z_agg: Var, tau: f64) -> Result<Var> {
    let b = g.shape(z_x)[0];
    let agg = match g.shape(z_agg)[0] {
        1 => g.gather_rows(z_agg, &vec![0; b])?,
        r if r == b => z_agg,
        r => return Err(Error::dim(format!("{r} aggregate rows for {b} images"))),
    };
    let cos_n = g.matmul(z_x, g.transpose(z_n)?)?;
    let cos_a = g.reshape(g.sum_axis(g.mul(z_x, agg)?, 1)?, &[b, 1])?;
    let first = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0])?);
    let second = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0])?);
    let logits = g.add(g.matmul(cos_n, first)?, g.matmul(cos_a, second)?)?;
    Ok(g.scale(logits, 1.0 / tau))
}

/// Mean cross-entropy of `B x 2` logits against image labels.
pub fn global_loss(g: &Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape != [labels.len(), 2] {
        return Err(Error::dim(format!("logits {shape:?} for {} labels", labels.len())));
    }
    let mut onehot = Tensor::zeros(&[labels.len(), 2]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[2 * i + usize::from(y > 0)] = 1.0;
    }
    let picked = g.sum(g.mul(g.log_softmax(logits, 1)?, g.constant(onehot))?);
    Ok(g.scale(picked, -1.0 / labels.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalLossConfig {
    pub gamma: f64,
    /// Optional per-channel focal weights.
    pub class_weights: Option<Vec<f64>>,
    pub dice_eps: f64,
    /// Test fixture: scales the focal term's backward pass only.
    #[doc(hidden)]
    #[serde(skip)]
    pub focal_grad_fault: Option<f64>,
}

impl Default for LocalLossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            class_weights: None,
            dice_eps: 1.0,
            focal_grad_fault: None,
        }
    }
}

/// Mean over pixels of `-w_c (1 - p_t)^gamma log p_t`. `pred` and `target`
/// are channel-major `(K+1) x N`.
pub fn focal_loss(g: &Graph, pred: Var, target: &Tensor, gamma: f64, class_weights: Option<&[f64]>) -> Result<Var> {
    let shape = g.shape(pred);
    if shape.len() != 2 || target.shape() != shape {
        return Err(Error::dim(format!("focal pred {shape:?} vs target {:?}", target.shape())));
    }
    let (c, n) = (shape[0], shape[1]);
    let y = g.constant(target.clone());
    let p_t = g.clamp_min(g.sum_axis(g.mul(pred, y)?, 0)?, LOG_FLOOR);
    let modulator = g.pow(g.clamp_min(g.one_minus(p_t), 0.0), gamma)?;
    let mut per_pixel = g.mul(modulator, g.log(p_t)?)?;
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::dim(format!("{} class weights for {c} channels", w.len())));
        }
        let mut pw = vec![0.0; n];
        for (ch, wc) in w.iter().enumerate() {
            for (i, slot) in pw.iter_mut().enumerate() {
                *slot += wc * target.data()[ch * n + i];
            }
        }
        per_pixel = g.mul(per_pixel, g.constant(Tensor::vector(pw)))?;
    }
    Ok(g.neg(g.mean(per_pixel)?))
}

/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(g: &Graph, pred: Var, target: Var, eps: f64) -> Result<Var> {
    let inter = g.sum(g.mul(pred, target)?);
    let num = g.affine(inter, 2.0, eps);
    let den = g.affine(g.add(g.sum(pred), g.sum(target))?, 1.0, eps);
    Ok(g.one_minus(g.div(num, den)?))
}

/// One image: `(1/M) sum_i [Focal(S_i, Y) + Dice(S_i[0], Y[0]) + Dice(1 - S_i[0], 1 - Y[0])]`
/// over upsampled channel-major stage maps.
pub fn local_loss(g: &Graph, stages: &[Var], target: &Tensor, cfg: &LocalLossConfig) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::dim("local loss needs at least one stage"));
    }
    let n = target.shape().get(1).copied().unwrap_or(0);
    let y0 = Tensor::new(vec![1, n], target.data()[..n].to_vec())?;
    let y0_var = g.constant(y0.clone());
    let y0_inv = g.constant(Tensor::new(vec![1, n], y0.data().iter().map(|v| 1.0 - v).collect())?);
    let mut terms = Vec::with_capacity(stages.len());
    for &s in stages {
        let mut focal = focal_loss(g, s, target, cfg.gamma, cfg.class_weights.as_deref())?;
        if let Some(f) = cfg.focal_grad_fault {
            focal = g.scale_grad(focal, f);
        }
        let s0 = g.slice_rows(s, 0, 1)?;
        let d_normal = dice_loss(g, s0, y0_var, cfg.dice_eps)?;
        let d_anom = dice_loss(g, g.one_minus(s0), y0_inv, cfg.dice_eps)?;
        terms.push(g.add(g.add(focal, d_normal)?, d_anom)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, 1.0 / stages.len() as f64))
}

pub fn total_loss(g: &Graph, global: Var, local: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    g.add(global, g.scale(local, lambda))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub local: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Bilinear resampling matrix `(h*w) x (H*W)`, half-pixel centres
/// (align-corners false), edges clamped.
pub fn upsample_matrix(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h < h || out_w < w || h == 0 || w == 0 {
        return Err(Error::dim(format!("cannot resample {h}x{w} to {out_h}x{out_w}")));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let cols = out_h * out_w;
    let mut m = Tensor::zeros(&[h * w, cols]);
    let d = m.data_mut();
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let col = oy * out_w + ox;
            for (r, wt) in [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ] {
                d[r * cols + col] += wt;
            }
        }
    }
    Ok(m)
}

/// Resample an `h x w` map to `H x W`.
pub fn upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.ndim() != 2 {
        return Err(Error::dim(format!("upsample expects a 2-d map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let m = upsample_matrix(h, w, out_h, out_w)?;
    let g = Graph::new();
    let row = g.constant(map.clone().reshape(&[1, h * w])?);
    let out = g.matmul(row, g.constant(m))?;
    g.value(out).reshape(&[out_h, out_w])
}

/// Upsample `(K+1) x (h*w)` channel-major maps: `maps . U`.
pub fn upsample_channels(g: &Graph, maps: Var, up: Var) -> Result<Var> {
    g.matmul(maps, up)
}

/// Per-image, per-stage probability maps on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMapSet {
    /// One `(K+1) x (grid*grid)` channel-major tensor per stage.
    pub maps: Vec<Tensor>,
    pub grid: usize,
}

impl SimilarityMapSet {
    pub fn new(maps: Vec<Tensor>, grid: usize) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::dim("a map set needs at least one stage"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 || shape[1] != grid * grid {
            return Err(Error::dim(format!("stage map {shape:?} on a {grid}x{grid} grid")));
        }
        if maps.iter().any(|m| m.shape() != shape) {
            return Err(Error::dim("stage maps differ in shape"));
        }
        Ok(Self { maps, grid })
    }

    pub fn channels(&self) -> usize {
        self.maps[0].shape()[0]
    }
}

/// Mean over stages of `UP(1 - S_i[0])`: `H x W` in `[0, 1]`.
pub fn binary_anomaly_map(set: &SimilarityMapSet, out_h: usize, out_w: usize) -> Result<Tensor> {
    let n = set.grid * set.grid;
    let mut acc = vec![0.0; n];
    for m in &set.maps {
        for (a, v) in acc.iter_mut().zip(&m.data()[..n]) {
            *a += 1.0 - v;
        }
    }
    let inv = 1.0 / set.maps.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    let up = upsample(&Tensor::matrix(set.grid, set.grid, acc)?, out_h, out_w)?;
    let clamped = up.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(vec![out_h, out_w], clamped)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_low(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Stage-summed maps and their per-patch argmax labels on the grid.
pub fn multitype_mask(set: &SimilarityMapSet) -> Result<(Vec<u8>, Tensor)> {
    let c = set.channels();
    let n = set.grid * set.grid;
    let mut agg = Tensor::zeros(&[c, n]);
    for m in &set.maps {
        for (a, v) in agg.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let labels = label_argmax(&agg)?;
    Ok((labels, agg))
}

/// Per-pixel channel argmax of a `(K+1) x N` tensor.
pub fn label_argmax(agg: &Tensor) -> Result<Vec<u8>> {
    let (c, n) = (agg.shape()[0], agg.shape()[1]);
    if c > 256 {
        return Err(Error::dim(format!("{c} channels do not fit 8-bit labels")));
    }
    Ok((0..n)
        .map(|i| argmax_low((0..c).map(|ch| agg.data()[ch * n + i])) as u8)
        .collect())
}

/// Multi-type labels at image resolution: argmax of the upsampled stage sum.
pub fn multitype_mask_upsampled(set: &SimilarityMapSet, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
    let (_, agg) = multitype_mask(set)?;
    let c = set.channels();
    let up = upsample_matrix(set.grid, set.grid, out_h, out_w)?;
    let g = Graph::new();
    let full = g.value(g.matmul(g.constant(agg), g.constant(up))?);
    debug_assert_eq!(full.shape(), &[c, out_h * out_w]);
    label_argmax(&full)
}

/// `beta * s[1] + (1 - beta) * max(map)`.
pub fn image_score(s: [f64; 2], anomaly_map: &Tensor, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    let peak = anomaly_map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(beta * s[1] + (1.0 - beta) * peak)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sigmoid(cos(z_x, z_D[k]) / tau - cos(z_x, z_N) / tau)` for each defect.
pub fn multilabel_probs(z_x: &[f64], z_n: &[f64], z_d: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let (k, d) = z_d.rows_cols();
    if z_x.len() != d || z_n.len() != d {
        return Err(Error::dim(format!(
            "multilabel: image {} / normal {} vs prototypes {d}",
            z_x.len(),
            z_n.len()
        )));
    }
    let base = dot(z_x, z_n);
    Ok((0..k)
        .map(|i| {
            let logit = (dot(z_x, z_d.row(i)) - base) / tau;
            1.0 / (1.0 + (-logit).exp())
        })
        .collect())
}

#[cfg(test)]
mod tests;
