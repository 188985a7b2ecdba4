//! Procedural defect corpus with a controlled train/target shift.

pub mod io;
pub mod render;

pub use io::{
    list_split_images, load_captions, load_corpus, load_image, load_mask, load_sample, load_split, read_defect_list,
    save_captions, save_corpus, save_gray, save_image, save_mask, save_sample, save_split, write_defect_list,
};
pub use render::{
    dilate, render_defect, render_object, sample_object, DefectKind, Domain, ObjectParams, RenderedObject, Shape,
    Texture,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;
use crate::rng::RngHandle;

/// One image with its label map. `mask[p]` is the channel index of pixel
/// `p` in the split's defect list (0 = normal).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub name: String,
    pub image: Image,
    pub mask: Vec<u8>,
    pub label: u8,
    pub object: String,
    pub defects: Vec<String>,
}

impl SampleRecord {
    /// Channel-major one-hot mask, `channels x (H*W)`.
    pub fn one_hot(&self, channels: usize) -> Result<Tensor> {
        let n = self.mask.len();
        let mut t = Tensor::zeros(&[channels, n]);
        for (i, &c) in self.mask.iter().enumerate() {
            if c as usize >= channels {
                return Err(Error::Validation(format!(
                    "{}: mask channel {c} outside {channels} channels",
                    self.name
                )));
            }
            t.data_mut()[c as usize * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Check the label/mask/metadata invariants.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mask.len() != self.image.height() * self.image.width() {
            return Err(Error::Validation(format!("{}: mask size does not match image", self.name)));
        }
        if let Some(&c) = self.mask.iter().find(|&&c| c as usize >= channels) {
            return Err(Error::Validation(format!(
                "{}: mask channel {c} outside {channels} channels",
                self.name
            )));
        }
        let anomalous = self.mask.iter().any(|&c| c != 0);
        if anomalous != (self.label == 1) || self.label > 1 {
            return Err(Error::Validation(format!(
                "{}: label {} disagrees with mask (anomalous pixels present: {anomalous})",
                self.name, self.label
            )));
        }
        Ok(())
    }
}

/// A split: the ordered defect list that defines mask channels, and samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub defects: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl Split {
    pub fn channels(&self) -> usize {
        self.defects.len() + 1
    }

    pub fn objects(&self) -> Vec<String> {
        let mut v: Vec<String> = self.samples.iter().map(|s| s.object.clone()).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub name: String,
    pub image: Image,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Split,
    pub target: Split,
    pub captions: Vec<CaptionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub image_size: usize,
    pub shapes: Vec<Shape>,
    /// Defect types of the training split, in channel order.
    pub defects: Vec<DefectKind>,
    /// Extra defect types that appear only in the target split.
    pub unseen_defects: Vec<DefectKind>,
    pub train_count: usize,
    pub target_count: usize,
    pub caption_count: usize,
    pub anomaly_ratio: f64,
    /// Chance that an anomalous sample carries a second defect.
    pub multi_defect_prob: f64,
    pub train_domain: Domain,
    pub target_domain: Domain,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            image_size: 64,
            shapes: Shape::ALL.to_vec(),
            defects: vec![DefectKind::Scratch, DefectKind::Hole, DefectKind::Stain, DefectKind::Missing],
            unseen_defects: vec![DefectKind::Crack, DefectKind::Bent],
            train_count: 400,
            target_count: 200,
            caption_count: 1200,
            anomaly_ratio: 0.5,
            multi_defect_prob: 0.15,
            train_domain: Domain::train(),
            target_domain: Domain::target(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 16 {
            return fail(format!("image_size {} is too small", self.image_size));
        }
        if self.shapes.is_empty() || self.defects.is_empty() {
            return fail("need at least one shape and one defect".into());
        }
        if !(0.0..=1.0).contains(&self.anomaly_ratio) || !(0.0..=1.0).contains(&self.multi_defect_prob) {
            return fail("ratios must lie in [0, 1]".into());
        }
        let mut all = self.defects.clone();
        all.extend(&self.unseen_defects);
        let mut dedup = all.clone();
        dedup.sort_by_key(|d| d.name());
        dedup.dedup();
        if dedup.len() != all.len() {
            return fail("defect lists overlap or repeat (unseen defects must not be trained)".into());
        }
        let train: Vec<&str> = self.train_domain.palette.iter().map(|s| s.name.as_str()).collect();
        if self.target_domain.palette.iter().any(|s| train.contains(&s.name.as_str())) {
            return fail("train and target palettes must be disjoint".into());
        }
        if self.train_domain.palette.is_empty() || self.target_domain.palette.is_empty() {
            return fail("palettes must be non-empty".into());
        }
        Ok(())
    }

    pub fn train_defect_names(&self) -> Vec<String> {
        self.defects.iter().map(|d| d.name().to_string()).collect()
    }

    pub fn target_defect_names(&self) -> Vec<String> {
        self.defects
            .iter()
            .chain(&self.unseen_defects)
            .map(|d| d.name().to_string())
            .collect()
    }
}

/// Whether sample `i` is anomalous: exactly `floor(n * ratio)` of the first
/// `n` indices are, spread evenly.
pub fn is_anomalous_index(i: usize, ratio: f64) -> bool {
    ((i + 1) as f64 * ratio).floor() > (i as f64 * ratio).floor()
}

/// Object of sample `i`: cycles through the shapes with a shift of one per
/// full cycle, so every object sees both parities of `i` and hence both labels.
pub fn object_index(i: usize, objects: usize) -> usize {
    (i + i / objects) % objects
}

const OVERLAP_RETRIES: usize = 16;

fn make_sample(
    name: String,
    domain: &Domain,
    shape: Shape,
    defects: &[DefectKind],
    channel_of: &dyn Fn(DefectKind) -> u8,
    size: usize,
    rng: &mut RngHandle,
) -> Result<SampleRecord> {
    let params = sample_object(domain, shape, size, rng);
    let obj = render_object(&params, size);
    let mut image = obj.image.clone();
    let mut mask = vec![0u8; size * size];
    let floor = render::min_defect_pixels(size);
    for (n, &kind) in defects.iter().enumerate() {
        let earlier: Vec<u8> = defects[..n].iter().map(|&k| channel_of(k)).collect();
        for _ in 0..OVERLAP_RETRIES {
            let (next, changed) = render_defect(&obj, &image, kind, rng)?;
            let mut trial = mask.clone();
            for (m, c) in trial.iter_mut().zip(&changed) {
                if *c {
                    *m = channel_of(kind);
                }
            }
            if earlier.iter().all(|&ch| trial.iter().filter(|&&m| m == ch).count() >= floor) {
                mask = trial;
                image = next;
                break;
            }
        }
    }
    let mut present: Vec<String> = Vec::new();
    for &kind in defects {
        if mask.contains(&channel_of(kind)) && !present.iter().any(|p| p == kind.name()) {
            present.push(kind.name().to_string());
        }
    }
    let label = u8::from(mask.iter().any(|&c| c != 0));
    Ok(SampleRecord {
        name,
        image,
        mask,
        label,
        object: shape.name().to_string(),
        defects: present,
    })
}

fn make_split(
    spec: &CorpusSpec,
    name: &str,
    domain: &Domain,
    defects: &[DefectKind],
    count: usize,
    stream_base: u64,
) -> Result<Split> {
    let channel_of = |k: DefectKind| -> u8 {
        1 + defects.iter().position(|d| *d == k).expect("defect in split list") as u8
    };
    let mut samples = Vec::with_capacity(count);
    let mut anomalous_seen = 0usize;
    for i in 0..count {
        let mut rng = RngHandle::derive(spec.seed, stream_base + i as u64);
        let shape = spec.shapes[object_index(i, spec.shapes.len())];
        let mut kinds = Vec::new();
        if is_anomalous_index(i, spec.anomaly_ratio) {
            let primary = defects[anomalous_seen % defects.len()];
            anomalous_seen += 1;
            kinds.push(primary);
            if defects.len() > 1 && rng.bernoulli(spec.multi_defect_prob) {
                let others: Vec<DefectKind> = defects.iter().copied().filter(|d| *d != primary).collect();
                kinds.push(others[rng.index(0, others.len())]);
            }
        }
        samples.push(make_sample(
            format!("{name}_{i:04}"),
            domain,
            shape,
            &kinds,
            &channel_of,
            spec.image_size,
            &mut rng,
        )?);
    }
    Ok(Split {
        name: name.to_string(),
        defects: defects.iter().map(|d| d.name().to_string()).collect(),
        samples,
    })
}

/// Caption for a pretraining image.
pub fn caption_for(color: &str, shape: &str, defect: Option<&str>) -> String {
    match defect {
        None => format!("a photo of a normal {color} {shape}"),
        Some(d) => format!("a photo of a {color} {shape} with {d} anomaly"),
    }
}

/// Pretraining captions per rendered object: the clean render and up to two
/// defected variants of the same object.
pub const CAPTION_GROUP: usize = 3;

/// Caption pairs in groups of [`CAPTION_GROUP`] consecutive records that
/// share one object, so a batch holding a whole group can only tell its
/// members apart by their defect state.
fn make_captions(spec: &CorpusSpec) -> Result<Vec<CaptionRecord>> {
    let size = spec.image_size;
    let mut out = Vec::with_capacity(spec.caption_count);
    let mut group = 0u64;
    while out.len() < spec.caption_count {
        let mut rng = RngHandle::derive(spec.seed, 3_000_000 + group);
        group += 1;
        let shape = spec.shapes[rng.index(0, spec.shapes.len())];
        let params = sample_object(&spec.train_domain, shape, size, &mut rng);
        let obj = render_object(&params, size);
        let picks = rng.permutation(spec.defects.len());
        let variants = std::iter::once(None).chain(picks.iter().map(|&k| Some(spec.defects[k])));
        for kind in variants.take(CAPTION_GROUP) {
            if out.len() == spec.caption_count {
                break;
            }
            let (image, defect) = match kind {
                None => (obj.image.clone(), None),
                Some(kind) => (render_defect(&obj, &obj.image, kind, &mut rng)?.0, Some(kind.name())),
            };
            out.push(CaptionRecord {
                name: format!("caption_{:05}", out.len()),
                caption: caption_for(&params.color.name, shape.name(), defect),
                image,
            });
        }
    }
    Ok(out)
}

/// Generate both splits and the caption pairs. Pure in `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let target_defects: Vec<DefectKind> = spec.defects.iter().chain(&spec.unseen_defects).copied().collect();
    Ok(Corpus {
        train: make_split(spec, "train", &spec.train_domain, &spec.defects, spec.train_count, 1_000_000)?,
        target: make_split(spec, "target", &spec.target_domain, &target_defects, spec.target_count, 2_000_000)?,
        captions: make_captions(spec)?,
    })
}

/// Normalized RGB histogram with `bins` levels per channel.
pub fn color_histogram(image: &Image, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins * bins * bins];
    let idx = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    let px = image.data().chunks(3);
    let n = px.len() as f64;
    for p in px {
        h[(idx(p[0]) * bins + idx(p[1])) * bins + idx(p[2])] += 1.0 / n;
    }
    h
}

pub fn histogram_intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

fn mean_histogram(images: &[&Image], bins: usize) -> Vec<f64> {
    let mut acc = vec![0.0; bins * bins * bins];
    for img in images {
        for (a, h) in acc.iter_mut().zip(color_histogram(img, bins)) {
            *a += h / images.len() as f64;
        }
    }
    acc
}

/// Accuracy of a nearest-centroid color-histogram classifier that tells the
/// two image sets apart. Centroids come from even indices, accuracy is
/// measured on odd indices.
pub fn shift_witness(a: &[&Image], b: &[&Image]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation("shift witness needs two images per set".into()));
    }
    let bins = 4;
    fn even<'a>(s: &[&'a Image]) -> Vec<&'a Image> {
        s.iter().step_by(2).copied().collect()
    }
    fn odd<'a>(s: &[&'a Image]) -> Vec<&'a Image> {
        s.iter().skip(1).step_by(2).copied().collect()
    }
    let (ca, cb) = (mean_histogram(&even(a), bins), mean_histogram(&even(b), bins));
    let mut correct = 0usize;
    let mut total = 0usize;
    for (set, is_a) in [(odd(a), true), (odd(b), false)] {
        for img in set {
            let h = color_histogram(img, bins);
            let closer_a = histogram_intersection(&h, &ca) >= histogram_intersection(&h, &cb);
            correct += usize::from(closer_a == is_a);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests;
