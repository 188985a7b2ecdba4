//! Forward passes of the text and vision towers with per-layer prefix tokens.
//!
//! Many sequences are processed in one matrix. Each sequence owns a
//! contiguous run of rows, `[T tokens, prefix tokens]`, and attention never
//! crosses runs. Prefix tokens carry no positional embedding.

use super::config::EncoderConfig;
use super::vocab::Vocabulary;
use super::weights::{BoundBlock, BoundText, BoundVision};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::RngHandle;

const LN_EPS: f64 = 1e-5;

/// A run of text tokens: literal vocabulary ids or rows of a learnable block.
#[derive(Clone, Debug)]
pub enum TextPiece {
    Words(Vec<usize>),
    /// `n x width` rows spliced in as token embeddings.
    Embedded(Var),
}

/// One text input. The encoder adds the start and end tokens itself.
#[derive(Clone, Debug, Default)]
pub struct TextSequence {
    pub pieces: Vec<TextPiece>,
}

impl TextSequence {
    pub fn words(ids: Vec<usize>) -> Self {
        Self {
            pieces: vec![TextPiece::Words(ids)],
        }
    }
}

/// Learnable prefix blocks `U_j`, one `prefix_len x width` tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState {
    /// Text layers `1..=text_prefix_depth`.
    pub text: Vec<Tensor>,
    /// Every vision layer.
    pub vision: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct PrefixVars {
    pub text: Vec<Var>,
    pub vision: Vec<Var>,
}

impl PrefixState {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let block = || Tensor::zeros(&[cfg.prefix_len, cfg.width]);
        Self {
            text: (0..cfg.text_prefix_depth).map(|_| block()).collect(),
            vision: (0..cfg.depth).map(|_| block()).collect(),
        }
    }

    pub fn normal(cfg: &EncoderConfig, mean: f64, std: f64, rng: &mut RngHandle) -> Self {
        let mut block = || Tensor::randn(&[cfg.prefix_len, cfg.width], mean, std, rng);
        let text = (0..cfg.text_prefix_depth).map(|_| block()).collect();
        let vision = (0..cfg.depth).map(|_| block()).collect();
        Self { text, vision }
    }

    pub fn parameter_count(&self) -> usize {
        self.text.iter().chain(&self.vision).map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> PrefixVars {
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        PrefixVars {
            text: self.text.iter().map(leaf).collect(),
            vision: self.vision.iter().map(leaf).collect(),
        }
    }
}

/// The block injected at layer `j` (1-based): `U_1` at the first layer,
/// `(1 - alpha) U_j + alpha O_{j-1}` afterwards.
pub fn prefix_injection(g: &Graph, u: Var, o_prev: Option<Var>, alpha: f64, j: usize) -> Result<Var> {
    match j {
        0 => Err(Error::Config("prefix layers are numbered from 1".into())),
        1 => Ok(u),
        _ => {
            let o = o_prev.ok_or_else(|| Error::dim("layer > 1 needs the previous prefix output"))?;
            if g.shape(u) != g.shape(o) {
                return Err(Error::dim(format!(
                    "prefix block {:?} vs previous output {:?}",
                    g.shape(u),
                    g.shape(o)
                )));
            }
            let fresh = g.affine(u, 1.0 - alpha, 0.0);
            let carried = g.scale(o, alpha);
            g.add(fresh, carried)
        }
    }
}

/// Input tokens of layer `j` for one sequence: `[T_{j-1}, injected block]`.
pub fn progressive_prefix_step(
    g: &Graph,
    t_prev: Var,
    u: Var,
    o_prev: Option<Var>,
    alpha: f64,
    j: usize,
) -> Result<Var> {
    let block = prefix_injection(g, u, o_prev, alpha, j)?;
    g.concat_rows(&[t_prev, block])
}

fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn block_forward(g: &Graph, b: &BoundBlock, x: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
    let h = g.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let q = linear(g, h, b.wq, b.bq)?;
    let k = linear(g, h, b.wk, b.bk)?;
    let v = linear(g, h, b.wv, b.bv)?;
    let a = g.attention(q, k, v, heads, segments)?;
    let a = linear(g, a, b.wo, b.bo)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let h = g.gelu(linear(g, h, b.fc1, b.fc1_bias)?)?;
    let h = linear(g, h, b.fc2, b.fc2_bias)?;
    g.add(x, h)
}

struct LayerOutput {
    /// Token rows (no prefix rows) after the last layer.
    tokens: Var,
    /// Token rows after each tap layer, in tap order.
    taps: Vec<Var>,
    /// Prefix output rows `O_j` of every prefixed layer.
    prefix_outputs: Vec<Var>,
}

/// Run the block stack over `S` sequences whose token rows are stacked in `t0`.
/// `prefix[j-1]` is injected at layer `j` for `j <= prefix.len()`.
#[allow(clippy::too_many_arguments)]
fn run_layers(
    g: &Graph,
    blocks: &[BoundBlock],
    t0: Var,
    seq_lens: &[usize],
    prefix: &[Var],
    cfg: &EncoderConfig,
    taps: &[usize],
) -> Result<LayerOutput> {
    let s = seq_lens.len();
    let p = cfg.prefix_len;
    let t_total: usize = seq_lens.iter().sum();
    let plain_segments: Vec<(usize, usize)> = seq_lens
        .iter()
        .scan(0, |off, &l| {
            let seg = (*off, l);
            *off += l;
            Some(seg)
        })
        .collect();

    // Row bookkeeping for layers that carry prefix tokens.
    let mut interleave = Vec::with_capacity(t_total + s * p);
    let mut t_rows = Vec::with_capacity(t_total);
    let mut p_rows = Vec::with_capacity(s * p);
    let mut prefixed_segments = Vec::with_capacity(s);
    let mut start = 0;
    for (i, &(t_off, len)) in plain_segments.iter().enumerate() {
        interleave.extend(t_off..t_off + len);
        interleave.extend(t_total + i * p..t_total + (i + 1) * p);
        t_rows.extend(start..start + len);
        p_rows.extend(start + len..start + len + p);
        prefixed_segments.push((start, len + p));
        start += len + p;
    }
    let tile: Vec<usize> = (0..s).flat_map(|_| 0..p).collect();

    let mut tokens = t0;
    let mut o_prev: Option<Var> = None;
    let mut tap_out = Vec::with_capacity(taps.len());
    let mut prefix_outputs = Vec::new();
    for (idx, block) in blocks.iter().enumerate() {
        let j = idx + 1;
        if j <= prefix.len() && p > 0 {
            let u = g.gather_rows(prefix[idx], &tile)?;
            let injected = if cfg.progressive {
                prefix_injection(g, u, o_prev, cfg.alpha, j)?
            } else {
                u
            };
            let stacked = g.concat_rows(&[tokens, injected])?;
            let x = g.gather_rows(stacked, &interleave)?;
            let h = block_forward(g, block, x, cfg.heads, &prefixed_segments)?;
            tokens = g.gather_rows(h, &t_rows)?;
            let o = g.gather_rows(h, &p_rows)?;
            prefix_outputs.push(o);
            o_prev = Some(o);
        } else {
            tokens = block_forward(g, block, tokens, cfg.heads, &plain_segments)?;
            o_prev = None;
        }
        if taps.contains(&j) {
            tap_out.push(tokens);
        }
    }
    Ok(LayerOutput {
        tokens,
        taps: tap_out,
        prefix_outputs,
    })
}

/// Output of [`encode_text`].
#[derive(Clone, Debug)]
pub struct TextEncoding {
    /// `S x width`, unit rows in the shared space.
    pub embeddings: Var,
    pub prefix_outputs: Vec<Var>,
}

/// Encode `S` sequences; the pooled feature is read at each sequence's end
/// token. `prefix` is empty (no prefix) or holds `text_prefix_depth` blocks.
pub fn encode_text(
    g: &Graph,
    tower: &BoundText,
    vocab: &Vocabulary,
    seqs: &[TextSequence],
    prefix: &[Var],
    cfg: &EncoderConfig,
) -> Result<TextEncoding> {
    if seqs.is_empty() {
        return Err(Error::dim("no text to encode"));
    }
    if !prefix.is_empty() && prefix.len() != cfg.text_prefix_depth {
        return Err(Error::dim(format!(
            "{} text prefix blocks for prefix depth {}",
            prefix.len(),
            cfg.text_prefix_depth
        )));
    }
    let mut parts = Vec::new();
    let mut positions = Vec::new();
    let mut lens = Vec::with_capacity(seqs.len());
    let start = g.gather_rows(tower.token_embedding, &[vocab.start()])?;
    let end = g.gather_rows(tower.token_embedding, &[vocab.end()])?;
    for seq in seqs {
        let mut len = 1;
        parts.push(start);
        for piece in &seq.pieces {
            match piece {
                TextPiece::Words(ids) if ids.is_empty() => {}
                TextPiece::Words(ids) => {
                    parts.push(g.gather_rows(tower.token_embedding, ids)?);
                    len += ids.len();
                }
                TextPiece::Embedded(v) => {
                    let shape = g.shape(*v);
                    if shape.len() != 2 || shape[1] != cfg.width {
                        return Err(Error::dim(format!("embedded piece {shape:?}")));
                    }
                    parts.push(*v);
                    len += shape[0];
                }
            }
        }
        parts.push(end);
        len += 1;
        if len > cfg.context_length {
            return Err(Error::SequenceTooLong {
                len,
                max: cfg.context_length,
            });
        }
        positions.extend(0..len);
        lens.push(len);
    }
    let t0 = g.concat_rows(&parts)?;
    let pos = g.gather_rows(tower.position_embedding, &positions)?;
    let t0 = g.add(t0, pos)?;
    let out = run_layers(g, &tower.blocks, t0, &lens, prefix, cfg, &[])?;
    let pooled_rows: Vec<usize> = lens
        .iter()
        .scan(0, |off, &l| {
            *off += l;
            Some(*off - 1)
        })
        .collect();
    let pooled = g.gather_rows(out.tokens, &pooled_rows)?;
    let pooled = g.layer_norm(pooled, tower.ln_final_gain, tower.ln_final_bias, LN_EPS)?;
    let projected = g.matmul(pooled, tower.projection)?;
    Ok(TextEncoding {
        embeddings: g.l2_normalize(projected)?,
        prefix_outputs: out.prefix_outputs,
    })
}

/// Output of [`encode_images`].
#[derive(Clone, Debug)]
pub struct ImageEncoding {
    /// `B x width` unit global embeddings (class-token position).
    pub global: Var,
    /// One `B*grid^2 x width` matrix of raw patch tokens per tap layer.
    pub taps: Vec<Var>,
    pub prefix_outputs: Vec<Var>,
}

/// Tap tokens through the frozen post-LayerNorm, the space the vision
/// projection (and so each adapter's initial map) expects.
pub fn tap_features(g: &Graph, tower: &BoundVision, tap: Var) -> Result<Var> {
    g.layer_norm(tap, tower.ln_post_gain, tower.ln_post_bias, LN_EPS)
}

/// Flatten an image into `grid^2` rows of centred patch pixels.
pub fn patchify(image: &Image, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let s = cfg.image_size;
    if image.height() != s || image.width() != s {
        return Err(Error::dim(format!(
            "image is {}x{}, encoder expects {s}x{s}",
            image.height(),
            image.width()
        )));
    }
    let (ps, grid) = (cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 0..ps {
                for dx in 0..ps {
                    for c in image.pixel(gy * ps + dy, gx * ps + dx) {
                        out.push(c - 0.5);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Encode a batch of images. `prefix` is empty or holds `depth` blocks.
pub fn encode_images(
    g: &Graph,
    tower: &BoundVision,
    images: &[&Image],
    prefix: &[Var],
    cfg: &EncoderConfig,
) -> Result<ImageEncoding> {
    if images.is_empty() {
        return Err(Error::dim("no images to encode"));
    }
    if !prefix.is_empty() && prefix.len() != cfg.depth {
        return Err(Error::dim(format!(
            "{} vision prefix blocks for depth {}",
            prefix.len(),
            cfg.depth
        )));
    }
    let b = images.len();
    let n = cfg.num_patches();
    let mut pixels = Vec::with_capacity(b * n * cfg.patch_dim());
    for img in images {
        pixels.extend(patchify(img, cfg)?);
    }
    let patches = g.constant(Tensor::matrix(b * n, cfg.patch_dim(), pixels)?);
    let tokens = g.matmul(patches, tower.patch_weight)?;
    let tokens = g.add(tokens, tower.patch_bias)?;
    let stacked = g.concat_rows(&[tower.class_token, tokens])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|i| std::iter::once(0).chain(1 + i * n..1 + (i + 1) * n))
        .collect();
    let t0 = g.gather_rows(stacked, &order)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..n + 1).collect();
    let pos = g.gather_rows(tower.position_embedding, &positions)?;
    let t0 = g.add(t0, pos)?;
    let t0 = g.layer_norm(t0, tower.ln_pre_gain, tower.ln_pre_bias, LN_EPS)?;
    let lens = vec![n + 1; b];
    let out = run_layers(g, &tower.blocks, t0, &lens, prefix, cfg, &cfg.tap_layers)?;

    let cls_rows: Vec<usize> = (0..b).map(|i| i * (n + 1)).collect();
    let patch_rows: Vec<usize> = (0..b).flat_map(|i| i * (n + 1) + 1..(i + 1) * (n + 1)).collect();
    let cls = g.gather_rows(out.tokens, &cls_rows)?;
    let cls = g.layer_norm(cls, tower.ln_post_gain, tower.ln_post_bias, LN_EPS)?;
    let global = g.l2_normalize(g.matmul(cls, tower.projection)?)?;
    let taps = out
        .taps
        .into_iter()
        .map(|t| g.gather_rows(t, &patch_rows))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageEncoding {
        global,
        taps,
        prefix_outputs: out.prefix_outputs,
    })
}
