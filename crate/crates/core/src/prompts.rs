//! Hybrid prompts: shared learnable context blocks around literal defect words.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_text, BoundText, EncoderConfig, TextPiece, TextSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::RngHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Random,
    ClipSpace,
    Offset,
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "clip_space" => Ok(Self::ClipSpace),
            "offset" => Ok(Self::Offset),
            other => Err(Error::Config(format!(
                "unknown init strategy '{other}' (expected random, clip_space or offset)"
            ))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::ClipSpace => "clip_space",
            Self::Offset => "offset",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Attention,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!(
                "unknown aggregation '{other}' (expected mean or attention)"
            ))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Attention => "attention",
        })
    }
}

/// Which learnable block a context slot reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextKind {
    /// `V`: normal-state context.
    Normal,
    /// `W`: abnormal context shared by every defect type.
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptToken {
    /// Row `row` of the `E*l x d` block of `kind`.
    Context { kind: ContextKind, row: usize },
    Word(usize),
}

/// A token sequence mixing learnable embedding slots and vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedPrompt {
    pub tokens: Vec<PromptToken>,
}

impl MixedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Vocabulary view with the context slots shown as the `<ctx>` sentinel.
    pub fn sentinel_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let ctx = vocab.id(crate::encoders::vocab::CTX)?;
        Ok(self
            .tokens
            .iter()
            .map(|t| match t {
                PromptToken::Context { .. } => ctx,
                PromptToken::Word(id) => *id,
            })
            .collect())
    }

    /// Resolve the slots against bound `V` and `W`; runs of consecutive rows
    /// from the same block become one gathered piece.
    pub fn to_sequence(&self, g: &Graph, normal: Var, abnormal: Var) -> Result<TextSequence> {
        let mut pieces = Vec::new();
        let mut run: Option<(ContextKind, Vec<usize>)> = None;
        let mut words = Vec::new();
        let flush_ctx = |run: &mut Option<(ContextKind, Vec<usize>)>, pieces: &mut Vec<TextPiece>| -> Result<()> {
            if let Some((kind, rows)) = run.take() {
                let src = if kind == ContextKind::Normal { normal } else { abnormal };
                pieces.push(TextPiece::Embedded(g.gather_rows(src, &rows)?));
            }
            Ok(())
        };
        for tok in &self.tokens {
            match *tok {
                PromptToken::Context { kind, row } => {
                    if !words.is_empty() {
                        pieces.push(TextPiece::Words(std::mem::take(&mut words)));
                    }
                    match &mut run {
                        Some((k, rows)) if *k == kind => rows.push(row),
                        _ => {
                            flush_ctx(&mut run, &mut pieces)?;
                            run = Some((kind, vec![row]));
                        }
                    }
                }
                PromptToken::Word(id) => {
                    flush_ctx(&mut run, &mut pieces)?;
                    words.push(id);
                }
            }
        }
        flush_ctx(&mut run, &mut pieces)?;
        if !words.is_empty() {
            pieces.push(TextPiece::Words(words));
        }
        Ok(TextSequence { pieces })
    }
}

/// Learnable prompt state plus the literal defect vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    prompts_per_state: usize,
    context_len: usize,
    /// `V`, stored as `E*l x d`; block `e` is rows `e*l..(e+1)*l`.
    pub normal: Tensor,
    /// `W`, same layout, shared by all defect prompts.
    pub abnormal: Tensor,
    defect_names: Vec<String>,
    defect_tokens: Vec<Vec<usize>>,
}

impl PromptBank {
    pub fn new(
        normal: Tensor,
        abnormal: Tensor,
        prompts_per_state: usize,
        context_len: usize,
        defects: &[String],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if prompts_per_state == 0 {
            return Err(Error::Config("prompts per state must be positive".into()));
        }
        let rows = prompts_per_state * context_len;
        for (name, t) in [("normal", &normal), ("abnormal", &abnormal)] {
            if t.ndim() != 2 || t.shape()[0] != rows {
                return Err(Error::dim(format!(
                    "{name} context {:?}, expected {rows} rows",
                    t.shape()
                )));
            }
        }
        if normal.shape() != abnormal.shape() {
            return Err(Error::dim("normal and abnormal contexts differ in shape"));
        }
        let mut bank = Self {
            prompts_per_state,
            context_len,
            normal,
            abnormal,
            defect_names: Vec::new(),
            defect_tokens: Vec::new(),
        };
        for d in defects {
            bank.register_unseen_defect(vocab, d)?;
        }
        if bank.defect_names.is_empty() {
            return Err(Error::Config("at least one defect type is required".into()));
        }
        Ok(bank)
    }

    pub fn prompts_per_state(&self) -> usize {
        self.prompts_per_state
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn width(&self) -> usize {
        self.normal.shape()[1]
    }

    pub fn defect_names(&self) -> &[String] {
        &self.defect_names
    }

    pub fn num_defects(&self) -> usize {
        self.defect_names.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.normal.len() + self.abnormal.len()
    }

    fn context(&self, kind: ContextKind, e: usize) -> Result<impl Iterator<Item = PromptToken>> {
        if e >= self.prompts_per_state {
            return Err(Error::Config(format!(
                "prompt index {e} out of range for E = {}",
                self.prompts_per_state
            )));
        }
        let l = self.context_len;
        Ok((e * l..(e + 1) * l).map(move |row| PromptToken::Context { kind, row }))
    }

    /// `[W_1..W_l](block e) ++ <defect> ++ "anomaly" ++ "object"`.
    pub fn build_defect_prompt(&self, vocab: &Vocabulary, e: usize, defect: &str) -> Result<MixedPrompt> {
        let ids = match self.defect_names.iter().position(|d| d == defect) {
            Some(k) => self.defect_tokens[k].clone(),
            None => {
                vocab.tokenize(defect)?;
                return Err(Error::Config(format!("defect '{defect}' is not registered")));
            }
        };
        let mut tokens: Vec<PromptToken> = self.context(ContextKind::Abnormal, e)?.collect();
        tokens.extend(ids.into_iter().map(PromptToken::Word));
        tokens.push(PromptToken::Word(vocab.id("anomaly")?));
        tokens.push(PromptToken::Word(vocab.id("object")?));
        Ok(MixedPrompt { tokens })
    }

    /// `[V_1..V_l](block e) ++ "normal" ++ "object"`.
    pub fn build_normal_prompt(&self, vocab: &Vocabulary, e: usize) -> Result<MixedPrompt> {
        let mut tokens: Vec<PromptToken> = self.context(ContextKind::Normal, e)?.collect();
        tokens.push(PromptToken::Word(vocab.id("normal")?));
        tokens.push(PromptToken::Word(vocab.id("object")?));
        Ok(MixedPrompt { tokens })
    }

    /// Add a defect type by name only. No parameters are created.
    pub fn register_unseen_defect(&mut self, vocab: &Vocabulary, name: &str) -> Result<&[String]> {
        let ids = vocab.tokenize(name)?;
        if self.defect_names.iter().any(|d| d == name) {
            return Err(Error::DuplicateDefect(name.to_string()));
        }
        self.defect_names.push(name.to_string());
        self.defect_tokens.push(ids);
        Ok(&self.defect_names)
    }

    /// A copy restricted to (and ordered by) `defects`, registering any new names.
    pub fn with_defects(&self, vocab: &Vocabulary, defects: &[String]) -> Result<Self> {
        let mut out = Self {
            defect_names: Vec::new(),
            defect_tokens: Vec::new(),
            ..self.clone()
        };
        for d in defects {
            out.register_unseen_defect(vocab, d)?;
        }
        if out.defect_names.is_empty() {
            return Err(Error::Config("at least one defect type is required".into()));
        }
        Ok(out)
    }

    /// The normal prompts followed by each defect's prompts, `E` apiece.
    pub fn all_prompts(&self, vocab: &Vocabulary) -> Result<Vec<MixedPrompt>> {
        let e = self.prompts_per_state;
        let mut out = Vec::with_capacity(e * (1 + self.num_defects()));
        for i in 0..e {
            out.push(self.build_normal_prompt(vocab, i)?);
        }
        for d in &self.defect_names {
            for i in 0..e {
                out.push(self.build_defect_prompt(vocab, i, d)?);
            }
        }
        Ok(out)
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> (Var, Var) {
        if trainable {
            (g.param(self.normal.clone()), g.param(self.abnormal.clone()))
        } else {
            (g.constant(self.normal.clone()), g.constant(self.abnormal.clone()))
        }
    }
}

/// Draw `V` and `W` for a new bank.
#[allow(clippy::too_many_arguments)]
pub fn init_prompt_bank(
    strategy: InitStrategy,
    stats: (f64, f64),
    offset_mult: f64,
    prompts_per_state: usize,
    context_len: usize,
    width: usize,
    defects: &[String],
    vocab: &Vocabulary,
    rng: &mut RngHandle,
) -> Result<PromptBank> {
    let (mu, sigma) = stats;
    let (normal_dist, abnormal_dist) = match strategy {
        InitStrategy::Random => ((0.0, 1.0), (0.0, 1.0)),
        InitStrategy::ClipSpace | InitStrategy::Offset if !(sigma > 0.0) => {
            return Err(Error::Config(format!("{strategy} init needs sigma > 0, got {sigma}")));
        }
        InitStrategy::ClipSpace => ((mu, sigma), (mu, sigma)),
        InitStrategy::Offset => ((mu, sigma), (mu + offset_mult * sigma, sigma)),
    };
    let shape = [prompts_per_state * context_len, width];
    let normal = Tensor::randn(&shape, normal_dist.0, normal_dist.1, rng);
    let abnormal = Tensor::randn(&shape, abnormal_dist.0, abnormal_dist.1, rng);
    PromptBank::new(normal, abnormal, prompts_per_state, context_len, defects, vocab)
}

/// Graph handles of the state prototypes.
#[derive(Clone, Copy, Debug)]
pub struct PrototypeVars {
    /// `1 x d`.
    pub normal: Var,
    /// `K x d`.
    pub defects: Var,
}

/// Plain-value prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePrototypes {
    pub z_n: Tensor,
    pub z_d: Tensor,
    pub z_d_agg: Tensor,
}

impl StatePrototypes {
    /// All `K+1` prototypes, normal first.
    pub fn stacked(&self) -> Result<Tensor> {
        let d = self.z_n.len();
        let mut data = self.z_n.data().to_vec();
        data.extend_from_slice(self.z_d.data());
        Tensor::matrix(1 + self.z_d.rows_cols().0, d, data)
    }
}

/// Encode every prompt in one batch, average each state's `E` embeddings
/// and normalize the means.
pub fn embed_state_prototypes(
    g: &Graph,
    bank: &PromptBank,
    vocab: &Vocabulary,
    context: (Var, Var),
    text: &BoundText,
    prefix: &[Var],
    cfg: &EncoderConfig,
) -> Result<PrototypeVars> {
    let prompts = bank.all_prompts(vocab)?;
    let seqs = prompts
        .iter()
        .map(|p| p.to_sequence(g, context.0, context.1))
        .collect::<Result<Vec<_>>>()?;
    let enc = encode_text(g, text, vocab, &seqs, prefix, cfg)?;
    let e = bank.prompts_per_state();
    let states = 1 + bank.num_defects();
    let mut avg = Tensor::zeros(&[states, states * e]);
    for s in 0..states {
        for i in 0..e {
            avg.data_mut()[s * states * e + s * e + i] = 1.0 / e as f64;
        }
    }
    let means = g.matmul(g.constant(avg), enc.embeddings)?;
    let protos = g.l2_normalize(means)?;
    Ok(PrototypeVars {
        normal: g.slice_rows(protos, 0, 1)?,
        defects: g.slice_rows(protos, 1, states)?,
    })
}

fn check_nondegenerate(g: &Graph, v: Var) -> Result<()> {
    let t = g.value(v);
    let (r, c) = t.rows_cols();
    for i in 0..r {
        let n = t.data()[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(Error::DegenerateAggregate);
        }
    }
    Ok(())
}

/// The aggregated abnormal prototype. Mean mode returns `1 x d`; attention
/// mode returns one row per row of `z_x`.
pub fn aggregate_abnormal(
    g: &Graph,
    defects: Var,
    mode: Aggregation,
    z_x: Option<Var>,
    tau_agg: f64,
) -> Result<Var> {
    let k = g.shape(defects)[0];
    if k == 0 {
        return Err(Error::Config("cannot aggregate zero defect prototypes".into()));
    }
    let raw = match mode {
        Aggregation::Mean => {
            let avg = g.constant(Tensor::full(&[1, k], 1.0 / k as f64));
            g.matmul(avg, defects)?
        }
        Aggregation::Attention => {
            let z = z_x.ok_or_else(|| Error::Config("attention aggregation needs an image embedding".into()))?;
            let cos = g.matmul(z, g.transpose(defects)?)?;
            let w = g.softmax(g.scale(cos, 1.0 / tau_agg), 1)?;
            g.matmul(w, defects)?
        }
    };
    check_nondegenerate(g, raw)?;
    g.l2_normalize(raw)
}

/// Value-level wrapper: prototypes from the bound encoder, frozen everything.
#[allow(clippy::too_many_arguments)]
pub fn state_prototypes(
    bank: &PromptBank,
    vocab: &Vocabulary,
    backbone: &crate::encoders::BackboneWeights,
    prefix: Option<&crate::encoders::PrefixState>,
    cfg: &EncoderConfig,
    mode: Aggregation,
    z_x: Option<&Tensor>,
    tau_agg: f64,
) -> Result<StatePrototypes> {
    let g = Graph::new();
    let bound = backbone.bind(&g, false);
    let ctx = bank.bind(&g, false);
    let pv = prefix.map(|p| p.bind(&g, false));
    let text_prefix = pv.as_ref().map_or(&[][..], |p| &p.text[..]);
    let protos = embed_state_prototypes(&g, bank, vocab, ctx, &bound.text, text_prefix, cfg)?;
    let zx = z_x.map(|t| g.constant(t.clone()));
    let agg = aggregate_abnormal(&g, protos.defects, mode, zx, tau_agg)?;
    Ok(StatePrototypes {
        z_n: g.value(protos.normal),
        z_d: g.value(protos.defects),
        z_d_agg: g.value(agg),
    })
}
