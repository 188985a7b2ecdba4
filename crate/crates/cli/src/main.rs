use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dapo_core::data::{generate_corpus, load_captions, load_corpus, load_split, save_corpus, shift_witness};
use dapo_core::pipeline::{
    ablate, ablation_csv, checkpoint, evaluate, export_embeddings, gradcheck, infer, list_images, pretrain,
    train_run, AblationAxis, DapoModel, EvalTask, GradcheckOptions, RunConfig, Trainer,
};
use dapo_core::{CorpusSpec, Vocabulary};

#[derive(Parser)]
#[command(name = "dapo", version, about = "Defect-aware prompt optimization on a synthetic defect corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus (train split, target split, captions).
    GenerateData(GenerateArgs),
    /// Contrastively pretrain the backbone on the corpus captions.
    Pretrain(PretrainArgs),
    /// Tune prompts, prefixes and adapters against a frozen backbone.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Anomaly maps and type masks for a directory of images.
    Infer(InferArgs),
    /// Finite-difference check of every trainable gradient on the tiny config.
    Gradcheck(GradcheckArgs),
    /// Sweep one configuration axis, one full run per value.
    Ablate(AblateArgs),
    /// Write patch and prototype embeddings for external projection.
    ExportEmbeddings(ExportArgs),
}

/// Run configuration: an optional JSON file, then field flags, then `--set`.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration (missing keys take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, dotted for nested ones: `--set pretrain.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Local loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt initialization: random, clip_space or offset.
    #[arg(long)]
    init: Option<String>,
    /// Defect prototype aggregation: mean or attention.
    #[arg(long)]
    aggregation: Option<String>,
    /// Progressive prefix connection on or off.
    #[arg(long)]
    progressive: Option<bool>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the global probability in the image score.
    #[arg(long)]
    beta: Option<f64>,
    /// Text layers with prefix tokens.
    #[arg(long)]
    text_prefix_depth: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.resolve_on(base)
    }

    /// Flags and `--set` applied to `base` (the config file is ignored).
    fn resolve_on(&self, base: RunConfig) -> Result<RunConfig> {
        let mut sets = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{k}={v}"));
            }
        };
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("init", self.init.clone());
        push("aggregation", self.aggregation.clone());
        push("progressive", self.progressive.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("text_prefix_depth", self.text_prefix_depth.map(|v| v.to_string()));
        push("pretrain.epochs", self.pretrain_epochs.map(|v| v.to_string()));
        sets.extend(self.set.iter().cloned());
        Ok(base.with_overrides(&sets)?)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    target_count: Option<usize>,
    #[arg(long)]
    caption_count: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus directory written by `generate-data`.
    #[arg(long)]
    data: PathBuf,
    /// Backbone file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained backbone file.
    #[arg(long, required_unless_present = "resume")]
    backbone: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with = "backbone")]
    resume: Option<PathBuf>,
    /// Run directory: config echo, loss log, checkpoints, reports.
    #[arg(long)]
    run_dir: PathBuf,
    /// Skip the per-epoch evaluation on the target split.
    #[arg(long)]
    no_eval: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split directory name under the corpus.
    #[arg(long, default_value = "target")]
    split: String,
    /// Comma-separated: binary_ad, binary_as, multitype_as.
    #[arg(long, value_delimiter = ',', default_value = "binary_ad,binary_as,multitype_as")]
    tasks: Vec<String>,
    /// Directory for report.json / report.csv / report_roc.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    /// Defect names to segment, in channel order; defaults to the training list.
    #[arg(long, value_delimiter = ',')]
    defects: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the focal term's backward pass (negative control).
    #[arg(long, hide = true)]
    inject_focal_fault: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// lambda, prompt_len, depth_nd, progressive, aggregation or init.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Output directory for ablation.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "target")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn load_backbone_for(cfg: &RunConfig, path: &Path) -> Result<dapo_core::BackboneWeights> {
    let (weights, encoder, vocab) = checkpoint::load_backbone(path)?;
    cfg.encoder
        .check_backbone_shape(&encoder)
        .with_context(|| format!("{} does not fit the run configuration", path.display()))?;
    if vocab != Vocabulary::builtin() {
        bail!("{} was pretrained with a different vocabulary", path.display());
    }
    Ok(weights)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData(a) => {
            let mut spec = CorpusSpec::default();
            if let Some(v) = a.seed {
                spec.seed = v;
            }
            if let Some(v) = a.train_count {
                spec.train_count = v;
            }
            if let Some(v) = a.target_count {
                spec.target_count = v;
            }
            if let Some(v) = a.caption_count {
                spec.caption_count = v;
            }
            if let Some(v) = a.image_size {
                spec.image_size = v;
            }
            let corpus = generate_corpus(&spec)?;
            save_corpus(&corpus, &a.out)?;
            let train: Vec<_> = corpus.train.samples.iter().map(|s| &s.image).collect();
            let target: Vec<_> = corpus.target.samples.iter().map(|s| &s.image).collect();
            println!(
                "wrote {} train, {} target, {} captions to {}",
                corpus.train.samples.len(),
                corpus.target.samples.len(),
                corpus.captions.len(),
                a.out.display()
            );
            println!("train defects: {}", corpus.train.defects.join(", "));
            println!("target defects: {}", corpus.target.defects.join(", "));
            println!("shift witness accuracy: {:.3}", shift_witness(&train, &target)?);
        }
        Command::Pretrain(a) => {
            let cfg = a.config.resolve()?;
            let captions = load_captions(&a.data.join("captions"))?;
            let vocab = Vocabulary::builtin();
            let out = pretrain(&cfg, &captions, &vocab)?;
            for (i, l) in out.epoch_losses.iter().enumerate() {
                println!("epoch {} contrastive loss {l:.4}", i + 1);
            }
            checkpoint::save_backbone(&out.weights, &cfg.encoder, &vocab, &a.out)?;
            println!("backbone sha256 {}", out.weights.sha256());
        }
        Command::Train(a) => {
            let corpus = load_corpus(&a.data)?;
            let trainer = match (&a.resume, &a.backbone) {
                (Some(ckpt), _) => {
                    let mut t = checkpoint::load(ckpt)?;
                    let cfg = a.config.resolve_on(t.model.config.clone())?;
                    let mut same = t.model.config.clone();
                    same.epochs = cfg.epochs;
                    if cfg != same {
                        bail!("only --epochs may change when resuming a checkpoint");
                    }
                    t.model.config.epochs = cfg.epochs;
                    t
                }
                (None, Some(bb)) => {
                    let cfg = a.config.resolve()?;
                    let backbone = load_backbone_for(&cfg, bb)?;
                    let model = DapoModel::new(cfg, Vocabulary::builtin(), backbone, &corpus.train.defects)?;
                    Trainer::new(model)
                }
                (None, None) => bail!("either --backbone or --resume is required"),
            };
            let tasks = [EvalTask::BinaryAd, EvalTask::BinaryAs];
            let eval = (!a.no_eval).then_some((&corpus.target, &tasks[..]));
            let out = train_run(trainer, &corpus.train, eval, Some(&a.run_dir))?;
            for e in &out.epochs {
                match &e.report {
                    Some(r) => println!(
                        "epoch {} loss {:.4} image_auroc {} pixel_auroc {}",
                        e.epoch,
                        e.mean_loss,
                        fmt_opt(r.mean.image_auroc),
                        fmt_opt(r.mean.pixel_auroc)
                    ),
                    None => println!("epoch {} loss {:.4}", e.epoch, e.mean_loss),
                }
            }
            if let Some(b) = out.best_epoch {
                println!("best epoch {b}");
            }
            println!("run directory {}", a.run_dir.display());
        }
        Command::Eval(a) => {
            let trainer = checkpoint::load(&a.checkpoint)?;
            let split = load_split(&a.data.join(&a.split))?;
            let tasks = a
                .tasks
                .iter()
                .map(|t| t.parse::<EvalTask>())
                .collect::<dapo_core::Result<Vec<_>>>()?;
            let report = evaluate(&trainer.model, &split, &tasks)?;
            for (scope, metric, value) in report.rows() {
                println!("{scope}\t{metric}\t{value:.4}");
            }
            if let Some(dir) = &a.out {
                report.write(dir, "report")?;
            }
        }
        Command::Infer(a) => {
            let trainer = checkpoint::load(&a.checkpoint)?;
            let inputs = if a.input.is_dir() {
                list_images(&a.input)?
            } else {
                vec![a.input.clone()]
            };
            let defects = if a.defects.is_empty() {
                trainer.model.train_defects.clone()
            } else {
                a.defects.clone()
            };
            let summary = infer(&trainer.model, &inputs, &defects, &a.out)?;
            for r in &summary.written {
                println!("{}\tscore {:.4}", r.image, r.score);
            }
            for (path, err) in &summary.failures {
                eprintln!("skipped {}: {err}", path.display());
            }
            if summary.written.is_empty() && !summary.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Gradcheck(a) => {
            let report = gradcheck(&GradcheckOptions {
                seed: a.seed,
                focal_grad_fault: a.inject_focal_fault,
            })?;
            for g in &report.groups {
                println!(
                    "{:<10} params {:>5}  max relative error {:.3e}",
                    g.group, g.parameters, g.max_relative_error
                );
            }
            if report.passed() {
                println!("PASS (tolerance {:.0e})", report.tolerance);
            } else {
                println!("FAIL (worst {:.3e}, tolerance {:.0e})", report.worst(), report.tolerance);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate(a) => {
            let cfg = a.config.resolve()?;
            let axis: AblationAxis = a.axis.parse()?;
            let corpus = load_corpus(&a.data)?;
            let backbone = load_backbone_for(&cfg, &a.backbone)?;
            let rows = ablate(axis, &a.values, &cfg, &backbone, &corpus);
            let csv = ablation_csv(&rows)?;
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let path = a.out.join("ablation.csv");
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
        }
        Command::ExportEmbeddings(a) => {
            let trainer = checkpoint::load(&a.checkpoint)?;
            let split = load_split(&a.data.join(&a.split))?;
            let ex = export_embeddings(&trainer.model, &split, &a.out)?;
            println!("{} rows -> {}, {}", ex.rows, ex.embeddings.display(), ex.labels.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
