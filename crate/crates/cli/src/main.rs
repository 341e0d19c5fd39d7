//! `tcdl`: generate corpora, train teachers, distill and inspect compressed models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use tcdl::analysis::{profile, render_profile, render_report, retrieval_eval};
use tcdl::corpus::{load_checkpoint, save_checkpoint, Corpus};
use tcdl::inheritance::{manual_inherit, CompressionReport};
use tcdl::losses::InteractionMode;
use tcdl::pipeline::{run_pipeline, train_teacher, write_metrics, DistillConfig, InheritMode, TeacherConfig};
use tcdl::towers::TwoTowerModel;

#[derive(Parser)]
#[command(name = "tcdl", version, about = "Distill and compress two-tower image-text models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image-caption corpus manifest.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of distinct scenes (at most 378).
        #[arg(long, default_value_t = 378)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher from scratch with the contrastive loss.
    TrainTeacher(TrainTeacherArgs),
    /// Compress a teacher by multi-stage distillation.
    Distill(DistillArgs),
    /// Cut a student out of a teacher by uniform layer and leading-channel selection.
    InheritManual {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        text_layers: usize,
        #[arg(long)]
        image_dims: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer redundancy (input/output cosine) and ablation recall.
    Profile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Pairs feeding the cosine statistic.
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Surviving heads, FFN units and embedding dims of every stage of a distill run.
    MaskReport {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Held-out recall@1 in both directions.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Args)]
struct TrainTeacherArgs {
    /// JSON teacher settings; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Line-delimited JSON of per-step losses.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Contrastive loss against the identity.
    L0,
    /// Affinity mimicking.
    L1,
    /// Cross-modal teacher-student affinities.
    Cross,
    /// Same-modality teacher-student affinities.
    Single,
}

#[derive(Clone, Copy, ValueEnum)]
enum InheritArg {
    Manual,
    Auto,
    None,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints, masks, reports and metrics.
    #[arg(long)]
    out: PathBuf,
    /// JSON run settings; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Final kept fraction of maskable parameters.
    #[arg(long)]
    target_ratio: Option<f64>,
    /// `AUTO` for fixed cuts per stage, or comma-separated stage targets.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    inherit: Option<InheritArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps over all stages.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated per-stage step budgets.
    #[arg(long)]
    stage_steps: Option<String>,
    /// Kept-fraction cut per stage when `--stages AUTO`.
    #[arg(long)]
    per_stage_cut: Option<f64>,
    #[arg(long)]
    warmup_cap: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mask_lr: Option<f64>,
    /// Distillation temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Add the contrastive loss with weight 1.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    add_contrastive: Option<bool>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<TwoTowerModel<f32>> {
    Ok(load_checkpoint(path)?)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus::load(dir)?)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|_| anyhow::anyhow!("--{flag}: cannot parse {x:?} in {s:?}")))
        .collect()
}

fn distill_config(a: &DistillArgs) -> Result<DistillConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<DistillConfig>(p)?,
        None => DistillConfig::default(),
    };
    if let Some(q) = a.target_ratio {
        cfg.target = q;
    }
    if let Some(s) = &a.stages {
        cfg.stages = if s.eq_ignore_ascii_case("auto") { None } else { Some(parse_list("stages", s)?) };
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::L0 => InteractionMode::L0,
            ModeArg::L1 => InteractionMode::L1,
            ModeArg::Cross => InteractionMode::Cross,
            ModeArg::Single => InteractionMode::Single,
        };
    }
    if let Some(i) = a.inherit {
        cfg.inherit = match i {
            InheritArg::Manual => InheritMode::Manual,
            InheritArg::Auto => InheritMode::Auto,
            InheritArg::None => InheritMode::None,
        };
    }
    if let Some(s) = &a.stage_steps {
        cfg.stage_steps = Some(parse_list("stage-steps", s)?);
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {$(if let Some(v) = a.$flag { cfg.$field = v; })*};
    }
    set!(seed <- seed, total_steps <- steps, per_stage_cut <- per_stage_cut, warmup_cap <- warmup_cap,
         warmup_fraction <- warmup_fraction, batch <- batch, mask_lr <- mask_lr, tau <- tau,
         add_contrastive <- add_contrastive);
    if a.lr.is_some() {
        cfg.lr = a.lr;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { seed, count, out } => {
            let corpus = Corpus::generate(seed, count)?;
            corpus.save(&out)?;
            print_json(&json!({
                "manifest": corpus.manifest,
                "train": corpus.train_scenes().len(),
                "heldout": corpus.heldout_scenes().len(),
            }))
        }
        Command::TrainTeacher(a) => {
            let mut cfg = match &a.config {
                Some(p) => read_json::<TeacherConfig>(p)?,
                None => TeacherConfig::default(),
            };
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.batch = a.batch.unwrap_or(cfg.batch);
            cfg.lr = a.lr.unwrap_or(cfg.lr);
            let corpus = load_corpus(&a.corpus)?;
            let (model, log) = train_teacher(&cfg, &corpus)?;
            save_checkpoint(&model, &a.out)?;
            if let Some(m) = &a.metrics {
                write_metrics(m, &log)?;
            }
            let recall = retrieval_eval(&model, &corpus.heldout_batch())?;
            print_json(&json!({
                "steps": cfg.steps,
                "final_loss": log.last().map(|r| r.loss),
                "heldout_recall": recall,
                "params": model.params.count(),
            }))
        }
        Command::Distill(a) => {
            let cfg = distill_config(&a)?;
            let teacher = load_model(&a.teacher)?;
            let corpus = load_corpus(&a.corpus)?;
            let result = run_pipeline(&teacher, &corpus, &cfg, Some(&a.out))?;
            let recall = retrieval_eval(&result.model, &corpus.heldout_batch())?;
            print_json(&json!({
                "stages": result.stages.iter().map(|s| json!({
                    "stage": s.stage,
                    "target": s.target,
                    "steps": s.steps,
                    "p_binary": s.p_binary,
                    "census_ratio": s.census_ratio,
                    "recall": s.recall,
                })).collect::<Vec<_>>(),
                "final_recall": recall,
                "params": result.model.params.count(),
                "teacher_params": teacher.params.count(),
                "out": a.out,
            }))
        }
        Command::InheritManual { teacher, text_layers, image_dims, out } => {
            let t = load_model(&teacher)?;
            let student = manual_inherit(&t, text_layers, image_dims)?;
            save_checkpoint(&student, &out)?;
            print_json(&json!({
                "config": student.config,
                "params": student.params.count(),
                "maskable_ratio": student.maskable_params() as f64 / t.maskable_params() as f64,
            }))
        }
        Command::Profile { model, corpus, samples, json } => {
            if samples == 0 {
                bail!("--samples must be positive");
            }
            let m = load_model(&model)?;
            let c = load_corpus(&corpus)?;
            let p = profile(&m, &c.probe_batch(samples), &c.heldout_batch())?;
            if json {
                print_json(&serde_json::to_value(&p)?)
            } else {
                print!("{}", render_profile(&p));
                Ok(())
            }
        }
        Command::MaskReport { model_dir, json } => {
            let reports = stage_reports(&model_dir)?;
            if json {
                let v: Vec<_> = reports.iter().map(|(i, r)| json!({ "stage": i, "report": r })).collect();
                print_json(&serde_json::Value::Array(v))
            } else {
                for (i, r) in &reports {
                    println!("stage {i}");
                    print!("{}", render_report(r));
                }
                Ok(())
            }
        }
        Command::Eval { model, corpus } => {
            let m = load_model(&model)?;
            let c = load_corpus(&corpus)?;
            print_json(&serde_json::to_value(retrieval_eval(&m, &c.heldout_batch())?)?)
        }
    }
}

/// `stage{i}.report.json` files of a distill output directory, by stage.
fn stage_reports(dir: &Path) -> Result<Vec<(usize, CompressionReport)>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut found = Vec::new();
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_prefix("stage").and_then(|r| r.strip_suffix(".report.json")).and_then(|i| i.parse().ok()) {
            found.push((i, read_json(&dir.join(&name))?));
        }
    }
    if found.is_empty() {
        bail!("no stage reports in {} (reports are written by distill --inherit auto)", dir.display());
    }
    found.sort_by_key(|(i, _)| *i);
    Ok(found)
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let _ = e.print();
                return ExitCode::from(2);
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
