//! Multi-stage progressive distillation and teacher training.

mod train;

#[cfg(test)]
mod tests;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub(crate) use train::check_finite;
pub use train::{DistillContext, StepRecord};

use crate::analysis::{retrieval_eval, Recall};
use crate::autodiff::Tape;
use crate::corpus::{Checkpoint, Corpus};
use crate::error::{Error, Result};
use crate::inheritance::{
    learn_masks, manual_config, manual_inherit, manual_plan, materialize, threshold, CompressionReport, MaskLearnOpts,
    MaskSet,
};
use crate::losses::{affinity_with_logit_scale, contrastive_loss, InteractionMode, DISTILL_TAU};
use crate::optim::{AdamConfig, AdamW, Schedule};
use crate::towers::{ModelConfig, TwoTowerModel};

pub const DEFAULT_STAGE_CUT: f64 = 0.25;
pub const DEFAULT_WARMUP_CAP: usize = 3000;
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InheritMode {
    /// Uniform text layers and leading image channels.
    Manual,
    /// Learned masks.
    Auto,
    /// Random initialization at the manual student's shape.
    None,
}

impl std::str::FromStr for InheritMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "manual" => Ok(InheritMode::Manual),
            "auto" => Ok(InheritMode::Auto),
            "none" => Ok(InheritMode::None),
            _ => Err(Error::invalid(format!("unknown inheritance mode {s:?} (expected manual, auto or none)"))),
        }
    }
}

/// Settings of one compression run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Final kept fraction of maskable parameters.
    pub target: f64,
    /// Explicit per-stage targets; `None` cuts `per_stage_cut` per stage.
    pub stages: Option<Vec<f64>>,
    pub per_stage_cut: f64,
    pub total_steps: usize,
    /// Explicit per-stage budgets; `None` splits `total_steps` evenly.
    pub stage_steps: Option<Vec<usize>>,
    pub warmup_cap: usize,
    pub warmup_fraction: f64,
    pub batch: usize,
    /// Peak model learning rate; `None` picks 1e-4 with inheritance and 5e-4 without.
    pub lr: Option<f64>,
    pub mask_lr: f64,
    pub mode: InteractionMode,
    /// Adds the contrastive term with weight 1.
    pub add_contrastive: bool,
    pub inherit: InheritMode,
    pub tau: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            target: 0.5,
            stages: None,
            per_stage_cut: DEFAULT_STAGE_CUT,
            total_steps: 2000,
            stage_steps: None,
            warmup_cap: DEFAULT_WARMUP_CAP,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            batch: 32,
            lr: None,
            mask_lr: 0.01,
            mode: InteractionMode::L1,
            add_contrastive: false,
            inherit: InheritMode::Auto,
            tau: DISTILL_TAU,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.inherit == InheritMode::None { 5e-4 } else { 1e-4 })
    }

    pub fn plan(&self) -> Result<StagePlan> {
        let mut plan = match &self.stages {
            Some(targets) => plan_from_targets(targets, self.target, self.total_steps)?,
            None => stage_plan(self.target, self.per_stage_cut, self.total_steps)?,
        };
        if let Some(steps) = &self.stage_steps {
            if steps.len() != plan.stages.len() {
                return Err(Error::invalid(format!("{} stage budgets for {} stages", steps.len(), plan.stages.len())));
            }
            for (s, &n) in plan.stages.iter_mut().zip(steps) {
                s.steps = n;
            }
            plan.total_steps = steps.iter().sum();
        }
        for s in &mut plan.stages {
            s.warmup = warmup_steps(s.steps, self.warmup_cap, self.warmup_fraction);
        }
        Ok(plan)
    }
}

/// `min(cap, floor(fraction * steps))`.
pub fn warmup_steps(steps: usize, cap: usize, fraction: f64) -> usize {
    ((fraction * steps as f64).floor() as usize).min(cap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Kept fraction of the original maskable parameters after this stage.
    pub target: f64,
    pub steps: usize,
    /// Mask warm-up steps within `steps`.
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub target: f64,
    pub total_steps: usize,
    pub stages: Vec<StageSpec>,
}

/// `G = ceil((1 - q) / cut)` stages with targets `1 - i * cut` (the last one
/// exactly `q`) and `total / G` steps each, the remainder going to the last stage.
pub fn stage_plan(q: f64, per_stage_cut: f64, total_steps: usize) -> Result<StagePlan> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("target kept fraction {q} outside (0, 1]")));
    }
    if !(per_stage_cut > 0.0 && per_stage_cut <= 1.0) {
        return Err(Error::invalid(format!("per-stage cut {per_stage_cut} outside (0, 1]")));
    }
    let g = ((1.0 - q) / per_stage_cut - 1e-9).ceil().max(0.0) as usize;
    let targets: Vec<f64> = (1..=g).map(|i| if i == g { q } else { 1.0 - i as f64 * per_stage_cut }).collect();
    plan_from_targets(&targets, q, total_steps)
}

pub fn plan_from_targets(targets: &[f64], q: f64, total_steps: usize) -> Result<StagePlan> {
    let mut prev = 1.0;
    for &t in targets {
        if !(t > 0.0 && t < prev) {
            return Err(Error::invalid(format!("stage targets {targets:?} must decrease strictly within (0, 1)")));
        }
        prev = t;
    }
    if let Some(&last) = targets.last() {
        if (last - q).abs() > 1e-12 {
            return Err(Error::invalid(format!("last stage target {last} differs from overall target {q}")));
        }
    }
    let g = targets.len();
    if g > 0 && total_steps < g {
        return Err(Error::invalid(format!("{total_steps} steps cannot cover {g} stages")));
    }
    let stages = targets
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let steps = total_steps / g + if i + 1 == g { total_steps % g } else { 0 };
            StageSpec { target, steps, warmup: warmup_steps(steps, DEFAULT_WARMUP_CAP, DEFAULT_WARMUP_FRACTION) }
        })
        .collect();
    Ok(StagePlan { target: q, total_steps: if g == 0 { 0 } else { total_steps }, stages })
}

/// Linear ramp `q_prev + (q_i - q_prev) * j / warmup` for `j` in `1..=warmup`.
pub fn ramp_target(q_prev: f64, q_i: f64, j: usize, warmup: usize) -> Result<f64> {
    if j == 0 || j > warmup {
        return Err(Error::invalid(format!("ramp step {j} outside 1..={warmup}")));
    }
    if j == warmup {
        return Ok(q_i);
    }
    Ok(q_prev + (q_i - q_prev) * j as f64 / warmup as f64)
}

/// Outcome of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub target: f64,
    pub steps: usize,
    pub warmup: usize,
    /// Compression rate of the thresholded masks (learned inheritance only).
    pub p_binary: Option<f64>,
    /// Maskable parameters kept relative to the original teacher.
    pub census_ratio: f64,
    pub recall: Recall,
    pub config: ModelConfig,
}

pub struct StageOutput {
    pub model: TwoTowerModel<f32>,
    pub summary: StageSummary,
    pub masks: Option<MaskSet>,
    pub report: Option<CompressionReport>,
}

/// One stage: learned inheritance (mask warm-up, threshold, materialize, distill)
/// or manual inheritance followed by distillation of the whole budget.
pub fn distill_stage(
    ctx: &mut DistillContext<'_>,
    student: TwoTowerModel<f32>,
    stage: &StageSpec,
    q_prev: f64,
    cfg: &DistillConfig,
) -> Result<StageOutput> {
    let reference = ctx.teacher.maskable_params();
    ctx.reset_optimizer(Schedule::cosine(cfg.lr(), stage.steps));
    let (mut student, masks, report, p_binary) = match cfg.inherit {
        InheritMode::Auto => {
            if stage.steps < stage.warmup {
                return Err(Error::invalid(format!("stage budget {} below warm-up {}", stage.steps, stage.warmup)));
            }
            let mut student = student;
            let opts = MaskLearnOpts {
                steps: stage.warmup,
                q_start: q_prev,
                q_target: stage.target,
                reference_maskable: reference,
                mask_lr: cfg.mask_lr,
            };
            let relaxed = if stage.warmup > 0 { learn_masks(ctx, &mut student, &opts)? } else { MaskSet::pass_through(&student.config) };
            let hard = threshold(&relaxed, &student.config, stage.target, reference)?;
            let report = CompressionReport::new(&hard, &student.config, reference)?;
            let p = report.p;
            let compact = materialize(&student, &hard)?;
            ctx.optimizer = AdamW::new(ctx.adam);
            (compact, Some(hard), Some(report), Some(p))
        }
        InheritMode::Manual => {
            let (k_text, k_dims) = manual_plan(&student.config, stage.target, reference)?;
            (manual_inherit(&student, k_text, k_dims)?, None, None, None)
        }
        InheritMode::None => (student, None, None, None),
    };
    let distill_steps = stage.steps - if cfg.inherit == InheritMode::Auto { stage.warmup } else { 0 };
    for _ in 0..distill_steps {
        ctx.distill_step(&mut student, "distill")?;
    }
    let recall = retrieval_eval(&student, &ctx.corpus.heldout_batch())?;
    let summary = StageSummary {
        stage: ctx.stage,
        target: stage.target,
        steps: stage.steps,
        warmup: if cfg.inherit == InheritMode::Auto { stage.warmup } else { 0 },
        p_binary,
        census_ratio: student.maskable_params() as f64 / reference as f64,
        recall,
        config: student.config.clone(),
    };
    Ok(StageOutput { model: student, summary, masks, report })
}

/// Result of [`run_pipeline`].
pub struct PipelineResult {
    pub model: TwoTowerModel<f32>,
    pub log: Vec<StepRecord>,
    pub stages: Vec<StageSummary>,
}

/// Shape of the student a manual-inheritance run of `plan` ends at.
pub fn manual_final_config(teacher: &ModelConfig, plan: &StagePlan) -> Result<ModelConfig> {
    let reference = teacher.maskable_params();
    let mut cfg = teacher.clone();
    for s in &plan.stages {
        let (k_text, k_dims) = manual_plan(&cfg, s.target, reference)?;
        cfg = manual_config(&cfg, k_text, k_dims)?;
    }
    Ok(cfg)
}

/// Runs every stage of `cfg`'s plan against the frozen `teacher`. With `out`,
/// writes `metrics.jsonl`, per-stage checkpoints (`stage{i}.ckpt`), masks and
/// reports, `final.ckpt` and `summary.json`.
pub fn run_pipeline(teacher: &TwoTowerModel<f32>, corpus: &Corpus, cfg: &DistillConfig, out: Option<&Path>) -> Result<PipelineResult> {
    let plan = cfg.plan()?;
    if corpus.train_scenes().is_empty() {
        return Err(Error::invalid("corpus has no training pairs"));
    }
    let batch = cfg.batch.min(corpus.train_scenes().len());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut ctx = DistillContext::new(teacher, corpus, cfg.seed, batch, cfg.mode, cfg.add_contrastive, cfg.tau, cfg.adam);
    let mut stages = Vec::new();
    let mut student = match cfg.inherit {
        InheritMode::None => TwoTowerModel::init(manual_final_config(&teacher.config, &plan)?, cfg.seed)?,
        _ => teacher.clone(),
    };
    if cfg.inherit == InheritMode::None && !plan.stages.is_empty() {
        // One schedule over the whole budget; there is nothing to inherit between stages.
        let whole = StageSpec { target: cfg.target, steps: plan.total_steps, warmup: 0 };
        ctx.stage = plan.stages.len();
        let o = distill_stage(&mut ctx, student, &whole, 1.0, cfg)?;
        write_stage(out, &o)?;
        stages.push(o.summary);
        student = o.model;
    } else {
        let mut q_prev = 1.0;
        for (i, spec) in plan.stages.iter().enumerate() {
            ctx.stage = i + 1;
            let o = distill_stage(&mut ctx, student, spec, q_prev, cfg)?;
            write_stage(out, &o)?;
            stages.push(o.summary);
            student = o.model;
            q_prev = spec.target;
        }
    }
    let log = std::mem::take(&mut ctx.log);
    if let Some(dir) = out {
        write_metrics(&dir.join("metrics.jsonl"), &log)?;
        Checkpoint::from_model(&student).save(&dir.join("final.ckpt"))?;
        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "plan": plan, "stages": stages }))?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(PipelineResult { model: student, log, stages })
}

fn write_stage(out: Option<&Path>, o: &StageOutput) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    let i = o.summary.stage;
    Checkpoint::from_model(&o.model).save(&dir.join(format!("stage{i}.ckpt")))?;
    if let Some(m) = &o.masks {
        let path = dir.join(format!("stage{i}.masks.json"));
        std::fs::write(&path, serde_json::to_string_pretty(m)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    if let Some(r) = &o.report {
        let path = dir.join(format!("stage{i}.report.json"));
        std::fs::write(&path, serde_json::to_string_pretty(r)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn write_metrics(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Settings of contrastive teacher training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { model: ModelConfig::desk(), steps: 3000, batch: 32, lr: 1e-3, seed: 0, adam: AdamConfig::default() }
    }
}

/// Trains a two-tower model from scratch with the contrastive loss.
pub fn train_teacher(cfg: &TeacherConfig, corpus: &Corpus) -> Result<(TwoTowerModel<f32>, Vec<StepRecord>)> {
    let n = corpus.train_scenes().len();
    if n < 2 {
        return Err(Error::invalid(format!("contrastive training needs at least 2 training pairs, corpus has {n}")));
    }
    let batch = cfg.batch.min(n);
    let mut model = TwoTowerModel::<f32>::init(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.adam);
    let schedule = Schedule::cosine(cfg.lr, cfg.steps);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = corpus.train_batch::<f32>(cfg.seed, step as u64, batch)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let (i, t) = model.forward_pair(&mut tape, &bound, &b.images, &b.tokens, None)?;
        let a = affinity_with_logit_scale(&mut tape, i, t, bound.get("logit_scale")?)?;
        let loss = contrastive_loss(&mut tape, &a)?;
        let value = tape.value(loss).item() as f64;
        check_finite(step, value)?;
        tape.backward(loss)?;
        let lr = schedule.lr(step);
        opt.step(&mut model.params, &bound.grads(&tape), lr)?;
        train::clamp_logit_scale(&mut model)?;
        let mut rec = StepRecord::new(step, 0, "teacher", value, lr);
        rec.contrastive = Some(value);
        log.push(rec);
    }
    Ok((model, log))
}

/// SHA-256 of a model's checkpoint bytes, hex encoded.
pub fn checksum<T: crate::autodiff::Real>(model: &TwoTowerModel<T>) -> String {
    Sha256::digest(Checkpoint::from_model(model).to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
