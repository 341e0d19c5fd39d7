use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{Corpus, PairBatch};
use crate::error::{Error, Result};
use crate::losses::{affinity_with_logit_scale, contrastive_loss, interaction_loss, Embeds, InteractionMode};
use crate::optim::{AdamConfig, AdamW, Schedule};
use crate::towers::{Bound, TowerMaskVars, TwoTowerModel, MAX_LOGIT_SCALE};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub phase: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub lr: f64,
}

impl StepRecord {
    pub fn new(step: usize, stage: usize, phase: &str, loss: f64, lr: f64) -> Self {
        StepRecord {
            step,
            stage,
            phase: phase.to_string(),
            loss,
            distill: None,
            contrastive: None,
            sparsity: None,
            p: None,
            q: None,
            lambda: None,
            beta: None,
            lr,
        }
    }
}

/// Loss terms of one student forward.
pub(crate) struct StudentLoss {
    pub total: Var,
    pub distill: Option<Var>,
    pub contrastive: Option<Var>,
}

/// Shared state of a distillation run: the frozen teacher, the data stream,
/// the model optimizer and the global step counter.
pub struct DistillContext<'a> {
    pub teacher: &'a TwoTowerModel<f32>,
    pub corpus: &'a Corpus,
    pub stream: u64,
    pub seed: u64,
    pub batch: usize,
    pub mode: InteractionMode,
    pub add_contrastive: bool,
    pub tau: f32,
    pub adam: AdamConfig,
    pub step: usize,
    pub stage: usize,
    pub optimizer: AdamW<f32>,
    pub schedule: Schedule,
    pub schedule_start: usize,
    pub log: Vec<StepRecord>,
}

impl<'a> DistillContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        teacher: &'a TwoTowerModel<f32>,
        corpus: &'a Corpus,
        seed: u64,
        batch: usize,
        mode: InteractionMode,
        add_contrastive: bool,
        tau: f64,
        adam: AdamConfig,
    ) -> Self {
        DistillContext {
            teacher,
            corpus,
            stream: seed,
            seed,
            batch,
            mode,
            add_contrastive,
            tau: tau as f32,
            adam,
            step: 0,
            stage: 0,
            optimizer: AdamW::new(adam),
            schedule: Schedule::cosine(1e-4, 1),
            schedule_start: 0,
            log: Vec::new(),
        }
    }

    /// Starts a fresh optimizer and learning-rate schedule at the current step.
    pub fn reset_optimizer(&mut self, schedule: Schedule) {
        self.optimizer = AdamW::new(self.adam);
        self.schedule = schedule;
        self.schedule_start = self.step;
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step - self.schedule_start)
    }

    pub fn next_batch(&self) -> Result<PairBatch<f32>> {
        self.corpus.train_batch(self.stream, self.step as u64, self.batch)
    }

    fn teacher_embeds(&self, tape: &mut Tape<f32>, batch: &PairBatch<f32>) -> Result<Option<Embeds>> {
        if !self.mode.needs_teacher() {
            return Ok(None);
        }
        let image = self.teacher.encode_image(&batch.images, None)?;
        let text = self.teacher.encode_text(&batch.tokens, None)?;
        Ok(Some(Embeds { image: tape.constant(image), text: tape.constant(text) }))
    }

    /// Student forward plus the run's objective (interaction mode, optionally plus L0).
    pub(crate) fn student_loss(
        &self,
        tape: &mut Tape<f32>,
        student: &TwoTowerModel<f32>,
        bound: &Bound,
        batch: &PairBatch<f32>,
        masks: Option<(&TowerMaskVars, &TowerMaskVars)>,
    ) -> Result<StudentLoss> {
        let teacher = self.teacher_embeds(tape, batch)?;
        let (image, text) = student.forward_pair(tape, bound, &batch.images, &batch.tokens, masks)?;
        let s = Embeds { image, text };
        let ls = bound.get("logit_scale")?;
        let main = interaction_loss(tape, self.mode, &s, teacher.as_ref(), self.tau, ls)?;
        if self.mode == InteractionMode::L0 {
            return Ok(StudentLoss { total: main, distill: None, contrastive: Some(main) });
        }
        if self.add_contrastive {
            let a = affinity_with_logit_scale(tape, image, text, ls)?;
            let c = contrastive_loss(tape, &a)?;
            let total = tape.add(main, c)?;
            return Ok(StudentLoss { total, distill: Some(main), contrastive: Some(c) });
        }
        Ok(StudentLoss { total: main, distill: Some(main), contrastive: None })
    }

    /// Applies the model gradients of a finished backward pass.
    pub(crate) fn update_model(&mut self, student: &mut TwoTowerModel<f32>, tape: &Tape<f32>, bound: &Bound) -> Result<f64> {
        let lr = self.lr();
        let grads = bound.grads(tape);
        self.optimizer.step(&mut student.params, &grads, lr)?;
        clamp_logit_scale(student)?;
        Ok(lr)
    }

    /// One plain distillation step on the student.
    pub fn distill_step(&mut self, student: &mut TwoTowerModel<f32>, phase: &str) -> Result<()> {
        let batch = self.next_batch()?;
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let loss = self.student_loss(&mut tape, student, &bound, &batch, None)?;
        let value = tape.value(loss.total).item() as f64;
        check_finite(self.step, value)?;
        tape.backward(loss.total)?;
        let lr = self.update_model(student, &tape, &bound)?;
        let mut rec = StepRecord::new(self.step, self.stage, phase, value, lr);
        rec.distill = loss.distill.map(|v| tape.value(v).item() as f64);
        rec.contrastive = loss.contrastive.map(|v| tape.value(v).item() as f64);
        self.log.push(rec);
        self.step += 1;
        Ok(())
    }
}

pub(crate) fn check_finite(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Keeps the contrastive logit scale within `[0, ln 100]`.
pub(crate) fn clamp_logit_scale(model: &mut TwoTowerModel<f32>) -> Result<()> {
    let t = model.params.get_mut("logit_scale")?;
    let v = t.data()[0].clamp(0.0, MAX_LOGIT_SCALE as f32);
    *t = Tensor::scalar(v);
    Ok(())
}
