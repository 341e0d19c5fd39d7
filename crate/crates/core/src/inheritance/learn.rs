use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::derive_seed;
use crate::error::{Error, Result};
use crate::losses::sparsity_loss;
use crate::optim::{AdamConfig, Moments};
use crate::pipeline::{check_finite, ramp_target, DistillContext, StepRecord};
use crate::towers::{TowerKind, TowerMaskVars, TowerMasks, TwoTowerModel};

use super::masks::{compression_rate_var, gate_vars, MaskSet};

/// Settings of the joint mask/model warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLearnOpts {
    pub steps: usize,
    /// Kept fraction the ramp starts from.
    pub q_start: f64,
    pub q_target: f64,
    /// Maskable-parameter count the compression rate is relative to.
    pub reference_maskable: usize,
    /// Constant learning rate of the mask logits and multipliers.
    pub mask_lr: f64,
}

const MASK_GROUPS: usize = 6;

fn flat_groups(m: &MaskSet) -> [Vec<f32>; MASK_GROUPS] {
    let g = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    [g(&m.image.head), g(&m.image.int), g(&m.image.embed), g(&m.text.head), g(&m.text.int), g(&m.text.embed)]
}

fn to_tower(head: &[f32], int: &[f32], embed: &[f32]) -> TowerMasks<f64> {
    let g = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
    TowerMasks { head: g(head), int: g(int), embed: g(embed) }
}

/// Jointly trains mask logits (descent), model weights (descent) and the
/// multipliers (ascent) on distillation plus sparsity loss, the target kept
/// fraction ramping linearly from `q_start` to `q_target`. Gates are sampled
/// per step, so the logged `p` is that of the realized masks.
pub fn learn_masks(ctx: &mut DistillContext<'_>, student: &mut TwoTowerModel<f32>, opts: &MaskLearnOpts) -> Result<MaskSet> {
    if !(opts.q_target > 0.0 && opts.q_target <= 1.0) {
        return Err(Error::invalid(format!("infeasible target kept fraction {}", opts.q_target)));
    }
    let mut masks = MaskSet::pass_through(&student.config);
    let mut logits = flat_groups(&masks);
    let mut moments: Vec<Moments<f32>> = logits.iter().map(|v| Moments::new(v.len())).collect();
    let mut multipliers = [masks.lambda as f32, masks.beta as f32];
    let mut mult_moments = Moments::<f32>::new(2);
    let mask_adam = AdamConfig::without_decay();
    let temperature = masks.temperature as f32;
    for j in 1..=opts.steps {
        let batch = ctx.next_batch()?;
        let q = ramp_target(opts.q_start, opts.q_target, j, opts.steps)?;
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[ctx.seed, 7, ctx.step as u64]));
        let leaves: Vec<Var> = logits.iter().map(|v| tape.leaf(Tensor::new(&[v.len()], v.clone()).expect("rank-1"), true)).collect();
        let mut gates = Vec::with_capacity(MASK_GROUPS);
        for (g, &leaf) in leaves.iter().enumerate() {
            let noise: Vec<f32> = (0..logits[g].len()).map(|_| rng.random_range(1e-6f32..1.0 - 1e-6)).collect();
            gates.push(gate_vars(&mut tape, leaf, Some(&noise), temperature)?);
        }
        let image = TowerMaskVars { head: gates[0], int: gates[1], embed: gates[2] };
        let text = TowerMaskVars { head: gates[3], int: gates[4], embed: gates[5] };
        let loss = ctx.student_loss(&mut tape, student, &bound, &batch, Some((&image, &text)))?;
        let p = compression_rate_var(&mut tape, (&image, &text), &student.config, opts.reference_maskable)?;
        let lam = tape.leaf(Tensor::scalar(multipliers[0]), true);
        let beta = tape.leaf(Tensor::scalar(multipliers[1]), true);
        let sparsity = sparsity_loss(&mut tape, p, q as f32, lam, beta)?;
        let total = tape.add(loss.total, sparsity)?;
        let value = tape.value(total).item() as f64;
        check_finite(ctx.step, value)?;
        tape.backward(total)?;
        let lr = ctx.update_model(student, &tape, &bound)?;
        for (g, &leaf) in leaves.iter().enumerate() {
            if let Some(grad) = tape.grad(leaf) {
                moments[g].step(&mut logits[g], grad.data(), opts.mask_lr, &mask_adam, false, false);
            }
        }
        let mg = [tape.grad(lam).map_or(0.0, |t| t.item()), tape.grad(beta).map_or(0.0, |t| t.item())];
        mult_moments.step(&mut multipliers, &mg, opts.mask_lr, &mask_adam, false, true);

        let mut rec = StepRecord::new(ctx.step, ctx.stage, "mask", value, lr);
        rec.distill = loss.distill.map(|v| tape.value(v).item() as f64);
        rec.contrastive = loss.contrastive.map(|v| tape.value(v).item() as f64);
        rec.sparsity = Some(tape.value(sparsity).item() as f64);
        rec.p = Some(tape.value(p).item() as f64);
        rec.q = Some(q);
        rec.lambda = Some(multipliers[0] as f64);
        rec.beta = Some(multipliers[1] as f64);
        ctx.log.push(rec);
        ctx.step += 1;
    }
    masks.image = to_tower(&logits[0], &logits[1], &logits[2]);
    masks.text = to_tower(&logits[3], &logits[4], &logits[5]);
    masks.lambda = multipliers[0] as f64;
    masks.beta = multipliers[1] as f64;
    debug_assert!(TowerKind::BOTH.iter().all(|&k| masks.tower(k).embed.len() == student.config.tower(k).hidden));
    Ok(masks)
}
