use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::MULTIPLIER_INIT;
use crate::towers::{MaskValues, ModelConfig, TowerConfig, TowerKind, TowerMaskVars, TowerMasks};

/// Stretch interval of the hard-concrete gate.
pub const GATE_LOW: f64 = -0.1;
pub const GATE_HIGH: f64 = 1.1;
pub const GATE_TEMPERATURE: f64 = 2.0 / 3.0;
/// Logit whose deterministic gate is exactly 1.
pub const PASS_THROUGH_LOGIT: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPhase {
    /// Entries are gate logits.
    Relaxed,
    /// Entries are exactly 0 or 1.
    Hard,
}

/// Learnable structured masks for both towers plus the sparsity multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub phase: MaskPhase,
    pub image: TowerMasks<f64>,
    pub text: TowerMasks<f64>,
    pub temperature: f64,
    pub lambda: f64,
    pub beta: f64,
}

impl MaskSet {
    /// Relaxed masks whose deterministic gates are all 1.
    pub fn pass_through(cfg: &ModelConfig) -> Self {
        MaskSet {
            phase: MaskPhase::Relaxed,
            image: TowerMasks::filled(&cfg.image, PASS_THROUGH_LOGIT),
            text: TowerMasks::filled(&cfg.text, PASS_THROUGH_LOGIT),
            temperature: GATE_TEMPERATURE,
            lambda: MULTIPLIER_INIT,
            beta: MULTIPLIER_INIT,
        }
    }

    /// Binary masks from 0/1 values.
    pub fn hard(values: MaskValues<f64>) -> Result<Self> {
        let m = MaskSet {
            phase: MaskPhase::Hard,
            image: values.image,
            text: values.text,
            temperature: GATE_TEMPERATURE,
            lambda: MULTIPLIER_INIT,
            beta: MULTIPLIER_INIT,
        };
        if !m.is_binary() {
            return Err(Error::Mask("hard masks must contain only 0 and 1".into()));
        }
        Ok(m)
    }

    pub fn all_ones(cfg: &ModelConfig) -> Self {
        Self::hard(MaskValues::ones(cfg)).expect("ones are binary")
    }

    pub fn tower(&self, kind: TowerKind) -> &TowerMasks<f64> {
        match kind {
            TowerKind::Image => &self.image,
            TowerKind::Text => &self.text,
        }
    }

    pub fn tower_mut(&mut self, kind: TowerKind) -> &mut TowerMasks<f64> {
        match kind {
            TowerKind::Image => &mut self.image,
            TowerKind::Text => &mut self.text,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.phase == MaskPhase::Hard
            && TowerKind::BOTH.iter().all(|&k| {
                let t = self.tower(k);
                t.head.iter().chain(&t.int).chain(&t.embed).all(|&v| v == 0.0 || v == 1.0)
            })
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for kind in TowerKind::BOTH {
            let (t, c) = (self.tower(kind), cfg.tower(kind));
            if t.head.len() != c.total_heads() || t.int.len() != c.total_ffn() || t.embed.len() != c.hidden {
                return Err(Error::Mask(format!(
                    "{} masks have {}/{}/{} head/int/embed entries, tower needs {}/{}/{}",
                    kind.prefix(),
                    t.head.len(),
                    t.int.len(),
                    t.embed.len(),
                    c.total_heads(),
                    c.total_ffn(),
                    c.hidden
                )));
            }
        }
        Ok(())
    }

    /// Realized mask values: deterministic gates when relaxed, the entries themselves when hard.
    pub fn values(&self) -> MaskValues<f64> {
        let map = |t: &TowerMasks<f64>| match self.phase {
            MaskPhase::Hard => t.clone(),
            MaskPhase::Relaxed => TowerMasks {
                head: t.head.iter().map(|&a| deterministic_gate(a)).collect(),
                int: t.int.iter().map(|&a| deterministic_gate(a)).collect(),
                embed: t.embed.iter().map(|&a| deterministic_gate(a)).collect(),
            },
        };
        MaskValues { image: map(&self.image), text: map(&self.text) }
    }

    pub fn values_as<T: Real>(&self) -> MaskValues<T> {
        let cast = |t: TowerMasks<f64>| TowerMasks {
            head: t.head.into_iter().map(T::c).collect(),
            int: t.int.into_iter().map(T::c).collect(),
            embed: t.embed.into_iter().map(T::c).collect(),
        };
        let v = self.values();
        MaskValues { image: cast(v.image), text: cast(v.text) }
    }
}

/// `clamp(sigmoid(a) (high - low) + low, 0, 1)`.
pub fn deterministic_gate(logit: f64) -> f64 {
    let s = 1.0 / (1.0 + (-logit).exp());
    (s * (GATE_HIGH - GATE_LOW) + GATE_LOW).clamp(0.0, 1.0)
}

/// Hard-concrete gates on the tape. With `noise = Some(u)`, `u` in (0, 1),
/// each gate is the stretched, clamped `sigmoid((a + ln u - ln(1 - u)) / temperature)`;
/// without noise it is the deterministic gate.
pub fn gate_vars<T: Real>(tape: &mut Tape<T>, logits: Var, noise: Option<&[T]>, temperature: T) -> Result<Var> {
    let s = match noise {
        Some(u) => {
            let n = tape.value(logits).numel();
            if u.len() != n {
                return Err(Error::shape("gate_vars", format!("{} noise samples for {n} gates", u.len())));
            }
            let shape = tape.value(logits).shape().to_vec();
            let shift = tape.constant(Tensor::new(&shape, u.iter().map(|&u| u.ln() - (T::one() - u).ln()).collect())?);
            let z = tape.add(logits, shift)?;
            let z = tape.scale(z, T::one() / temperature)?;
            tape.sigmoid(z)?
        }
        None => tape.sigmoid(logits)?,
    };
    let stretched = tape.scale(s, T::c(GATE_HIGH - GATE_LOW))?;
    let shifted = tape.add_scalar(stretched, T::c(GATE_LOW))?;
    tape.clamp(shifted, T::zero(), T::one())
}

/// Surviving maskable parameters of one tower:
/// `sum(m_embed) * (4 d_h sum(m_head) + 2 sum(m_int))`.
pub fn tower_kept<T: Real>(masks: &TowerMasks<T>, cfg: &TowerConfig) -> f64 {
    let s = |v: &[T]| v.iter().map(|x| x.f64()).sum::<f64>();
    s(&masks.embed) * (4.0 * cfg.head_dim as f64 * s(&masks.head) + 2.0 * s(&masks.int))
}

/// Overall kept fraction of maskable parameters relative to `denominator`.
pub fn compression_rate_values<T: Real>(masks: &MaskValues<T>, cfg: &ModelConfig, denominator: usize) -> Result<f64> {
    masks.check(cfg)?;
    if denominator == 0 {
        return Err(Error::invalid("compression denominator must be positive"));
    }
    Ok((tower_kept(&masks.image, &cfg.image) + tower_kept(&masks.text, &cfg.text)) / denominator as f64)
}

/// Kept fraction of `cfg`'s maskable parameters under the realized masks.
pub fn compression_rate(masks: &MaskSet, cfg: &ModelConfig) -> Result<f64> {
    masks.check_shapes(cfg)?;
    compression_rate_values(&masks.values(), cfg, cfg.maskable_params())
}

/// Differentiable compression rate from gate values recorded on the tape.
pub fn compression_rate_var<T: Real>(
    tape: &mut Tape<T>,
    gates: (&TowerMaskVars, &TowerMaskVars),
    cfg: &ModelConfig,
    denominator: usize,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (g, c) in [(gates.0, &cfg.image), (gates.1, &cfg.text)] {
        let sh = tape.sum(g.head)?;
        let si = tape.sum(g.int)?;
        let se = tape.sum(g.embed)?;
        let h = tape.scale(sh, T::c(4.0 * c.head_dim as f64))?;
        let i = tape.scale(si, T::c(2.0))?;
        let inner = tape.add(h, i)?;
        terms.push(tape.mul(se, inner)?);
    }
    let total = tape.add(terms[0], terms[1])?;
    tape.scale(total, T::one() / T::c(denominator as f64))
}

/// Per-tower survivors of a binary mask set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerReport {
    pub heads: Vec<usize>,
    pub heads_total: Vec<usize>,
    pub ffn: Vec<usize>,
    pub ffn_total: Vec<usize>,
    pub embed: usize,
    pub embed_total: usize,
    /// Surviving maskable parameters.
    pub kept: usize,
    /// Maskable parameters with every mask at 1.
    pub maskable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub p: f64,
    /// Denominator of `p`.
    pub reference_maskable: usize,
    pub image: TowerReport,
    pub text: TowerReport,
    /// Whole-model parameter census before and after removal.
    pub params_before: usize,
    pub params_after: usize,
}

impl CompressionReport {
    pub fn new(masks: &MaskSet, cfg: &ModelConfig, reference_maskable: usize) -> Result<Self> {
        if !masks.is_binary() {
            return Err(Error::Mask("compression report needs binary masks".into()));
        }
        masks.check_shapes(cfg)?;
        let tower = |kind: TowerKind| {
            let (m, c) = (masks.tower(kind), cfg.tower(kind));
            let count = |v: &[f64]| v.iter().filter(|&&x| x == 1.0).count();
            let heads: Vec<usize> =
                (0..c.layers()).map(|l| count(&m.head[c.head_offset(l)..c.head_offset(l) + c.heads[l]])).collect();
            let ffn: Vec<usize> = (0..c.layers()).map(|l| count(&m.int[c.ffn_offset(l)..c.ffn_offset(l) + c.ffn[l]])).collect();
            let embed = count(&m.embed);
            let kept = embed * (4 * c.head_dim * heads.iter().sum::<usize>() + 2 * ffn.iter().sum::<usize>());
            TowerReport {
                heads,
                heads_total: c.heads.clone(),
                ffn,
                ffn_total: c.ffn.clone(),
                embed,
                embed_total: c.hidden,
                kept,
                maskable: c.maskable_params(),
            }
        };
        let (image, text) = (tower(TowerKind::Image), tower(TowerKind::Text));
        let after = super::select::pruned_config(cfg, masks)?;
        Ok(CompressionReport {
            p: (image.kept + text.kept) as f64 / reference_maskable as f64,
            reference_maskable,
            image,
            text,
            params_before: cfg.param_count(),
            params_after: after.param_count(),
        })
    }
}
