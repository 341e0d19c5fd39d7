//! Contrastive, affinity-mimicking and sparsity objectives on the tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::towers::MAX_LOGIT_SCALE;

/// Fixed temperature of every teacher/student affinity.
pub const DISTILL_TAU: f64 = 1.0 / 50.0;
/// Floor applied inside the log of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;
/// Initial value of both sparsity multipliers.
pub const MULTIPLIER_INIT: f64 = 0.01;

/// Row-softmax (image to text) and column-softmax (text to image) of one
/// logit matrix.
#[derive(Clone, Copy, Debug)]
pub struct AffinityPair {
    pub i2t: Var,
    pub t2i: Var,
    pub n: usize,
}

/// Image and text embeddings of one model on one batch, `[N, D]` each.
#[derive(Clone, Copy, Debug)]
pub struct Embeds {
    pub image: Var,
    pub text: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionMode {
    /// `CE(<I_s, T_s>, identity)`, halved over the two directions.
    L0,
    /// `CE(<I_s, T_s>, <I_t, T_t>)`.
    L1,
    /// `CE(<I_s, T_t>, <I_t, T_t>) + CE(<I_t, T_s>, <I_t, T_t>)`.
    Cross,
    /// `CE(<I_s, I_t>, identity) + CE(<T_s, T_t>, identity)`.
    Single,
}

impl InteractionMode {
    pub fn needs_teacher(self) -> bool {
        self != InteractionMode::L0
    }
}

impl std::str::FromStr for InteractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l0" | "contrastive" => Ok(InteractionMode::L0),
            "l1" | "affinity" => Ok(InteractionMode::L1),
            "cross" | "l2+l3" => Ok(InteractionMode::Cross),
            "single" | "l4+l5" => Ok(InteractionMode::Single),
            _ => Err(Error::invalid(format!("unknown interaction mode {s:?} (expected l0, l1, cross or single)"))),
        }
    }
}

fn pair_dims<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> Result<usize> {
    let (na, da) = tape.value(a).dims2()?;
    let (nb, db) = tape.value(b).dims2()?;
    if na != nb || da != db {
        return Err(Error::shape("affinity", format!("embeddings [{na}, {da}] vs [{nb}, {db}]")));
    }
    if na == 0 {
        return Err(Error::shape("affinity", "empty batch"));
    }
    Ok(na)
}

fn affinity_from_logits<T: Real>(tape: &mut Tape<T>, logits: Var, n: usize) -> Result<AffinityPair> {
    Ok(AffinityPair { i2t: tape.softmax_rows(logits)?, t2i: tape.softmax_cols(logits)?, n })
}

/// Affinities of `S = I T^T / tau`.
pub fn affinity<T: Real>(tape: &mut Tape<T>, image: Var, text: Var, tau: T) -> Result<AffinityPair> {
    if !(tau > T::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let n = pair_dims(tape, image, text)?;
    let s = tape.matmul_t(image, text, false, true)?;
    let logits = tape.scale(s, T::one() / tau)?;
    affinity_from_logits(tape, logits, n)
}

/// Affinities of `S = exp(min(logit_scale, ln 100)) I T^T`, the trainable-temperature form.
pub fn affinity_with_logit_scale<T: Real>(tape: &mut Tape<T>, image: Var, text: Var, logit_scale: Var) -> Result<AffinityPair> {
    let n = pair_dims(tape, image, text)?;
    let clamped = tape.clamp(logit_scale, T::zero(), T::c(MAX_LOGIT_SCALE))?;
    let scale = tape.exp(clamped)?;
    let s = tape.matmul_t(image, text, false, true)?;
    let logits = tape.scale_by(s, scale)?;
    affinity_from_logits(tape, logits, n)
}

/// Constant identity affinities for an `n`-pair batch.
pub fn identity_affinity<T: Real>(tape: &mut Tape<T>, n: usize) -> AffinityPair {
    let eye = tape.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() }));
    AffinityPair { i2t: eye, t2i: eye, n }
}

/// `-(1/N) sum_ij teacher_ij log max(student_ij, 1e-12)` over an `N x N` matrix.
pub fn soft_cross_entropy<T: Real>(tape: &mut Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    let (ss, ts) = (tape.value(student).shape().to_vec(), tape.value(teacher).shape().to_vec());
    if ss != ts {
        return Err(Error::shape("soft_cross_entropy", format!("student {ss:?} vs teacher {ts:?}")));
    }
    let (n, _) = tape.value(student).dims2()?;
    let logs = tape.log_clamped(student, T::c(LOG_FLOOR))?;
    let weighted = tape.mul(logs, teacher)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -T::one() / T::c(n as f64))
}

/// `CE(A_I2T^s, A_I2T^t) + CE(A_T2I^s, A_T2I^t)`.
pub fn distill_loss<T: Real>(tape: &mut Tape<T>, student: &AffinityPair, teacher: &AffinityPair) -> Result<Var> {
    if student.n != teacher.n {
        return Err(Error::shape("distill_loss", format!("student batch {} vs teacher batch {}", student.n, teacher.n)));
    }
    let a = soft_cross_entropy(tape, student.i2t, teacher.i2t)?;
    let b = soft_cross_entropy(tape, student.t2i, teacher.t2i)?;
    tape.add(a, b)
}

/// Half of [`distill_loss`] against the identity target.
pub fn contrastive_loss<T: Real>(tape: &mut Tape<T>, student: &AffinityPair) -> Result<Var> {
    let eye = identity_affinity(tape, student.n);
    let both = distill_loss(tape, student, &eye)?;
    tape.scale(both, T::c(0.5))
}

/// Sum of the formulas selected by `mode`. `logit_scale` feeds only [`InteractionMode::L0`].
pub fn interaction_loss<T: Real>(
    tape: &mut Tape<T>,
    mode: InteractionMode,
    student: &Embeds,
    teacher: Option<&Embeds>,
    tau: T,
    logit_scale: Var,
) -> Result<Var> {
    if mode == InteractionMode::L0 {
        let a = affinity_with_logit_scale(tape, student.image, student.text, logit_scale)?;
        return contrastive_loss(tape, &a);
    }
    let t = teacher.ok_or_else(|| Error::invalid(format!("interaction mode {mode:?} needs teacher embeddings")))?;
    match mode {
        InteractionMode::L0 => unreachable!(),
        InteractionMode::L1 => {
            let s = affinity(tape, student.image, student.text, tau)?;
            let tt = affinity(tape, t.image, t.text, tau)?;
            distill_loss(tape, &s, &tt)
        }
        InteractionMode::Cross => {
            let tt = affinity(tape, t.image, t.text, tau)?;
            let st = affinity(tape, student.image, t.text, tau)?;
            let ts = affinity(tape, t.image, student.text, tau)?;
            let l2 = distill_loss(tape, &st, &tt)?;
            let l3 = distill_loss(tape, &ts, &tt)?;
            tape.add(l2, l3)
        }
        InteractionMode::Single => {
            let ii = affinity(tape, student.image, t.image, tau)?;
            let tt = affinity(tape, student.text, t.text, tau)?;
            let eye = identity_affinity(tape, ii.n);
            let l4 = distill_loss(tape, &ii, &eye)?;
            let l5 = distill_loss(tape, &tt, &eye)?;
            tape.add(l4, l5)
        }
    }
}

/// `lambda (p - q) + beta (p - q)^2`, all scalars.
pub fn sparsity_loss<T: Real>(tape: &mut Tape<T>, p: Var, q: T, lambda: Var, beta: Var) -> Result<Var> {
    let gap = tape.add_scalar(p, -q)?;
    let lin = tape.mul(lambda, gap)?;
    let sq = tape.mul(gap, gap)?;
    let quad = tape.mul(beta, sq)?;
    tape.add(lin, quad)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check_many;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        for i in 0..n {
            let row = &mut t.data_mut()[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    fn scalar_of(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn single_pair_affinity_is_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let a = affinity(&mut tape, x, x, DISTILL_TAU).unwrap();
        assert_eq!(tape.value(a.i2t).data(), &[1.0]);
        assert_eq!(tape.value(a.t2i).data(), &[1.0]);
    }

    #[test]
    fn orthonormal_pair_diagonal_is_logistic_of_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = affinity(&mut tape, x, x, 1.0).unwrap();
        let want = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((tape.value(a.i2t).data()[0] - want).abs() < 1e-12);
        assert!((tape.value(a.t2i).data()[3] - want).abs() < 1e-12);
        assert!((want - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn affinity_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let y = tape.constant(Tensor::<f64>::zeros(&[3, 3]));
        assert!(affinity(&mut tape, x, x, 0.0).is_err());
        assert!(affinity(&mut tape, x, y, 1.0).is_err());
        let e = tape.constant(Tensor::<f64>::zeros(&[0, 3]));
        assert!(affinity(&mut tape, e, e, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let one_hot = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let uniform = tape.constant(Tensor::full(&[2, 2], 0.5));
        let zero = soft_cross_entropy(&mut tape, one_hot, one_hot).unwrap();
        assert_eq!(scalar_of(&tape, zero), 0.0);
        let l2 = soft_cross_entropy(&mut tape, uniform, one_hot).unwrap();
        assert!((scalar_of(&tape, l2) - 2f64.ln()).abs() < 1e-12);
        let h = soft_cross_entropy(&mut tape, uniform, uniform).unwrap();
        assert!((scalar_of(&tape, h) - 2f64.ln()).abs() < 1e-12);
        let bad = tape.constant(Tensor::full(&[2, 3], 0.5));
        assert!(soft_cross_entropy(&mut tape, bad, one_hot).is_err());
    }

    #[test]
    fn contrastive_reference_values() {
        let mut tape = Tape::new();
        let eye = identity_affinity::<f64>(&mut tape, 3);
        let l = contrastive_loss(&mut tape, &eye).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);
        let u = tape.constant(Tensor::full(&[4, 4], 0.25));
        let uniform = AffinityPair { i2t: u, t2i: u, n: 4 };
        let l = contrastive_loss(&mut tape, &uniform).unwrap();
        assert!((scalar_of(&tape, l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn self_distillation_equals_affinity_entropies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let i = tape.constant(unit_rows(5, 4, &mut rng));
        let t = tape.constant(unit_rows(5, 4, &mut rng));
        let a = affinity(&mut tape, i, t, 0.5).unwrap();
        let l = distill_loss(&mut tape, &a, &a).unwrap();
        let entropy = |m: &Tensor<f64>| -m.data().iter().map(|&p| p * p.ln()).sum::<f64>() / 5.0;
        let want = entropy(tape.value(a.i2t)) + entropy(tape.value(a.t2i));
        assert!((scalar_of(&tape, l) - want).abs() < 1e-12);
        assert!(scalar_of(&tape, l) > 0.0);
    }

    #[test]
    fn identity_teacher_is_twice_contrastive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let i = tape.constant(unit_rows(6, 4, &mut rng));
        let t = tape.constant(unit_rows(6, 4, &mut rng));
        let a = affinity(&mut tape, i, t, DISTILL_TAU).unwrap();
        let eye = identity_affinity(&mut tape, 6);
        let d = distill_loss(&mut tape, &a, &eye).unwrap();
        let c = contrastive_loss(&mut tape, &a).unwrap();
        assert_eq!(scalar_of(&tape, d), 2.0 * scalar_of(&tape, c));
    }

    #[test]
    fn sparsity_reference_values() {
        let mut tape = Tape::new();
        let (lam, beta) = (tape.scalar(MULTIPLIER_INIT), tape.scalar(MULTIPLIER_INIT));
        let p = tape.scalar(0.75);
        let l = sparsity_loss(&mut tape, p, 0.5, lam, beta).unwrap();
        assert!((scalar_of(&tape, l) - 0.003125).abs() < 1e-15);
        let p = tape.scalar(0.5);
        let l = sparsity_loss(&mut tape, p, 0.5, lam, beta).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);
    }

    fn embeds(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, n: usize) -> Embeds {
        Embeds { image: tape.constant(unit_rows(n, 4, rng)), text: tape.constant(unit_rows(n, 4, rng)) }
    }

    #[test]
    fn l1_mode_is_distill_loss_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let (s, t) = (embeds(&mut tape, &mut rng, 6), embeds(&mut tape, &mut rng, 6));
        let ls = tape.scalar(1.0);
        let l = interaction_loss(&mut tape, InteractionMode::L1, &s, Some(&t), DISTILL_TAU, ls).unwrap();
        let sa = affinity(&mut tape, s.image, s.text, DISTILL_TAU).unwrap();
        let ta = affinity(&mut tape, t.image, t.text, DISTILL_TAU).unwrap();
        let d = distill_loss(&mut tape, &sa, &ta).unwrap();
        assert_eq!(scalar_of(&tape, l), scalar_of(&tape, d));
        assert!(interaction_loss(&mut tape, InteractionMode::Cross, &s, None, DISTILL_TAU, ls).is_err());
    }

    #[test]
    fn single_mode_with_matching_embeddings_approaches_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let s = Embeds { image: tape.constant(unit_rows(4, 8, &mut rng)), text: tape.constant(unit_rows(4, 8, &mut rng)) };
        let ls = tape.scalar(1.0);
        let small = interaction_loss(&mut tape, InteractionMode::Single, &s, Some(&s), 1e-3, ls).unwrap();
        let big = interaction_loss(&mut tape, InteractionMode::Single, &s, Some(&s), 1.0, ls).unwrap();
        assert!(scalar_of(&tape, small) < 1e-6);
        assert!(scalar_of(&tape, big) > scalar_of(&tape, small));
    }

    #[test]
    fn cross_mode_l2_ignores_student_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let si = tape.leaf(unit_rows(4, 4, &mut rng), true);
        let st = tape.leaf(unit_rows(4, 4, &mut rng), true);
        let t = embeds(&mut tape, &mut rng, 4);
        let tt = affinity(&mut tape, t.image, t.text, DISTILL_TAU).unwrap();
        let a = affinity(&mut tape, si, t.text, DISTILL_TAU).unwrap();
        let l2 = distill_loss(&mut tape, &a, &tt).unwrap();
        tape.backward(l2).unwrap();
        assert!(tape.grad(st).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(tape.grad(si).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn every_mode_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in [InteractionMode::L0, InteractionMode::L1, InteractionMode::Cross, InteractionMode::Single] {
            let points = vec![
                Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)),
                Tensor::scalar(2.0),
            ];
            let err = grad_check_many(
                |tape, v| {
                    let n: Vec<Var> = v[..4].iter().map(|&x| tape.l2_normalize_rows(x)).collect::<Result<_>>()?;
                    let s = Embeds { image: n[0], text: n[1] };
                    let t = Embeds { image: n[2], text: n[3] };
                    interaction_loss(tape, mode, &s, Some(&t), 0.2, v[4])
                },
                &points,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{mode:?}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn affinities_are_stochastic(seed in any::<u64>(), n in prop::sample::select(vec![1usize, 2, 8, 64])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let i = tape.constant(unit_rows(n, 8, &mut rng));
            let t = tape.constant(unit_rows(n, 8, &mut rng));
            let a = affinity(&mut tape, i, t, DISTILL_TAU).unwrap();
            let (r, c) = (tape.value(a.i2t), tape.value(a.t2i));
            for k in 0..n {
                let row: f64 = r.data()[k * n..(k + 1) * n].iter().sum();
                let col: f64 = (0..n).map(|j| c.data()[j * n + k]).sum();
                prop_assert!((row - 1.0).abs() < 1e-6 && (col - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn affinities_ignore_pre_normalization_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw_i = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
            let raw_t = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
            let run = |k: f64| {
                let mut tape = Tape::new();
                let i = tape.constant(raw_i.map(|v| v * k));
                let t = tape.constant(raw_t.map(|v| v * k));
                let (i, t) = (tape.l2_normalize_rows(i).unwrap(), tape.l2_normalize_rows(t).unwrap());
                let a = affinity(&mut tape, i, t, DISTILL_TAU).unwrap();
                tape.value(a.i2t).clone()
            };
            prop_assert!(run(1.0).max_abs_diff(&run(scale)) < 1e-9);
        }

        #[test]
        fn self_distillation_is_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let e = embeds(&mut tape, &mut rng, 6);
            let a = affinity(&mut tape, e.image, e.text, DISTILL_TAU).unwrap();
            let l = distill_loss(&mut tape, &a, &a).unwrap();
            prop_assert!(scalar_of(&tape, l) >= 0.0);
        }
    }
}
