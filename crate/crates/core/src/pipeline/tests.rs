use super::*;
use crate::corpus::Corpus;
use crate::towers::ModelConfig;

fn targets(p: &StagePlan) -> Vec<f64> {
    p.stages.iter().map(|s| s.target).collect()
}

#[test]
fn quarter_target_takes_three_stages() {
    let p = stage_plan(0.25, 0.25, 3000).unwrap();
    assert_eq!(targets(&p), vec![0.75, 0.5, 0.25]);
    assert!(p.stages.iter().all(|s| s.steps == 1000 && s.warmup == 300));
}

#[test]
fn half_target_takes_two_stages() {
    let p = stage_plan(0.5, 0.25, 1001).unwrap();
    assert_eq!(targets(&p), vec![0.75, 0.5]);
    assert_eq!(p.stages.iter().map(|s| s.steps).collect::<Vec<_>>(), vec![500, 501]);
}

#[test]
fn full_target_is_an_empty_plan() {
    let p = stage_plan(1.0, 0.25, 1000).unwrap();
    assert!(p.stages.is_empty());
    assert_eq!(p.total_steps, 0);
}

#[test]
fn uneven_target_ends_exactly_on_it() {
    assert_eq!(targets(&stage_plan(0.3, 0.25, 100).unwrap()), vec![0.75, 0.5, 0.3]);
    assert_eq!(targets(&stage_plan(0.25, 0.75, 100).unwrap()), vec![0.25]);
}

#[test]
fn invalid_targets_rejected() {
    assert!(stage_plan(0.0, 0.25, 100).is_err());
    assert!(stage_plan(1.5, 0.25, 100).is_err());
    assert!(plan_from_targets(&[0.5, 0.75], 0.75, 100).is_err());
    assert!(plan_from_targets(&[0.75, 0.5], 0.25, 100).is_err());
    assert!(stage_plan(0.25, 0.25, 2).is_err());
}

#[test]
fn warmup_is_capped() {
    assert_eq!(warmup_steps(100_000, 3000, 0.3), 3000);
    assert_eq!(warmup_steps(1000, 3000, 0.3), 300);
    assert_eq!(warmup_steps(3, 3000, 0.3), 0);
}

#[test]
fn config_budgets_override_even_split() {
    let cfg = DistillConfig { target: 0.5, stage_steps: Some(vec![100, 300]), ..DistillConfig::default() };
    let p = cfg.plan().unwrap();
    assert_eq!(p.total_steps, 400);
    assert_eq!(p.stages.iter().map(|s| s.warmup).collect::<Vec<_>>(), vec![30, 90]);
    let bad = DistillConfig { stage_steps: Some(vec![100]), ..cfg };
    assert!(bad.plan().is_err());
}

#[test]
fn ramp_is_linear_between_stage_targets() {
    assert_eq!(ramp_target(1.0, 0.75, 100, 100).unwrap(), 0.75);
    assert!((ramp_target(1.0, 0.75, 50, 100).unwrap() - 0.875).abs() < 1e-15);
    assert_eq!(ramp_target(0.5, 0.5, 7, 10).unwrap(), 0.5);
    assert!(ramp_target(1.0, 0.5, 0, 10).is_err());
    assert!(ramp_target(1.0, 0.5, 11, 10).is_err());
}

#[test]
fn default_learning_rates() {
    assert_eq!(DistillConfig::default().lr(), 1e-4);
    assert_eq!(DistillConfig { inherit: InheritMode::None, ..DistillConfig::default() }.lr(), 5e-4);
    assert_eq!(DistillConfig { lr: Some(3e-3), ..DistillConfig::default() }.lr(), 3e-3);
}

#[test]
fn mode_names_parse() {
    assert_eq!("manual".parse::<InheritMode>().unwrap(), InheritMode::Manual);
    assert_eq!("AUTO".parse::<InheritMode>().unwrap(), InheritMode::Auto);
    assert!("half".parse::<InheritMode>().is_err());
}

fn tiny_run(inherit: InheritMode, seed: u64) -> (PipelineResult, String, String) {
    let corpus = Corpus::generate(0, 200).unwrap();
    let teacher = TwoTowerModel::<f32>::init(ModelConfig::small(2, 16, 2, 32, 8), 1).unwrap();
    let before = checksum(&teacher);
    let cfg = DistillConfig { target: 0.5, total_steps: 20, batch: 8, inherit, seed, lr: Some(1e-3), ..DistillConfig::default() };
    let r = run_pipeline(&teacher, &corpus, &cfg, None).unwrap();
    let after = checksum(&teacher);
    assert_eq!(before, after, "teacher changed");
    let c = checksum(&r.model);
    (r, c, after)
}

#[test]
fn pipeline_runs_every_budgeted_step_and_is_deterministic() {
    let (a, ca, _) = tiny_run(InheritMode::Auto, 3);
    assert_eq!(a.log.len(), 20);
    assert_eq!(a.log.iter().filter(|r| r.phase == "mask").count(), 6);
    assert!(a.log.iter().enumerate().all(|(i, r)| r.step == i));
    assert_eq!(a.stages.len(), 2);
    assert!(a.stages[1].census_ratio < a.stages[0].census_ratio);
    let (b, cb, _) = tiny_run(InheritMode::Auto, 3);
    assert_eq!(ca, cb);
    let la: Vec<String> = a.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let lb: Vec<String> = b.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert_eq!(la, lb);
}

#[test]
fn manual_and_none_share_the_final_shape() {
    let (m, _, _) = tiny_run(InheritMode::Manual, 0);
    let (n, _, _) = tiny_run(InheritMode::None, 0);
    assert_eq!(m.model.config, n.model.config);
    assert_eq!(m.log.len(), 20);
    assert_eq!(n.log.len(), 20);
    assert!((m.stages.last().unwrap().census_ratio - 0.5).abs() < 0.05);
}

#[test]
fn empty_plan_returns_teacher_unchanged() {
    let corpus = Corpus::generate(0, 50).unwrap();
    let teacher = TwoTowerModel::<f32>::init(ModelConfig::small(1, 8, 2, 8, 4), 1).unwrap();
    let cfg = DistillConfig { target: 1.0, total_steps: 10, ..DistillConfig::default() };
    let r = run_pipeline(&teacher, &corpus, &cfg, None).unwrap();
    assert_eq!(checksum(&r.model), checksum(&teacher));
    assert!(r.log.is_empty());
}

#[test]
fn teacher_training_needs_two_pairs() {
    let corpus = Corpus::generate(0, 2).unwrap();
    let cfg = TeacherConfig { model: ModelConfig::small(1, 8, 2, 8, 4), steps: 1, ..TeacherConfig::default() };
    assert!(train_teacher(&cfg, &corpus).is_err());
}

#[test]
fn contrastive_loss_of_random_embeddings_is_near_log_batch() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (b, d) = (16, 512);
    let mut unit = || {
        let mut t = crate::autodiff::Tensor::<f64>::from_fn(&[b, d], |_| StandardNormal.sample(&mut rng));
        for row in t.data_mut().chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        t
    };
    let trials = 50;
    let mut mean = 0.0;
    for _ in 0..trials {
        let mut tape = Tape::new();
        let (i, t) = (tape.constant(unit()), tape.constant(unit()));
        let s = tape.constant(crate::autodiff::Tensor::scalar(crate::towers::INIT_LOGIT_SCALE));
        let a = affinity_with_logit_scale(&mut tape, i, t, s).unwrap();
        let l = contrastive_loss(&mut tape, &a).unwrap();
        mean += tape.value(l).item() / trials as f64;
    }
    // Logits have spread exp(scale) / sqrt(d) ~ 0.63, which lifts the loss by about half its variance.
    let ln = (b as f64).ln();
    assert!(mean > ln && mean - ln < 0.3, "mean loss {mean} vs ln {b} = {ln}");
}
