use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::corpus::Corpus;
use crate::inheritance::{compression_rate, MaskSet};
use crate::towers::{block_param, MaskValues};

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, d], |_| StandardNormal.sample(rng));
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    t
}

fn small_model() -> TwoTowerModel<f32> {
    TwoTowerModel::init(ModelConfig::small(2, 16, 2, 32, 8), 5).unwrap()
}

#[test]
fn random_embeddings_recall_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 400;
    let mean = (0..trials)
        .map(|_| {
            let (i, t) = (unit_rows(100, 16, &mut rng), unit_rows(100, 16, &mut rng));
            recall_at_1(&i, &t).unwrap().i2t
        })
        .sum::<f64>()
        / trials as f64;
    // Each trial averages 100 Bernoulli(0.01) hits.
    let sigma = (0.01f64 * 0.99 / (100.0 * trials as f64)).sqrt();
    assert!((mean - 0.01).abs() <= 3.0 * sigma, "mean {mean}, 3 sigma {}", 3.0 * sigma);
}

#[test]
fn aligned_oracle_recalls_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = unit_rows(50, 16, &mut rng);
    assert_eq!(recall_at_1(&e, &e).unwrap(), Recall { i2t: 1.0, t2i: 1.0 });
}

#[test]
fn ties_go_to_the_lowest_index() {
    let e = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(recall_at_1(&e, &e).unwrap(), Recall { i2t: 0.25, t2i: 0.25 });
}

#[test]
fn retrieval_needs_two_pairs() {
    let corpus = Corpus::generate(0, 50).unwrap();
    let one = corpus.heldout_batch::<f32>().slice(0..1);
    assert!(retrieval_eval(&small_model(), &one).is_err());
}

#[test]
fn clone_recalls_match_and_lie_in_unit_interval() {
    let corpus = Corpus::generate(0, 150).unwrap();
    let m = small_model();
    let pairs = corpus.heldout_batch::<f32>();
    let a = retrieval_eval(&m, &pairs).unwrap();
    assert_eq!(a, retrieval_eval(&m.clone(), &pairs).unwrap());
    assert!((0.0..=1.0).contains(&a.i2t) && (0.0..=1.0).contains(&a.t2i));
}

#[test]
fn embeddings_do_not_depend_on_worker_count() {
    let corpus = Corpus::generate(0, 300).unwrap();
    let m = small_model();
    let pairs = corpus.train_eval_batch::<f32>(150);
    let opts = ForwardOptsPair::default();
    let one = encode_pairs_on(1, &m, &pairs, &opts).unwrap();
    let three = encode_pairs_on(3, &m, &pairs, &opts).unwrap();
    assert_eq!(one, three);
}

fn zero_block(model: &mut TwoTowerModel<f32>, kind: TowerKind, layer: usize) {
    for name in ["attn.wo", "ffn.down"] {
        model.params.get_mut(&block_param(kind, layer, name)).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

#[test]
fn zero_output_block_is_fully_redundant() {
    let corpus = Corpus::generate(0, 150).unwrap();
    let mut m = small_model();
    zero_block(&mut m, TowerKind::Text, 1);
    zero_block(&mut m, TowerKind::Image, 0);
    let pairs = corpus.heldout_batch::<f32>();
    let r = layer_redundancy(&m, &pairs).unwrap();
    assert_eq!((r.image.len(), r.text.len()), (2, 2));
    assert!((r.text[1] - 1.0).abs() < 1e-6 && (r.image[0] - 1.0).abs() < 1e-6, "{r:?}");
    assert!(r.image.iter().chain(&r.text).all(|c| (-1.0..=1.0).contains(c)));
    let base = retrieval_eval(&m, &pairs).unwrap();
    assert_eq!(layer_ablation(&m, TowerKind::Text, 1, &pairs).unwrap(), base);
}

#[test]
fn ablation_index_checked() {
    let corpus = Corpus::generate(0, 50).unwrap();
    assert!(layer_ablation(&small_model(), TowerKind::Image, 2, &corpus.heldout_batch()).is_err());
}

#[test]
fn profile_covers_every_layer() {
    let corpus = Corpus::generate(0, 60).unwrap();
    let p = profile(&small_model(), &corpus.probe_batch(40), &corpus.heldout_batch()).unwrap();
    assert_eq!(p.layers.len(), 4);
    assert!((-1.0..=1.0).contains(&p.spearman));
    assert!(render_profile(&p).lines().count() == 7);
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    // Ranks [1.5, 1.5, 3] vs [1, 2, 3]: Pearson of the ranks is sqrt(3)/2.
    assert!((spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
    assert!(spearman(&[1.0], &[1.0]).is_err());
}

#[test]
fn mask_report_of_all_ones_is_full() {
    let cfg = ModelConfig::desk();
    let r = mask_report(&MaskSet::all_ones(&cfg), &cfg, cfg.maskable_params()).unwrap();
    assert_eq!(r.p, 1.0);
    assert_eq!(r.image.heads, r.image.heads_total);
    assert_eq!(r.text.ffn, r.text.ffn_total);
    assert_eq!(r.params_before, r.params_after);
    let text = render_report(&r);
    assert!(text.contains("4/4") && text.contains("128/128") && text.contains("64/64"));
}

#[test]
fn mask_report_totals_reproduce_rate() {
    let cfg = ModelConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let mut v = MaskValues::ones(&cfg);
        for kind in TowerKind::BOTH {
            let t = v.tower_mut(kind);
            for x in t.head.iter_mut().chain(t.int.iter_mut()).chain(t.embed.iter_mut()) {
                *x = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            }
        }
        let m = MaskSet::hard(v).unwrap();
        let r = mask_report(&m, &cfg, cfg.maskable_params()).unwrap();
        let recomputed = (r.image.kept + r.text.kept) as f64 / r.reference_maskable as f64;
        assert!((recomputed - compression_rate(&m, &cfg).unwrap()).abs() <= 1e-9);
    }
}

#[test]
fn mask_report_rejects_relaxed_masks() {
    let cfg = ModelConfig::desk();
    assert!(mask_report(&MaskSet::pass_through(&cfg), &cfg, cfg.maskable_params()).is_err());
}
