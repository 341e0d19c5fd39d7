use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const STEP: f64 = 1e-4;
const PRIMITIVE_TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts `y` with fixed random weights so every output coordinate matters.
fn contract(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&shape, &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_unary(shape: &[usize], op: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..10 {
        let point = random(shape, &mut rng);
        let err = grad_check(
            |t, x| {
                let y = op(t, x)?;
                contract(t, y, 100 + trial)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err <= PRIMITIVE_TOL, "trial {trial}: relative error {err:e}");
    }
}

fn check_many(shapes: &[&[usize]], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let points: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let err = grad_check_many(
            |t, xs| {
                let y = op(t, xs)?;
                contract(t, y, 200 + trial)
            },
            &points,
            STEP,
        )
        .unwrap();
        assert!(err <= PRIMITIVE_TOL, "trial {trial}: relative error {err:e}");
    }
}

#[test]
fn matmul_scalar_product() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let b = t.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[6.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let y = t.softmax_rows(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn gelu_at_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::scalar(0.0));
    let y = t.gelu(x).unwrap();
    assert_eq!(t.value(y).item(), 0.0);
}

#[test]
fn square_derivative() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(3.0), true);
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::<f64>::new();
    let x = t.leaf(random(&[1, 6], &mut rng), true);
    let y = t.softmax_rows(x).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    for &g in t.grad(x).unwrap().data() {
        assert!(g.abs() < 1e-15, "gradient {g}");
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2, 2]), true);
    let y = t.scale(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(s)) if s == vec![2, 2]));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = t.constant(Tensor::zeros(&[3, 2]));
    let msg = t.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] vs [3, 2]"), "{msg}");
}

#[test]
fn grad_check_of_sum_is_exact_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = random(&[3, 4], &mut rng);
    let mut t = Tape::new();
    let x = t.leaf(point.clone(), true);
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    let err = grad_check(|t, x| t.sum(x), &point, STEP).unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn grad_check_of_logsumexp() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let point = random(&[1, 8], &mut rng);
    let err = grad_check(
        |t, x| {
            let e = t.exp(x)?;
            let s = t.sum(e)?;
            t.log(s)
        },
        &point,
        STEP,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err:e}");

    // The analytic gradient of logsumexp is softmax(x).
    let mut t = Tape::new();
    let x = t.leaf(point.clone(), true);
    let e = t.exp(x).unwrap();
    let s = t.sum(e).unwrap();
    let l = t.log(s).unwrap();
    t.backward(l).unwrap();
    let mut expected = point.data().to_vec();
    softmax_inplace(&mut expected);
    for (g, e) in t.grad(x).unwrap().data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-14);
    }
}

#[test]
fn grad_check_reports_non_finite() {
    // Only the second coordinate's backward probe leaves the log's domain.
    let point = Tensor::new(&[2], vec![1.0, 1e-6]).unwrap();
    let err = grad_check(
        |t, x| {
            let l = t.log_clamped(x, 0.0)?;
            t.sum(l)
        },
        &point,
        STEP,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
}

#[test]
fn repeated_use_accumulates_additively() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(&[1, 3], vec![0.1, -0.4, 0.7]).unwrap(), true);
    let a = t.gelu(x).unwrap();
    let b = t.gelu(x).unwrap();
    let s = t.add(a, b).unwrap();
    let l = t.sum(s).unwrap();
    t.backward(l).unwrap();
    let twice = t.grad(x).unwrap().clone();

    let mut t1 = Tape::<f64>::new();
    let x1 = t1.leaf(Tensor::new(&[1, 3], vec![0.1, -0.4, 0.7]).unwrap(), true);
    let a1 = t1.gelu(x1).unwrap();
    let l1 = t1.sum(a1).unwrap();
    t1.backward(l1).unwrap();
    for (g2, g1) in twice.data().iter().zip(t1.grad(x1).unwrap().data()) {
        assert_eq!(*g2, 2.0 * g1);
    }

    // A second backward accumulates into the leaf.
    t1.backward(l1).unwrap();
    let after = t1.grad(x1).unwrap().clone();
    for (g2, g) in twice.data().iter().zip(after.data()) {
        assert_eq!(g2, g);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::from_fn(&[17, 64], |_| rng.random_range(-1.0..1.0)));
        let b = t.constant(Tensor::from_fn(&[64, 48], |_| rng.random_range(-1.0..1.0)));
        let c = t.matmul(a, b).unwrap();
        let d = t.softmax_rows(c).unwrap();
        t.value(d).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn clearing_releases_intermediates() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones(&[2, 2]), true);
    let y = t.exp(x).unwrap();
    let z = t.sum(y).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.live_values(), 3);
    t.clear_intermediates();
    assert_eq!(t.live_values(), 1);
    assert!(t.grad(x).is_some());
}

// ---- per-primitive gradient checks ----------------------------------------

#[test]
fn grad_matmul_all_transposes() {
    check_many(&[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
    check_many(&[&[4, 3], &[4, 5]], |t, v| t.matmul_t(v[0], v[1], true, false));
    check_many(&[&[3, 4], &[5, 4]], |t, v| t.matmul_t(v[0], v[1], false, true));
    check_many(&[&[4, 3], &[5, 4]], |t, v| t.matmul_t(v[0], v[1], true, true));
    // Same operand on both sides.
    check_unary(&[3, 4], |t, x| t.matmul_t(x, x, false, true));
}

#[test]
fn grad_transpose() {
    check_unary(&[3, 5], |t, x| t.transpose(x));
}

#[test]
fn grad_elementwise_binary() {
    check_many(&[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]));
    check_many(&[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]));
    check_many(&[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]));
    check_many(&[&[4, 3], &[3]], |t, v| t.add_row(v[0], v[1]));
    check_many(&[&[4, 3], &[1, 3]], |t, v| t.mul_row(v[0], v[1]));
    check_many(&[&[4, 3], &[1]], |t, v| t.scale_by(v[0], v[1]));
}

#[test]
fn grad_elementwise_unary() {
    check_unary(&[3, 4], |t, x| t.scale(x, -1.7));
    check_unary(&[3, 4], |t, x| t.add_scalar(x, 0.3));
    check_unary(&[3, 4], |t, x| t.exp(x));
    check_unary(&[3, 4], |t, x| {
        let e = t.exp(x)?;
        t.log(e)
    });
    check_unary(&[3, 4], |t, x| t.sigmoid(x));
    check_unary(&[3, 4], |t, x| t.gelu(x));
    // Inputs lie in (-1, 1); clamp bounds sit outside so the kink is not probed.
    check_unary(&[3, 4], |t, x| t.clamp(x, -2.0, 2.0));
}

#[test]
fn grad_reductions() {
    check_unary(&[3, 4], |t, x| {
        let s = t.sum(x)?;
        t.mul(s, s)
    });
    check_unary(&[3, 4], |t, x| {
        let s = t.mean(x)?;
        t.exp(s)
    });
}

#[test]
fn grad_softmax_both_orientations() {
    check_unary(&[4, 5], |t, x| t.softmax_rows(x));
    check_unary(&[4, 5], |t, x| t.softmax_cols(x));
}

#[test]
fn grad_l2_normalize() {
    check_unary(&[4, 5], |t, x| t.l2_normalize_rows(x));
}

#[test]
fn grad_select_and_concat() {
    check_unary(&[4, 3], |t, x| t.select_rows(x, &[2, 0, 2, 3]));
    check_unary(&[4, 3], |t, x| t.select_cols(x, &[1, 1, 0, 2, 2]));
    check_many(&[&[2, 3], &[3, 3]], |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
}

#[test]
fn grad_layer_norm_plain() {
    check_many(&[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], None, 1e-5));
}

#[test]
fn grad_layer_norm_with_soft_mask() {
    check_many(&[&[3, 6], &[6], &[6], &[1, 6]], |t, v| {
        // map the mask into (0.3, 1.0) so the weight never vanishes
        let m = t.sigmoid(v[3])?;
        let m = t.scale(m, 0.7)?;
        let m = t.add_scalar(m, 0.3)?;
        t.layer_norm(v[0], v[1], v[2], Some(m), 1e-5)
    });
}

#[test]
fn layer_norm_binary_mask_matches_compact_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[3, 5], &mut rng);
    let g = random(&[5], &mut rng);
    let b = random(&[5], &mut rng);
    let keep = [0usize, 2, 3];
    let mask = Tensor::new(&[5], vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let mut t = Tape::<f64>::new();
    let (xv, gv, bv, mv) = (t.constant(x), t.constant(g), t.constant(b), t.constant(mask));
    let full = t.layer_norm(xv, gv, bv, Some(mv), 1e-5).unwrap();
    let xc = t.select_cols(xv, &keep).unwrap();
    let gc = t.select_cols(gv, &keep).unwrap();
    let bc = t.select_cols(bv, &keep).unwrap();
    let compact = t.layer_norm(xc, gc, bc, None, 1e-5).unwrap();
    let full_kept = t.select_cols(full, &keep).unwrap();
    assert!(t.value(full_kept).max_abs_diff(t.value(compact)) < 1e-15);
    let dropped = t.select_cols(full, &[1, 4]).unwrap();
    assert!(t.value(dropped).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_attention() {
    let (batch, tokens, heads, hd) = (2, 3, 2, 2);
    let w = heads * hd;
    let key_mask = vec![true, true, false, true, true, true];
    check_many(&[&[batch * tokens, w], &[batch * tokens, w], &[batch * tokens, w]], |t, v| {
        t.attention(v[0], v[1], v[2], batch, tokens, heads, hd, Some(&key_mask))
    });
}

#[test]
fn attention_ignores_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&[3, 2], &mut rng);
    let k = random(&[3, 2], &mut rng);
    let mut v = random(&[3, 2], &mut rng);
    let mask = [true, true, false];
    let run = |v: Tensor<f64>| {
        let mut t = Tape::<f64>::new();
        let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v));
        let o = t.attention(qv, kv, vv, 1, 3, 1, 2, Some(&mask)).unwrap();
        t.value(o).clone()
    };
    let before = run(v.clone());
    v.data_mut()[4] = 100.0;
    v.data_mut()[5] = -100.0;
    assert_eq!(before, run(v));
}
