use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, check_op, ALL_OPS};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn leaf(t: &mut Tape, rows: &[Vec<f64>]) -> Var {
    t.constant(Tensor::from_rows(rows).unwrap())
}

#[test]
fn matmul_identity_cases() {
    let mut t = Tape::new();
    let i3 = t.constant(Tensor::identity(3));
    let b = leaf(&mut t, &[vec![1., 2., 3.], vec![4., 5., 6.], vec![7., 8., 9.]]);
    let out = t.matmul(i3, b).unwrap();
    assert_eq!(t.value(out), t.value(b));

    let a = leaf(&mut t, &[vec![1., 2.], vec![3., 4.]]);
    let i2 = t.constant(Tensor::identity(2));
    let out = t.matmul(a, i2).unwrap();
    assert_eq!(t.value(out).data(), &[1., 2., 3., 4.]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 5]));
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    let r = gradcheck::check(&[a, b], 1e-3, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0, 0.0], &[0.5, 0.5]),
        (&[1000.0, 1000.0, 1000.0], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
        (&[1.0, 2.0, 3.0], &[0.09003, 0.24473, 0.66524]),
    ];
    for (input, expected) in cases {
        let x = t.constant(Tensor::vector(input.to_vec()));
        let y = t.softmax(x, Axis::Cols, None).unwrap();
        for (got, want) in t.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }
}

#[test]
fn softmax_rows_axis_normalizes_columns() {
    let mut t = Tape::new();
    let x = leaf(&mut t, &[vec![1.0, 5.0], vec![2.0, -3.0], vec![0.5, 0.0]]);
    let y = t.softmax(x, Axis::Rows, None).unwrap();
    let v = t.value(y);
    for c in 0..2 {
        let s: f64 = (0..3).map(|r| v.get2(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_zeroes_masked_positions() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![3.0, 1.0, 2.0]));
    let y = t.softmax(x, Axis::Cols, Some(&[true, false, true])).unwrap();
    let v = t.value(y).data();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn elementwise_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-2.0, 3.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 3.0]);

    let one = t.constant(Tensor::vector(vec![1.0]));
    let e = t.exp(one);
    let l = t.log(e).unwrap();
    assert!((t.value(l).item() - 1.0).abs() < 1e-12);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    let y = t.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(t.log(y), Err(Error::Domain { .. })));
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, 1.0, -1.0]), true);
    let y = t.relu(x);
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn cosine_examples() {
    let mut t = Tape::new();
    let a = leaf(
        &mut t,
        &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8], vec![0.0, 0.0]],
    );
    let b = leaf(&mut t, &[vec![1.0, 0.0], vec![-0.6, -0.8]]);
    let c = t.cosine_rows(a, b).unwrap();
    let v = t.value(c);
    assert!((v.get2(0, 0) - 1.0).abs() < 1e-12);
    assert!(v.get2(1, 0).abs() < 1e-12);
    assert!((v.get2(2, 1) + 1.0).abs() < 1e-12);
    assert_eq!(v.get2(3, 0), 0.0);
    assert_eq!(v.get2(3, 1), 0.0);
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, window: usize, groups: usize) -> Vec<f64> {
    let (n, h) = x.dims2().unwrap();
    let per = h / groups;
    let pad = (window as isize - 1) / 2;
    let mut out = vec![0.0; n * h];
    for t in 0..n as isize {
        for o in 0..h {
            let g = o / per;
            let mut acc = b.data()[o];
            for c in 0..per {
                for j in 0..window as isize {
                    let src = t + j - pad;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let wv = w.data()[(o * per + c) * window + j as usize];
                    acc += wv * x.get2(src as usize, g * per + c);
                }
            }
            out[t as usize * h + o] = acc;
        }
    }
    out
}

#[test]
fn conv_window_one_identity_filters_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, h, groups) = (6, 4, 2);
    let x = rand_tensor(&mut rng, &[n, h], -1.0, 1.0);
    let per = h / groups;
    let mut w = vec![0.0; h * per];
    for o in 0..h {
        w[o * per + o % per] = 1.0;
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let wv = t.constant(Tensor::new(&[h, per, 1], w).unwrap());
    let bv = t.constant(Tensor::zeros(&[h]));
    let y = t.conv1d(xv, wv, bv, 1, groups).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_constant_input_with_unit_filters_is_constant_inside() {
    let (n, h, groups, window) = (12, 4, 2, 5);
    let per = h / groups;
    let x = Tensor::full(&[n, h], 0.7);
    let w = Tensor::full(&[h, per, window], 1.0 / (per * window) as f64);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let wv = t.constant(w);
    let bv = t.constant(Tensor::zeros(&[h]));
    let y = t.conv1d(xv, wv, bv, window, groups).unwrap();
    let v = t.value(y);
    for r in 2..n - 2 {
        for c in 0..h {
            assert!((v.get2(r, c) - 0.7).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(n, h, groups, window) in &[(9, 8, 4, 3), (5, 6, 3, 7), (1, 4, 1, 3), (17, 8, 8, 31)] {
        let x = rand_tensor(&mut rng, &[n, h], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[h, h / groups, window], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[h], -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv1d(xv, wv, bv, window, groups).unwrap();
        let expected = naive_conv(&x, &w, &b, window, groups);
        for (a, e) in t.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn conv_rejects_indivisible_channels() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3, 6]));
    let w = t.constant(Tensor::zeros(&[6, 1, 3]));
    let b = t.constant(Tensor::zeros(&[6]));
    assert!(matches!(t.conv1d(x, w, b, 3, 4), Err(Error::Config(_))));
}

#[test]
fn backward_of_sum_and_square() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(p).data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let p = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
    let sq = t.mul(p, p).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(p).data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(t.backward(p), Err(Error::Contract(_))));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut t = Tape::new();
    let used = t.leaf(Tensor::vector(vec![1.0]), true);
    let unused = t.leaf(Tensor::zeros(&[2, 2]), true);
    let s = t.sum(used);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(unused), Tensor::zeros(&[2, 2]));
}

#[test]
fn gather_pads_with_zero_and_blocks_padding_gradient() {
    let table = Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let mut t = Tape::new();
    let tv = t.leaf(table, true);
    let e = t.gather(tv, &[2, 0, 2]).unwrap();
    assert_eq!(t.value(e).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
    let s = t.sum(e);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(tv).data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(t.gather(tv, &[3]).is_err());
}

#[test]
fn kernel_pool_closed_forms() {
    let mus = [1.0];
    let sig = [0.1];
    let mut t = Tape::new();
    let row = t.constant(Tensor::new(&[1, 300], vec![1.0; 300]).unwrap());
    let k = t.kernel_pool(row, 0, 300, &[true; 300], &mus, &sig).unwrap();
    assert!((t.value(k).item() - 300f64.ln()).abs() < 1e-9);

    let row = t.constant(Tensor::new(&[1, 2], vec![0.2, 0.9]).unwrap());
    let k = t.kernel_pool(row, 0, 2, &[true, true], &mus, &sig).unwrap();
    let expected = ((-32.0f64).exp() + (-0.5f64).exp() + 1e-10).ln();
    assert!((t.value(k).item() - expected).abs() < 1e-12);
    assert!((t.value(k).item() + 0.5).abs() < 1e-6);
}

#[test]
fn kernel_pool_fully_masked_row_hits_floor() {
    let mut t = Tape::new();
    let row = t.constant(Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap());
    let k = t.kernel_pool(row, 0, 3, &[false; 3], &[0.0, 0.5], &[0.1, 0.1]).unwrap();
    for v in t.value(k).data() {
        assert!((v - 1e-10f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_two_point_and_constant() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
    let y = t.batch_norm(x, None).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

    let c = t.constant(Tensor::vector(vec![4.0; 5]));
    let y = t.batch_norm(c, None).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));

    let one = t.constant(Tensor::vector(vec![1.0]));
    assert!(t.batch_norm(one, None).is_err());
}

#[test]
fn softplus_is_stable() {
    assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    assert!((softplus(-20.0) - 2.0611536e-9).abs() < 1e-15);
    assert!((softplus(20.0) - 20.0).abs() < 1e-8);
    assert!(softplus(1e4).is_finite() && softplus(-1e4) == 0.0);
}

#[test]
fn dropout_is_identity_without_rng() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(t.dropout(x, 0.5).unwrap(), x);

    let mut t = Tape::with_dropout(ChaCha8Rng::seed_from_u64(1));
    let x = t.constant(Tensor::vector(vec![1.0; 1000]));
    let y = t.dropout(x, 0.2).unwrap();
    let v = t.value(y).data();
    assert!(v.iter().all(|x| *x == 0.0 || (*x - 1.25).abs() < 1e-12));
    let kept = v.iter().filter(|x| **x > 0.0).count();
    assert!((700..900).contains(&kept));
}

#[test]
fn reverse_order_and_fan_out_accumulate() {
    // y = x*x + 3x ; dy/dx = 2x + 3
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![2.0]), true);
    let a = t.mul(x, x).unwrap();
    let b = t.scale(x, 3.0);
    let y = t.add(a, b).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).item(), 7.0);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = rand_tensor(&mut rng, &[7, 9], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[9, 4], -1.0, 1.0);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let m = t.matmul(av, bv).unwrap();
        let s = t.softmax(m, Axis::Cols, None).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_op_passes_a_gradient_check() {
    for case in ALL_OPS {
        let r = check_op(case, 1).unwrap();
        assert!(r.max_rel_err < 1e-4, "{case:?}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_gradient_checks(seed in 0u64..1_000_000) {
        for case in ALL_OPS {
            let r = check_op(case, seed).unwrap();
            prop_assert!(r.max_rel_err < 1e-4, "{:?} seed {}: {:?}", case, seed, r);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vals));
        let y = t.softmax(x, Axis::Cols, None).unwrap();
        let v = t.value(y).data();
        prop_assert!(v.iter().all(|p| *p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_stays_in_range(a in prop::collection::vec(-3f64..3.0, 12), b in prop::collection::vec(-3f64..3.0, 8)) {
        let mut t = Tape::new();
        let av = t.constant(Tensor::new(&[3, 4], a).unwrap());
        let bv = t.constant(Tensor::new(&[2, 4], b).unwrap());
        let c = t.cosine_rows(av, bv).unwrap();
        prop_assert!(t.value(c).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
