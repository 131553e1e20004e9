use super::*;
use crate::gradcheck;
use crate::probe::AllocationProbe;
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    uniform(&[rows, cols], 2.0, &mut rng(seed))
}

fn naive_standard(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = q.dims2().unwrap();
    let (_, dv) = v.dims2().unwrap();
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            for c in 0..d {
                logits[j] += q.get2(i, c) * k.get2(j, c);
            }
            logits[j] /= (d as f64).sqrt();
        }
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for j in 0..n {
            let p = (logits[j] - mx).exp() / z;
            for e in 0..dv {
                out[i * dv + e] += p * v.get2(j, e);
            }
        }
    }
    out
}

fn naive_separable(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = q.dims2().unwrap();
    let (_, dv) = v.dims2().unwrap();
    let mut a = vec![0.0; d * dv];
    for c in 0..d {
        let z: f64 = (0..n).map(|j| k.get2(j, c).exp()).sum();
        for j in 0..n {
            let w = k.get2(j, c).exp() / z;
            for e in 0..dv {
                a[c * dv + e] += w * v.get2(j, e);
            }
        }
    }
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let z: f64 = (0..d).map(|c| q.get2(i, c).exp()).sum();
        for c in 0..d {
            let w = q.get2(i, c).exp() / z;
            for e in 0..dv {
                out[i * dv + e] += w * a[c * dv + e];
            }
        }
    }
    out
}

type AttnFn = fn(&mut Tape, Var, Var, Var, Option<&[bool]>) -> Result<Var>;

fn run(f: AttnFn, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = f(&mut tape, qv, kv, vv, mask).unwrap();
    tape.value(out).clone()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn attention_matches_loop_oracles() {
    for seed in 0..10 {
        let (q, k, v) = (random(6, 8, seed), random(6, 8, seed + 100), random(6, 8, seed + 200));
        let s = run(standard_self_attention, &q, &k, &v, None);
        assert!(max_diff(s.data(), &naive_standard(&q, &k, &v)) < 1e-10);
        let p = run(separable_self_attention, &q, &k, &v, None);
        assert!(max_diff(p.data(), &naive_separable(&q, &k, &v)) < 1e-10);
    }
}

#[test]
fn single_position_returns_value() {
    let (q, k, v) = (random(1, 4, 1), random(1, 4, 2), random(1, 4, 3));
    for f in [standard_self_attention as AttnFn, separable_self_attention] {
        let out = run(f, &q, &k, &v, None);
        assert!(out.max_abs_diff(&v) < 1e-15);
    }
}

#[test]
fn identical_keys_average_values() {
    let q = random(5, 4, 1);
    let k = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0, 0.5]; 5]).unwrap();
    let v = random(5, 3, 2);
    let out = run(standard_self_attention, &q, &k, &v, None);
    for i in 0..5 {
        for e in 0..3 {
            let mean = (0..5).map(|j| v.get2(j, e)).sum::<f64>() / 5.0;
            assert!((out.get2(i, e) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn separable_invariant_to_joint_key_value_permutation() {
    let (q, k, v) = (random(7, 4, 1), random(7, 4, 2), random(7, 5, 3));
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permute = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let a = run(separable_self_attention, &q, &k, &v, None);
    let b = run(separable_self_attention, &q, &permute(&k), &permute(&v), None);
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn masked_keys_behave_as_absent() {
    let (q, k, v) = (random(5, 4, 4), random(5, 4, 5), random(5, 4, 6));
    let keep = [true, false, true, true, false];
    let rows = |t: &Tensor| {
        let r: Vec<Vec<f64>> = (0..5).filter(|i| keep[*i]).map(|i| t.row(i).to_vec()).collect();
        Tensor::from_rows(&r).unwrap()
    };
    for f in [standard_self_attention as AttnFn, separable_self_attention] {
        let masked = run(f, &q, &k, &v, Some(&keep));
        let dropped = run(f, &q, &rows(&k), &rows(&v), None);
        for i in 0..5 {
            assert!(max_diff(masked.row(i), dropped.row(i)) < 1e-12);
        }
    }
}

fn tiny_cfg() -> AttentionConfig {
    AttentionConfig {
        model_dim: 8,
        heads: 2,
        conv_window: 3,
        conv_groups: 2,
        dropout: 0.2,
        layers: 1,
        ff_dim: 8,
    }
}

fn default_cfg() -> AttentionConfig {
    crate::config::Config::default().attention()
}

#[test]
fn layer_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut params = ParamStore::new();
    let layer = EncoderLayer::init(&mut params, "l", &cfg, AttentionKind::Separable, &mut rng(3)).unwrap();
    let x = params.add("x", random(5, 8, 9));
    let report = gradcheck::check_params(&params, 1e-4, |tape, p| {
        let xv = p.var(tape, x);
        let y = conformer_forward(tape, p, &layer, xv, &cfg)?;
        gradcheck::weighted_sum(tape, y)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn standard_layer_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut params = ParamStore::new();
    let layer = EncoderLayer::init(&mut params, "l", &cfg, AttentionKind::Standard, &mut rng(4)).unwrap();
    let x = params.add("x", random(4, 8, 10));
    let report = gradcheck::check_params(&params, 1e-4, |tape, p| {
        let xv = p.var(tape, x);
        let y = layer.forward(tape, p, xv, None, &cfg)?;
        gradcheck::weighted_sum(tape, y)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

fn setup(cfg: AttentionConfig, vocab: usize) -> (ParamStore, Encoder, ParamId) {
    let mut params = ParamStore::new();
    let mut r = rng(11);
    let table = params.add("embed", text::init_embeddings(vocab, cfg.model_dim, &mut r));
    let enc = Encoder::init(&mut params, cfg, &mut r).unwrap();
    (params, enc, table)
}

fn encode(params: &ParamStore, enc: &Encoder, table: ParamId, ids: Vec<u32>) -> Tensor {
    let mut tape = Tape::new();
    let t = params.var(&mut tape, table);
    let seq = TokenSequence::new(ids, usize::MAX);
    let out = encode_document(&mut tape, params, t, &seq, enc).unwrap();
    tape.value(out).clone()
}

fn ids(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(1..vocab as u32)).collect()
}

#[test]
fn default_shape_and_determinism() {
    let (params, enc, table) = setup(default_cfg(), 64);
    for n in [1, 7, 300] {
        let a = encode(&params, &enc, table, ids(n, 64, n as u64));
        assert_eq!(a.shape(), &[n, 256]);
        if n == 7 {
            let b = encode(&params, &enc, table, ids(n, 64, n as u64));
            assert_eq!(a.data(), b.data());
        }
    }
}

#[test]
fn empty_stack_returns_embeddings() {
    let cfg = AttentionConfig {
        layers: 0,
        ..tiny_cfg()
    };
    let (params, enc, table) = setup(cfg, 20);
    let doc = vec![3, 0, 7, 19];
    let out = encode(&params, &enc, table, doc.clone());
    for (r, id) in doc.iter().enumerate() {
        let want = if *id == 0 {
            vec![0.0; 8]
        } else {
            params.get(table).row(*id as usize).to_vec()
        };
        assert_eq!(out.row(r), want.as_slice());
    }
}

#[test]
fn padding_rows_stay_zero() {
    let cfg = AttentionConfig {
        layers: 2,
        ..tiny_cfg()
    };
    let (params, enc, table) = setup(cfg, 20);
    let out = encode(&params, &enc, table, vec![4, 0, 0, 9, 12, 0]);
    for r in [1, 2, 5] {
        assert!(out.row(r).iter().all(|v| *v == 0.0));
    }
    assert!(out.row(0).iter().any(|v| *v != 0.0));
}

#[test]
fn empty_document_rejected() {
    let (params, enc, table) = setup(tiny_cfg(), 10);
    let mut tape = Tape::new();
    let t = params.var(&mut tape, table);
    let seq = TokenSequence::new(vec![], 10);
    assert!(encode_document(&mut tape, &params, t, &seq, &enc).is_err());
}

fn attention_peak(params: &ParamStore, enc: &Encoder, table: ParamId, n: usize) -> usize {
    let probe = AllocationProbe::new();
    probe.scope(|| encode(params, enc, table, ids(n, 100, 5)));
    probe.peak_for(SEP_ATTN_LABEL)
}

#[test]
fn separable_encode_memory_is_linear() {
    let (params, enc, table) = setup(default_cfg(), 100);
    let p1 = attention_peak(&params, &enc, table, 1024);
    let p2 = attention_peak(&params, &enc, table, 2048);
    assert!(p1 > 0);
    assert!((p2 as f64) <= 1.05 * 2.0 * p1 as f64, "{p1} -> {p2}");
}

#[test]
fn standard_layer_materializes_full_matrix_per_head() {
    let cfg = AttentionConfig {
        model_dim: 16,
        heads: 4,
        conv_groups: 4,
        ..tiny_cfg()
    };
    let mut params = ParamStore::new();
    let layer = EncoderLayer::init(&mut params, "t", &cfg, AttentionKind::Standard, &mut rng(1)).unwrap();
    let probe = AllocationProbe::new();
    probe.scope(|| {
        let mut tape = Tape::new();
        let x = tape.constant(random(64, 16, 2));
        layer.forward(&mut tape, &params, x, None, &cfg).unwrap();
    });
    assert_eq!(probe.peak_for(ATTN_MATRIX_LABEL), 4 * 64 * 64);
}

#[test]
fn standard_layer_refuses_over_budget() {
    let cfg = tiny_cfg();
    let mut params = ParamStore::new();
    let layer = EncoderLayer::init(&mut params, "t", &cfg, AttentionKind::Standard, &mut rng(1)).unwrap();
    let probe = AllocationProbe::with_limit(1000);
    let res = std::panic::catch_unwind(|| {
        probe.scope(|| {
            let mut tape = Tape::new();
            let x = tape.constant(random(32, 8, 2));
            let _ = layer.forward(&mut tape, &params, x, None, &cfg);
        })
    });
    assert!(res.unwrap_err().downcast_ref::<probe::BudgetExceeded>().is_some());
    assert_eq!(probe.peak_for(ATTN_MATRIX_LABEL), 0);
}

#[test]
fn dropout_only_in_training() {
    let cfg = tiny_cfg();
    let mut params = ParamStore::new();
    let layer = EncoderLayer::init(&mut params, "l", &cfg, AttentionKind::Separable, &mut rng(3)).unwrap();
    let x = random(6, 8, 1);
    let fwd = |tape: &mut Tape| {
        let xv = tape.constant(x.clone());
        let y = layer.forward(tape, &params, xv, None, &cfg).unwrap();
        tape.value(y).clone()
    };
    let a = fwd(&mut Tape::new());
    let b = fwd(&mut Tape::new());
    let c = fwd(&mut Tape::with_dropout(rng(8)));
    assert_eq!(a.data(), b.data());
    assert!(a.max_abs_diff(&c) > 1e-6);
}
