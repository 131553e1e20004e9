//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used, so the check is independent of the
//! reverse pass it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

/// Largest relative error found and where.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` w.r.t. every element of every input
/// against central differences (five-point stencil) with the given `step`.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut at = |offset: f64| -> Result<f64> {
                let mut shifted = input.to_vec();
                shifted[e] += offset;
                work[i] = Tensor::new(input.shape(), shifted)?;
                eval(&work)
            };
            // fourth-order central stencil
            let (p1, m1) = (at(step)?, at(-step)?);
            let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
            work[i] = input.clone();
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = analytic[i].data()[e];
            let err = rel_err(a, numeric, 1e-6);
            if err > report.max_rel_err {
                report = GradReport {
                    max_rel_err: err,
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Same as [`check`], over every tensor of a parameter store; `input` in
/// the report is the parameter index.
pub fn check_params<F>(params: &ParamStore, step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let ids: Vec<_> = params.ids().collect();
    let inputs: Vec<Tensor> = ids.iter().map(|id| params.get(*id).clone()).collect();
    check(&inputs, step, |tape, vars| {
        let mut store = params.clone();
        for (id, v) in ids.iter().zip(vars) {
            store.set(*id, tape.value(*v).clone())?;
        }
        // bind parameter ids to the checked leaves
        for (id, v) in ids.iter().zip(vars) {
            tape.bind_param(id.0, *v);
        }
        f(tape, &store)
    })
}

/// Reduces any output to a scalar with fixed pseudo-random weights, one per
/// element.
pub fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.37).collect();
    let y = tape.mul_const(x, w)?;
    Ok(tape.sum(y))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches element count")
}

/// Values bounded away from zero so relu kinks are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("shape matches element count")
}

/// Differentiable tape operations covered by [`check_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCase {
    MatMul,
    MatMulTN,
    AddMulSubDiv,
    AddRow,
    ScalarVars,
    Relu,
    ExpLog,
    Softplus,
    SoftmaxCols,
    SoftmaxRowsMasked,
    ScaledDot,
    Cosine,
    Conv,
    LayerNorm,
    Gather,
    SliceConcat,
    KernelPool,
    BatchNorm,
    SegmentSelect,
    Mean,
    MulRowsConst,
}

pub const ALL_OPS: [OpCase; 21] = [
    OpCase::MatMul,
    OpCase::MatMulTN,
    OpCase::AddMulSubDiv,
    OpCase::AddRow,
    OpCase::ScalarVars,
    OpCase::Relu,
    OpCase::ExpLog,
    OpCase::Softplus,
    OpCase::SoftmaxCols,
    OpCase::SoftmaxRowsMasked,
    OpCase::ScaledDot,
    OpCase::Cosine,
    OpCase::Conv,
    OpCase::LayerNorm,
    OpCase::Gather,
    OpCase::SliceConcat,
    OpCase::KernelPool,
    OpCase::BatchNorm,
    OpCase::SegmentSelect,
    OpCase::Mean,
    OpCase::MulRowsConst,
];

/// Runs a finite-difference check for one op on random shapes drawn from `seed`.
pub fn check_op(case: OpCase, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..6);
    let m = rng.gen_range(1..6);
    let k = rng.gen_range(1..5);
    let step = 1e-3;

    match case {
        OpCase::MatMul => {
            let a = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[k, m], -1.0, 1.0);
            check(&[a, b], step, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }
        OpCase::MatMulTN => {
            let a = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[k, m], -1.0, 1.0);
            check(&[a, b], step, |t, v| {
                let y = t.matmul_tn(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }
        OpCase::AddMulSubDiv => {
            let a = rand_tensor(&mut rng, &[n, m], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[n, m], 0.5, 2.0);
            check(&[a, b], step, |t, v| {
                let s = t.add(v[0], v[1])?;
                let p = t.mul(s, v[0])?;
                let d = t.sub(p, v[1])?;
                let q = t.div(d, v[1])?;
                weighted_sum(t, q)
            })
        }
        OpCase::AddRow => {
            let a = rand_tensor(&mut rng, &[n, m], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[m], -1.0, 1.0);
            check(&[a, b], step, |t, v| {
                let y = t.add_row(v[0], v[1])?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y)
            })
        }
        OpCase::ScalarVars => {
            let a = rand_tensor(&mut rng, &[n, m], -1.0, 1.0);
            let s = rand_tensor(&mut rng, &[1], -1.0, 1.0);
            let c = rand_tensor(&mut rng, &[1], -1.0, 1.0);
            check(&[a, s, c], step, |t, v| {
                let y = t.mul_scalar_var(v[0], v[1])?;
                let y = t.add_scalar_var(y, v[2])?;
                let y = t.mul(y, y)?;
                let y = t.scale(y, 0.7);
                let y = t.add_const(y, 0.1);
                weighted_sum(t, y)
            })
        }
        OpCase::Relu => {
            let a = away_from_zero(&mut rng, &[n, m]);
            check(&[a], step, |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y)
            })
        }
        OpCase::ExpLog => {
            let a = rand_tensor(&mut rng, &[n, m], 0.3, 2.0);
            check(&[a], step, |t, v| {
                let y = t.log(v[0])?;
                let y = t.scale(y, 1.5);
                let y = t.exp(y);
                weighted_sum(t, y)
            })
        }
        OpCase::Softplus => {
            let a = rand_tensor(&mut rng, &[n, m], -5.0, 5.0);
            check(&[a], step, |t, v| {
                let y = t.softplus(v[0]);
                weighted_sum(t, y)
            })
        }
        OpCase::SoftmaxCols => {
            let a = rand_tensor(&mut rng, &[n, m], -2.0, 2.0);
            check(&[a], step, |t, v| {
                let y = t.softmax(v[0], Axis::Cols, None)?;
                weighted_sum(t, y)
            })
        }
        OpCase::SoftmaxRowsMasked => {
            let a = rand_tensor(&mut rng, &[n + 1, m], -2.0, 2.0);
            let mut mask: Vec<bool> = (0..=n).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            check(&[a], step, move |t, v| {
                let y = t.softmax(v[0], Axis::Rows, Some(&mask))?;
                weighted_sum(t, y)
            })
        }
        OpCase::ScaledDot => {
            let q = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
            let kk = rand_tensor(&mut rng, &[m + 1, k], -1.0, 1.0);
            let mut mask: Vec<bool> = (0..=m).map(|_| rng.gen_bool(0.7)).collect();
            mask[0] = true;
            check(&[q, kk], step, move |t, v| {
                let y = t.scaled_dot_softmax(v[0], v[1], 0.6, Some(&mask))?;
                weighted_sum(t, y)
            })
        }
        OpCase::Cosine => {
            let a = rand_tensor(&mut rng, &[n, k + 1], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[m, k + 1], -1.0, 1.0);
            check(&[a, b], step, |t, v| {
                let y = t.cosine_rows(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }
        OpCase::Conv => {
            let groups = rng.gen_range(1..3);
            let h = groups * rng.gen_range(1..3);
            let window = [1, 3, 5][rng.gen_range(0..3)];
            let x = rand_tensor(&mut rng, &[n + 1, h], -1.0, 1.0);
            let w = rand_tensor(&mut rng, &[h, h / groups, window], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[h], -1.0, 1.0);
            check(&[x, w, b], step, move |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], window, groups)?;
                weighted_sum(t, y)
            })
        }
        OpCase::LayerNorm => {
            let x = rand_tensor(&mut rng, &[n, m + 1], -1.0, 1.0);
            let g = rand_tensor(&mut rng, &[m + 1], 0.5, 1.5);
            let b = rand_tensor(&mut rng, &[m + 1], -1.0, 1.0);
            check(&[x, g, b], step, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                weighted_sum(t, y)
            })
        }
        OpCase::Gather => {
            let table = rand_tensor(&mut rng, &[m + 2, k], -1.0, 1.0);
            let ids: Vec<usize> = (0..n + 2).map(|_| rng.gen_range(0..m + 2)).collect();
            check(&[table], step, move |t, v| {
                let y = t.gather(v[0], &ids)?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y)
            })
        }
        OpCase::SliceConcat => {
            let a = rand_tensor(&mut rng, &[n, m + 2], -1.0, 1.0);
            let b = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
            check(&[a, b], step, |t, v| {
                let s = t.slice_cols(v[0], 1, 2)?;
                let c = t.concat_cols(&[s, v[1], s])?;
                let r = t.concat_rows(&[c, c])?;
                let r = t.reshape(r, &[2 * (4 + k) * n_rows(t, v[0])])?;
                weighted_sum(t, r)
            })
        }
        OpCase::KernelPool => {
            let x = rand_tensor(&mut rng, &[n, m + 3], -1.0, 1.0);
            let mask: Vec<bool> = (0..m + 3).map(|j| j == 0 || rng.gen_bool(0.8)).collect();
            let mus: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sigmas: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..0.5)).collect();
            let (s, e) = (0, m + 3);
            check(&[x], step, move |t, v| {
                let y = t.kernel_pool(v[0], s, e, &mask, &mus, &sigmas)?;
                weighted_sum(t, y)
            })
        }
        OpCase::BatchNorm => {
            let x = rand_tensor(&mut rng, &[n + 2], -2.0, 2.0);
            let fixed = (rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0));
            check(&[x], step, move |t, v| {
                let a = t.batch_norm(v[0], None)?;
                let b = t.batch_norm(v[0], Some(fixed))?;
                let c = t.mul(a, b)?;
                weighted_sum(t, c)
            })
        }
        OpCase::SegmentSelect => {
            let x = rand_tensor(&mut rng, &[n + m], -1.0, 1.0);
            let lens = vec![n, m];
            let idx: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..2)).collect();
            check(&[x], step, move |t, v| {
                let s = t.segment_sum(v[0], &lens)?;
                let p = t.select(s, &idx)?;
                let p = t.mul(p, p)?;
                weighted_sum(t, p)
            })
        }
        OpCase::Mean => {
            let x = rand_tensor(&mut rng, &[n, m], -1.0, 1.0);
            check(&[x], step, |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.mean(y))
            })
        }
        OpCase::MulRowsConst => {
            let x = rand_tensor(&mut rng, &[n, m], -1.0, 1.0);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            check(&[x], step, move |t, v| {
                let y = t.mul_rows_const(v[0], w.clone())?;
                let y = t.mul(y, v[0])?;
                weighted_sum(t, y)
            })
        }
    }
}

fn n_rows(t: &Tape, v: Var) -> usize {
    t.value(v).shape()[0]
}
