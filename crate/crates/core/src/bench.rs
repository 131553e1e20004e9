//! Peak-memory curves of one encoder layer with separable and standard
//! attention, measured in tensor elements.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::AssertUnwindSafe;
use std::sync::Once;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AttentionConfig;
use crate::encoder::{self, AttentionKind, EncoderLayer, ATTN_MATRIX_LABEL, SEP_ATTN_LABEL};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::probe::{AllocationProbe, BudgetExceeded};
use crate::tape::Tape;

pub const DEFAULT_LENGTHS: [usize; 6] = [128, 256, 512, 1024, 2048, 4096];
/// Element budget of the simulated device (2 GiB of f64).
pub const DEFAULT_BUDGET: usize = 1 << 28;

pub const SEPARABLE: &str = "separable";
pub const STANDARD: &str = "standard";
pub const SEPARABLE_TOTAL: &str = "separable_total";
pub const STANDARD_TOTAL: &str = "standard_total";

/// Least-squares polynomial fit; `coefs[i]` multiplies `n^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coefs: Vec<f64>,
    pub r2: f64,
}

/// Fits a polynomial of `degree` to the points. `None` with fewer points
/// than coefficients.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Option<Fit> {
    let m = degree + 1;
    if xs.len() != ys.len() || xs.len() < m {
        return None;
    }
    // scale x to [0, 1] for conditioning, then undo on the coefficients
    let scale = xs.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    let mut ata = vec![vec![0.0; m]; m];
    let mut aty = vec![0.0; m];
    for (x, y) in xs.iter().zip(ys) {
        let powers: Vec<f64> = (0..m).map(|i| (x / scale).powi(i as i32)).collect();
        for i in 0..m {
            aty[i] += powers[i] * y;
            for j in 0..m {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    let scaled = solve(ata, aty)?;
    let coefs: Vec<f64> = scaled
        .iter()
        .enumerate()
        .map(|(i, c)| c / scale.powi(i as i32))
        .collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let eval = |x: f64| coefs.iter().rev().fold(0.0, |acc, c| acc * x + c);
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - eval(*x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(Fit { coefs, r2 })
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Peaks of one label over the benchmark lengths; `None` marks a length
/// that ran out of budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCurve {
    pub label: String,
    pub lengths: Vec<usize>,
    pub peaks: Vec<Option<usize>>,
    pub linear: Option<Fit>,
    pub quadratic: Option<Fit>,
}

impl MemoryCurve {
    pub fn new(label: &str, lengths: Vec<usize>, peaks: Vec<Option<usize>>) -> Self {
        let (xs, ys): (Vec<f64>, Vec<f64>) = lengths
            .iter()
            .zip(&peaks)
            .filter_map(|(n, p)| p.map(|p| (*n as f64, p as f64)))
            .unzip();
        Self {
            label: label.to_string(),
            linear: polyfit(&xs, &ys, 1),
            quadratic: polyfit(&xs, &ys, 2),
            lengths,
            peaks,
        }
    }

    /// `peak(n_{i+1}) / peak(n_i)` for consecutive measured lengths.
    pub fn ratios(&self) -> Vec<f64> {
        self.peaks
            .windows(2)
            .filter_map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) if a > 0 => Some(b as f64 / a as f64),
                _ => None,
            })
            .collect()
    }

    pub fn peak_at(&self, n: usize) -> Option<usize> {
        self.lengths.iter().position(|l| *l == n).and_then(|i| self.peaks[i])
    }
}

/// Separable and standard curves (attention-labelled buffers and whole-layer
/// totals).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub heads: usize,
    pub curves: BTreeMap<String, MemoryCurve>,
}

impl MemoryReport {
    pub fn curve(&self, label: &str) -> &MemoryCurve {
        &self.curves[label]
    }

    /// `length,label,peak_elements` rows; `oom` marks an exhausted budget.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,label,peak_elements\n");
        let Some(first) = self.curves.values().next() else {
            return out;
        };
        for (i, n) in first.lengths.iter().enumerate() {
            for (label, c) in &self.curves {
                match c.peaks[i] {
                    Some(p) => {
                        let _ = writeln!(out, "{n},{label},{p}");
                    }
                    None => {
                        let _ = writeln!(out, "{n},{label},oom");
                    }
                }
            }
        }
        out
    }

    /// Fitted coefficients, one line per curve.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (label, c) in &self.curves {
            let lin = c
                .linear
                .as_ref()
                .map_or("-".into(), |f| format!("slope={:.3} r2={:.6}", f.coefs[1], f.r2));
            let quad = c
                .quadratic
                .as_ref()
                .map_or("-".into(), |f| format!("n^2 coef={:.4}", f.coefs[2]));
            let ratios: Vec<String> = c.ratios().iter().map(|r| format!("{r:.3}")).collect();
            let _ = writeln!(out, "{label}: {lin} {quad} ratios=[{}]", ratios.join(","));
        }
        out
    }
}

/// Keeps budget refusals from printing panic messages.
fn quiet_budget_panics() {
    static HOOK: Once = Once::new();
    HOOK.call_once(|| {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<BudgetExceeded>().is_none() {
                prev(info);
            }
        }));
    });
}

/// Label peaks and total peak of one layer forward, or `None` when the
/// budget was exhausted.
fn measure(
    layer: &EncoderLayer,
    params: &ParamStore,
    cfg: &AttentionConfig,
    n: usize,
    budget: usize,
    seed: u64,
) -> Result<Option<(BTreeMap<String, usize>, usize)>> {
    let probe = AllocationProbe::with_limit(budget);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
    let input = encoder::uniform(&[n, cfg.model_dim], 1.0, &mut rng);
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
        probe.scope(|| -> Result<()> {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            layer.forward(&mut tape, params, x, None, cfg)?;
            Ok(())
        })
    }));
    match outcome {
        Ok(r) => {
            r?;
            Ok(Some((probe.breakdown(), probe.peak())))
        }
        Err(payload) if payload.downcast_ref::<BudgetExceeded>().is_some() => Ok(None),
        Err(payload) => std::panic::resume_unwind(payload),
    }
}

/// Runs one layer of each kind at every length under a probe limited to
/// `budget` live elements.
pub fn bench_memory(lengths: &[usize], cfg: &AttentionConfig, budget: usize, seed: u64) -> Result<MemoryReport> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Config(
            "benchmark needs at least two strictly increasing positive lengths".into(),
        ));
    }
    cfg.validate()?;
    quiet_budget_panics();
    let mut curves = BTreeMap::new();
    let variants = [
        (AttentionKind::Separable, SEPARABLE, SEP_ATTN_LABEL, SEPARABLE_TOTAL),
        (AttentionKind::Standard, STANDARD, ATTN_MATRIX_LABEL, STANDARD_TOTAL),
    ];
    for (kind, name, label, total_name) in variants {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = EncoderLayer::init(&mut params, "bench", cfg, kind, &mut rng)?;
        let mut peaks = Vec::new();
        let mut totals = Vec::new();
        for &n in lengths {
            let m = measure(&layer, &params, cfg, n, budget, seed)?;
            tracing::info!(variant = name, n, oom = m.is_none(), "memory point");
            peaks.push(m.as_ref().map(|(b, _)| b.get(label).copied().unwrap_or(0)));
            totals.push(m.map(|(_, t)| t));
        }
        curves.insert(name.to_string(), MemoryCurve::new(name, lengths.to_vec(), peaks));
        curves.insert(
            total_name.to_string(),
            MemoryCurve::new(total_name, lengths.to_vec(), totals),
        );
    }
    Ok(MemoryReport {
        heads: cfg.heads,
        curves,
    })
}
