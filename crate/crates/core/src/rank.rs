//! Numerical rank of per-matrix update deltas.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{bf16_round, matched_tensors, CheckpointIndex, TensorFilter};
use crate::error::{Error, Result};

/// Singular-value cutoff rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RankPolicy {
    /// `sigma_i > sigma_max * max(rows, cols) * eps`.
    Relative { eps: f64 },
    /// `sigma_i > tau`.
    Absolute { tau: f64 },
}

/// Single-precision machine epsilon, 2^-23: stored weights carry at most 24 significant bits.
pub const DEFAULT_RELATIVE_EPS: f64 = f32::EPSILON as f64;

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Relative {
            eps: DEFAULT_RELATIVE_EPS,
        }
    }
}

impl RankPolicy {
    pub fn threshold(&self, sigma_max: f64, rows: usize, cols: usize) -> f64 {
        match *self {
            RankPolicy::Relative { eps } => sigma_max * rows.max(cols) as f64 * eps,
            RankPolicy::Absolute { tau } => tau,
        }
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankPolicy::Relative { eps } => write!(f, "rel:{eps:e}"),
            RankPolicy::Absolute { tau } => write!(f, "abs:{tau:e}"),
        }
    }
}

impl FromStr for RankPolicy {
    type Err = Error;

    /// Parses `rel:EPS` or `abs:TAU`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("rank policy {s:?} must be rel:EPS or abs:TAU")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("rank policy value {value:?} is not a number")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("rank policy value {v} must be finite and >= 0")));
        }
        match kind {
            "rel" => Ok(RankPolicy::Relative { eps: v }),
            "abs" => Ok(RankPolicy::Absolute { tau: v }),
            _ => Err(Error::Config(format!("unknown rank policy kind {kind:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum RankMethod {
    /// All-zero delta; no decomposition.
    Zero,
    Exact,
    /// Range-finder sketch of the given width whose residual was certified below threshold.
    Randomized { sketch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankOutcome {
    pub rank: usize,
    pub sigma_max: f64,
    pub threshold: f64,
    #[serde(flatten)]
    pub method: RankMethod,
}

/// Randomized sketching is used only when both dimensions exceed this.
pub const DEFAULT_RANDOMIZED_CUTOFF: usize = 4096;
pub const OVERSAMPLING: usize = 10;
const RESIDUAL_PROBES: usize = 10;

#[derive(Debug, Clone, Copy)]
pub struct SvdStrategy {
    pub randomized_cutoff: usize,
    pub seed: u64,
}

impl Default for SvdStrategy {
    fn default() -> Self {
        SvdStrategy {
            randomized_cutoff: DEFAULT_RANDOMIZED_CUTOFF,
            seed: 0x5EED,
        }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn count_above(values: impl Iterator<Item = f64>, tau: f64) -> usize {
    values.filter(|&s| s > tau).count()
}

/// Sketch `delta` with a Gaussian range finder, doubling the width until the
/// probabilistic residual bound `10 * sqrt(2/pi) * max_i ||(I - QQ^T) A w_i||` (failure
/// probability 1e-10) falls below the rank threshold. Gives up once the sketch
/// would be as wide as the matrix.
fn randomized_rank(delta: &DMatrix<f64>, policy: &RankPolicy, seed: u64) -> Option<RankOutcome> {
    let (m, n) = delta.shape();
    let min_dim = m.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut width = (min_dim / 16).max(16) + OVERSAMPLING;
    while width < min_dim {
        let q = (delta * gaussian(n, width, &mut rng)).qr().q();
        let b = q.transpose() * delta;
        let sv = b.singular_values();
        let sigma_max = sv.max();
        let tau = policy.threshold(sigma_max, m, n);
        let probes = delta * gaussian(n, RESIDUAL_PROBES, &mut rng);
        let resid = &probes - &q * (q.transpose() * &probes);
        let worst = resid
            .column_iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max);
        let bound = 10.0 * (2.0 / std::f64::consts::PI).sqrt() * worst;
        if bound <= tau {
            return Some(RankOutcome {
                rank: count_above(sv.iter().copied(), tau),
                sigma_max,
                threshold: tau,
                method: RankMethod::Randomized { sketch: width },
            });
        }
        width *= 2;
    }
    None
}

/// Numerical rank of a delta matrix.
pub fn numerical_rank(delta: &DMatrix<f64>, policy: &RankPolicy, strategy: &SvdStrategy) -> RankOutcome {
    if delta.iter().all(|&x| x == 0.0) {
        return RankOutcome {
            rank: 0,
            sigma_max: 0.0,
            threshold: policy.threshold(0.0, delta.nrows(), delta.ncols()),
            method: RankMethod::Zero,
        };
    }
    let (m, n) = delta.shape();
    if m > strategy.randomized_cutoff && n > strategy.randomized_cutoff {
        if let Some(out) = randomized_rank(delta, policy, strategy.seed) {
            return out;
        }
    }
    let sv = delta.clone().singular_values();
    let sigma_max = sv.max();
    let tau = policy.threshold(sigma_max, m, n);
    RankOutcome {
        rank: count_above(sv.iter().copied(), tau),
        sigma_max,
        threshold: tau,
        method: RankMethod::Exact,
    }
}

fn delta_matrix(init: &[f32], tuned: &[f32], rows: usize, cols: usize, quantize_bf16: bool) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| {
        let i = r * cols + c;
        let d = tuned[i] as f64 - init[i] as f64;
        if quantize_bf16 {
            bf16_round(d as f32) as f64
        } else {
            d
        }
    })
}

/// Rank of `tuned - init` for two row-major matrices of `shape`.
pub fn delta_rank(init: &[f32], tuned: &[f32], shape: &[usize], policy: &RankPolicy) -> Result<usize> {
    if shape.len() != 2 {
        return Err(Error::NotAMatrix {
            name: "<delta>".into(),
            shape: shape.to_vec(),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    if init.len() != rows * cols || tuned.len() != rows * cols {
        return Err(Error::LengthMismatch {
            left: init.len(),
            right: tuned.len(),
        });
    }
    let d = delta_matrix(init, tuned, rows, cols, false);
    Ok(numerical_rank(&d, policy, &SvdStrategy::default()).rank)
}

#[derive(Debug, Clone)]
pub struct RankOptions {
    pub policy: RankPolicy,
    /// Matrices whose smaller dimension is below this are skipped.
    pub min_dim: usize,
    pub filter: TensorFilter,
    /// Round each delta to bfloat16 before decomposing.
    pub quantize_bf16: bool,
    pub strategy: SvdStrategy,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            policy: RankPolicy::default(),
            min_dim: 1,
            filter: TensorFilter::default(),
            quantize_bf16: false,
            strategy: SvdStrategy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRank {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub max_rank: usize,
    pub rank_pct: f64,
    pub sigma_max: f64,
    pub threshold: f64,
    #[serde(flatten)]
    pub method: RankMethod,
}

/// How singular values were thresholded, embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdPolicyRecord {
    pub policy: RankPolicy,
    pub rule: String,
    pub delta_precision: &'static str,
    pub min_dim: usize,
    pub randomized_cutoff: usize,
    pub oversampling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub per_matrix: Vec<MatrixRank>,
    pub mean_rank_pct: f64,
    pub threshold_policy: ThresholdPolicyRecord,
    /// Tensors left out because they are not 2-D or fall below `min_dim`.
    pub skipped: Vec<String>,
}

pub fn rank_report(init: &CheckpointIndex, tuned: &CheckpointIndex, opts: &RankOptions) -> Result<RankReport> {
    let metas = matched_tensors(init, tuned, &opts.filter)?;
    let (matrices, skipped): (Vec<_>, Vec<_>) = metas
        .into_iter()
        .partition(|m| m.shape.len() == 2 && m.shape[0].min(m.shape[1]) >= opts.min_dim.max(1));
    let per_matrix = matrices
        .par_iter()
        .map(|meta| {
            let (rows, cols) = (meta.shape[0], meta.shape[1]);
            let a = init.view(&meta.name)?.to_f32_vec();
            let b = tuned.view(&meta.name)?.to_f32_vec();
            let d = delta_matrix(&a, &b, rows, cols, opts.quantize_bf16);
            let out = numerical_rank(&d, &opts.policy, &opts.strategy);
            let max_rank = rows.min(cols);
            Ok(MatrixRank {
                name: meta.name.clone(),
                rows,
                cols,
                rank: out.rank,
                max_rank,
                rank_pct: 100.0 * out.rank as f64 / max_rank as f64,
                sigma_max: out.sigma_max,
                threshold: out.threshold,
                method: out.method,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_rank_pct = if per_matrix.is_empty() {
        0.0
    } else {
        per_matrix.iter().map(|m| m.rank_pct).sum::<f64>() / per_matrix.len() as f64
    };
    let rule = match opts.policy {
        RankPolicy::Relative { eps } => {
            format!("count sigma_i > sigma_max * max(rows, cols) * {eps:e}")
        }
        RankPolicy::Absolute { tau } => format!("count sigma_i > {tau:e}"),
    };
    Ok(RankReport {
        per_matrix,
        mean_rank_pct,
        threshold_policy: ThresholdPolicyRecord {
            policy: opts.policy,
            rule,
            delta_precision: if opts.quantize_bf16 { "bf16" } else { "f64" },
            min_dim: opts.min_dim,
            randomized_cutoff: opts.strategy.randomized_cutoff,
            oversampling: OVERSAMPLING,
        },
        skipped: skipped.into_iter().map(|m| m.name.clone()).collect(),
    })
}
