//! Elementwise update sparsity between two checkpoints.
//!
//! Two stored values are equal under tolerance `tau` when both are finite and
//! `|a - b| <= tau` (computed on exact `f32` upcasts, in `f64`), or when either is
//! non-finite and their bit patterns match. All counts are exact `u64` sums; the
//! only floating-point division happens when a [`DeltaStats`] is built.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::checkpoint::{
    chunk_ranges, matched_tensors, CheckpointIndex, TensorFilter, TensorKind, TensorRole,
    DEFAULT_CHUNK_ELEMS,
};
use crate::error::{Error, Result};

/// Tolerances used when none are given.
pub const DEFAULT_TOLERANCES: [f64; 4] = [1e-8, 1e-7, 1e-6, 1e-5];

/// Strictly increasing list of non-negative tolerances.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Tolerances(Vec<f64>);

impl Tolerances {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidTolerance("at least one tolerance is required".into()));
        }
        if let Some(bad) = values.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::InvalidTolerance(format!("{bad} is not a finite non-negative value")));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Tolerances(values))
    }

    /// Validates an already ordered list without reordering it.
    pub fn strict(values: &[f64]) -> Result<Self> {
        let t = Self::new(values.to_vec())?;
        if t.0.len() != values.len() || t.0 != values {
            return Err(Error::InvalidTolerance(format!(
                "{values:?} is not strictly increasing"
            )));
        }
        Ok(t)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances(DEFAULT_TOLERANCES.to_vec())
    }
}

/// Whether a stored parameter counts as updated under `tol`.
#[inline]
pub fn values_differ(a: f32, b: f32, tol: f64) -> bool {
    if a.is_finite() && b.is_finite() {
        (a as f64 - b as f64).abs() > tol
    } else {
        a.to_bits() != b.to_bits()
    }
}

/// Adds, for each tolerance, the number of differing elements of `a`/`b` into `counts`.
/// One pass: each element lands in the bucket of the largest tolerance it exceeds.
pub(crate) fn accumulate_changed(a: &[f32], b: &[f32], tols: &[f64], counts: &mut [u64]) {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(tols.len(), counts.len());
    let mut buckets = vec![0u64; tols.len() + 1];
    for (&x, &y) in a.iter().zip(b) {
        let exceeded = if x.is_finite() && y.is_finite() {
            let d = (x as f64 - y as f64).abs();
            tols.partition_point(|&t| d > t)
        } else if x.to_bits() == y.to_bits() {
            0
        } else {
            tols.len()
        };
        buckets[exceeded] += 1;
    }
    // Exceeding tolerance k implies exceeding every smaller one.
    let mut running = 0u64;
    for k in (0..tols.len()).rev() {
        running += buckets[k + 1];
        counts[k] += running;
    }
}

/// Changed/unchanged counts at one tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaStats {
    pub tolerance: f64,
    pub changed: u64,
    pub total: u64,
    pub sparsity: f64,
}

impl DeltaStats {
    pub fn from_counts(tolerance: f64, changed: u64, total: u64) -> Self {
        debug_assert!(changed <= total);
        let sparsity = if total == 0 {
            1.0
        } else {
            1.0 - changed as f64 / total as f64
        };
        DeltaStats {
            tolerance,
            changed,
            total,
            sparsity,
        }
    }

    pub fn density(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.changed as f64 / self.total as f64
        }
    }
}

fn stats_from(tols: &[f64], changed: &[u64], total: u64) -> Vec<DeltaStats> {
    tols.iter()
        .zip(changed)
        .map(|(&t, &c)| DeltaStats::from_counts(t, c, total))
        .collect()
}

/// Elementwise sparsity of two equal-length arrays at each tolerance.
pub fn tensor_delta_stats(a: &[f32], b: &[f32], tolerances: &[f64]) -> Result<Vec<DeltaStats>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let tols = Tolerances::strict(tolerances)?;
    let mut counts = vec![0u64; tols.as_slice().len()];
    accumulate_changed(a, b, tols.as_slice(), &mut counts);
    Ok(stats_from(tols.as_slice(), &counts, a.len() as u64))
}

#[derive(Debug, Clone)]
pub struct DiffOptions {
    pub tolerances: Tolerances,
    pub chunk_elems: usize,
    pub filter: TensorFilter,
}

impl Default for DiffOptions {
    fn default() -> Self {
        DiffOptions {
            tolerances: Tolerances::default(),
            chunk_elems: DEFAULT_CHUNK_ELEMS,
            filter: TensorFilter::default(),
        }
    }
}

impl DiffOptions {
    pub fn with_tolerances(tolerances: &[f64]) -> Result<Self> {
        Ok(DiffOptions {
            tolerances: Tolerances::new(tolerances.to_vec())?,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SparsityReport {
    pub tolerances: Vec<f64>,
    pub per_tensor: BTreeMap<String, Vec<DeltaStats>>,
    pub roles: BTreeMap<String, TensorRole>,
    pub per_layer: BTreeMap<usize, Vec<DeltaStats>>,
    pub per_role: BTreeMap<TensorKind, Vec<DeltaStats>>,
    pub global: Vec<DeltaStats>,
}

#[derive(Default)]
struct Tally {
    changed: Vec<u64>,
    total: u64,
}

impl Tally {
    fn new(n: usize) -> Self {
        Tally {
            changed: vec![0; n],
            total: 0,
        }
    }

    fn add(&mut self, changed: &[u64], total: u64) {
        for (acc, c) in self.changed.iter_mut().zip(changed) {
            *acc += c;
        }
        self.total += total;
    }
}

/// Counts changed elements per tensor, streaming chunk pairs in parallel.
/// Returns `(name, changed-per-tolerance, total)` in index order.
pub(crate) fn tensor_counts(
    init: &CheckpointIndex,
    tuned: &CheckpointIndex,
    opts: &DiffOptions,
) -> Result<Vec<(String, Vec<u64>, u64)>> {
    let metas = matched_tensors(init, tuned, &opts.filter)?;
    let tols = opts.tolerances.as_slice();
    let views = metas
        .iter()
        .map(|m| Ok((init.view(&m.name)?, tuned.view(&m.name)?)))
        .collect::<Result<Vec<_>>>()?;
    let units: Vec<(usize, std::ops::Range<usize>)> = views
        .iter()
        .enumerate()
        .flat_map(|(i, (va, _))| chunk_ranges(va.len(), opts.chunk_elems).map(move |r| (i, r)))
        .collect();
    let partial: Vec<(usize, Vec<u64>)> = units
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(buf_a, buf_b), (i, range)| {
                let (va, vb) = &views[i];
                va.decode_range(range.clone(), buf_a);
                vb.decode_range(range, buf_b);
                let mut counts = vec![0u64; tols.len()];
                accumulate_changed(buf_a, buf_b, tols, &mut counts);
                (i, counts)
            },
        )
        .collect();
    let mut per_tensor: Vec<Vec<u64>> = vec![vec![0; tols.len()]; views.len()];
    for (i, counts) in partial {
        for (acc, c) in per_tensor[i].iter_mut().zip(counts) {
            *acc += c;
        }
    }
    Ok(metas
        .iter()
        .zip(per_tensor)
        .map(|(m, c)| (m.name.clone(), c, m.numel() as u64))
        .collect())
}

/// Update sparsity between two checkpoints with per-tensor, per-layer, per-role
/// and global aggregates.
pub fn checkpoint_sparsity(
    init: &CheckpointIndex,
    tuned: &CheckpointIndex,
    opts: &DiffOptions,
) -> Result<SparsityReport> {
    let tols = opts.tolerances.as_slice();
    let counts = tensor_counts(init, tuned, opts)?;

    let mut per_tensor = BTreeMap::new();
    let mut roles = BTreeMap::new();
    let mut layers: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut kinds: BTreeMap<TensorKind, Tally> = BTreeMap::new();
    let mut global = Tally::new(tols.len());
    for (name, changed, total) in counts {
        let role = init.tensors[&name].role;
        if let Some(layer) = role.layer_index {
            layers
                .entry(layer)
                .or_insert_with(|| Tally::new(tols.len()))
                .add(&changed, total);
        }
        kinds
            .entry(role.kind)
            .or_insert_with(|| Tally::new(tols.len()))
            .add(&changed, total);
        global.add(&changed, total);
        per_tensor.insert(name.clone(), stats_from(tols, &changed, total));
        roles.insert(name, role);
    }
    Ok(SparsityReport {
        tolerances: tols.to_vec(),
        per_tensor,
        roles,
        per_layer: layers
            .into_iter()
            .map(|(k, t)| (k, stats_from(tols, &t.changed, t.total)))
            .collect(),
        per_role: kinds
            .into_iter()
            .map(|(k, t)| (k, stats_from(tols, &t.changed, t.total)))
            .collect(),
        global: stats_from(tols, &global.changed, global.total),
    })
}

/// Row label in a layer breakdown: a tensor kind or the per-layer average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BreakdownKind {
    Kind(TensorKind),
    Average,
}

impl fmt::Display for BreakdownKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BreakdownKind::Kind(k) => f.write_str(k.as_str()),
            BreakdownKind::Average => f.write_str("Average Sparsity"),
        }
    }
}

impl Serialize for BreakdownKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownRow {
    pub layer_index: Option<usize>,
    pub kind: BreakdownKind,
    pub tolerance: f64,
    pub changed: u64,
    pub total: u64,
    pub sparsity: f64,
}

/// Plot-ready rows: one per (layer, kind, tolerance), sorted by layer then kind, with an
/// "Average Sparsity" row per indexed layer aggregating all of its tensors. Tensors
/// outside any layer come first with `layer_index = None`.
pub fn layer_breakdown(report: &SparsityReport) -> Vec<BreakdownRow> {
    let n = report.tolerances.len();
    let mut groups: BTreeMap<(Option<usize>, BreakdownKind), Tally> = BTreeMap::new();
    for (name, stats) in &report.per_tensor {
        let role = report.roles[name];
        let changed: Vec<u64> = stats.iter().map(|s| s.changed).collect();
        let total = stats.first().map_or(0, |s| s.total);
        groups
            .entry((role.layer_index, BreakdownKind::Kind(role.kind)))
            .or_insert_with(|| Tally::new(n))
            .add(&changed, total);
        if role.layer_index.is_some() {
            groups
                .entry((role.layer_index, BreakdownKind::Average))
                .or_insert_with(|| Tally::new(n))
                .add(&changed, total);
        }
    }
    let mut rows = Vec::with_capacity(groups.len() * n);
    for ((layer_index, kind), tally) in groups {
        for (k, &tolerance) in report.tolerances.iter().enumerate() {
            let s = DeltaStats::from_counts(tolerance, tally.changed[k], tally.total);
            rows.push(BreakdownRow {
                layer_index,
                kind,
                tolerance,
                changed: s.changed,
                total: s.total,
                sparsity: s.sparsity,
            });
        }
    }
    rows
}
