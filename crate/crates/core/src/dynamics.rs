//! Sparsity along an ordered sequence of checkpoints.

use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{matched_tensors, CheckpointIndex, TensorFilter, DEFAULT_CHUNK_ELEMS};
use crate::diff::{tensor_counts, values_differ, DeltaStats, DiffOptions, Tolerances};
use crate::error::{Error, Result};
use crate::mask::{diff_words, extract_mask, ExtractOptions, SubnetMask};

#[derive(Debug, Clone)]
pub struct DynamicsOptions {
    pub chunk_elems: usize,
    pub filter: TensorFilter,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        DynamicsOptions {
            chunk_elems: DEFAULT_CHUNK_ELEMS,
            filter: TensorFilter::default(),
        }
    }
}

impl DynamicsOptions {
    fn extract(&self) -> ExtractOptions {
        ExtractOptions {
            chunk_elems: self.chunk_elems,
            filter: self.filter.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsSeries {
    pub checkpoints: Vec<String>,
    pub tolerance: f64,
    /// Sparsity of each checkpoint against the initial one.
    pub sparsity_vs_init: Vec<f64>,
    /// Sparsity between neighbouring checkpoints (one shorter than `checkpoints`).
    pub sparsity_consecutive: Vec<f64>,
    /// Share of all parameters updated at checkpoint `t` that lie outside the final subnetwork.
    pub outside_final_frac: Vec<f64>,
    /// Share of all parameters updated at any checkpoint up to `t` that lie outside the
    /// final subnetwork. Non-decreasing.
    pub cumulative_outside_final_frac: Vec<f64>,
    /// Of the parameters ever updated over the whole sequence, the share outside the
    /// final subnetwork.
    pub ever_updated_outside_final_share: f64,
    pub total_params: u64,
}

fn name_of(ck: &CheckpointIndex) -> String {
    ck.path.display().to_string()
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn check_mask_schema(init: &CheckpointIndex, mask: &SubnetMask, filter: &TensorFilter) -> Result<()> {
    let mut offenders = Vec::new();
    let included: Vec<_> = init.tensors.values().filter(|m| filter.includes(&m.name)).collect();
    for t in &mask.tensors {
        match init.tensors.get(&t.name) {
            Some(m) if m.shape == t.shape => {}
            Some(m) => offenders.push(format!("{} (mask shape {:?} vs {:?})", t.name, t.shape, m.shape)),
            None => offenders.push(format!("{} (not in checkpoint)", t.name)),
        }
    }
    for m in included {
        if mask.tensor(&m.name).is_none() {
            offenders.push(format!("{} (not in mask)", m.name));
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::SchemaMismatch { offenders })
    }
}

/// Per-word pass of `init` vs `ck` against `final_mask`: returns (updated, updated outside
/// the mask) and ORs the updated bits into `ever` when given.
fn outside_pass(
    init: &CheckpointIndex,
    ck: &CheckpointIndex,
    final_mask: &SubnetMask,
    tol: f64,
    chunk_elems: usize,
    mut ever: Option<&mut Vec<Vec<u64>>>,
) -> Result<(u64, u64)> {
    let chunk_words = (chunk_elems / 64).max(1);
    let mut updated = 0u64;
    let mut outside = 0u64;
    for (ti, t) in final_mask.tensors.iter().enumerate() {
        let va = init.view(&t.name)?;
        let vb = ck.view(&t.name)?;
        if va.meta.dtype != vb.meta.dtype || va.meta.shape != vb.meta.shape {
            return Err(Error::SchemaMismatch {
                offenders: vec![t.name.clone()],
            });
        }
        let mask_words = t.bits.words();
        let job = |(ci, ever_chunk): (usize, Option<&mut [u64]>),
                   bufs: &mut (Vec<f32>, Vec<f32>, Vec<u64>)| {
            let first = ci * chunk_words;
            let n = chunk_words.min(mask_words.len() - first);
            let (buf_a, buf_b, words) = bufs;
            words.clear();
            words.resize(n, 0);
            diff_words(&va, &vb, first, words, tol, buf_a, buf_b);
            let mut u = 0u64;
            let mut o = 0u64;
            for (k, &w) in words.iter().enumerate() {
                u += w.count_ones() as u64;
                o += (w & !mask_words[first + k]).count_ones() as u64;
            }
            if let Some(e) = ever_chunk {
                for (dst, &w) in e.iter_mut().zip(words.iter()) {
                    *dst |= w;
                }
            }
            (u, o)
        };
        let init_bufs = || (Vec::new(), Vec::new(), Vec::new());
        let (u, o) = match ever.as_deref_mut() {
            Some(ever) => ever[ti]
                .par_chunks_mut(chunk_words)
                .enumerate()
                .map_init(init_bufs, |b, (ci, e)| job((ci, Some(e)), b))
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1)),
            None => (0..mask_words.len().div_ceil(chunk_words))
                .into_par_iter()
                .map_init(init_bufs, |b, ci| job((ci, None), b))
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1)),
        };
        updated += u;
        outside += o;
    }
    Ok((updated, outside))
}

/// Fraction of all parameters that differ between `init` and `ck` while lying outside
/// `final_mask`.
pub fn outside_final_fraction(
    init: &CheckpointIndex,
    ck: &CheckpointIndex,
    final_mask: &SubnetMask,
    tolerance: f64,
    opts: &DynamicsOptions,
) -> Result<f64> {
    check_mask_schema(init, final_mask, &opts.filter)?;
    matched_tensors(init, ck, &opts.filter)?;
    let (_, outside) = outside_pass(init, ck, final_mask, tolerance, opts.chunk_elems, None)?;
    Ok(ratio(outside, final_mask.total()))
}

/// Sparsity trajectory of `seq` (ordered by training step) relative to `init` and between
/// neighbours, plus the updated-outside-final-subnetwork statistics. The final subnetwork
/// is the mask of the last checkpoint against `init`.
pub fn series_sparsity(
    init: &CheckpointIndex,
    seq: &[&CheckpointIndex],
    tolerance: f64,
    opts: &DynamicsOptions,
) -> Result<DynamicsSeries> {
    let last = *seq.last().ok_or(Error::EmptySequence)?;
    for ck in seq {
        matched_tensors(init, ck, &opts.filter)?;
    }
    let final_mask = extract_mask(init, last, tolerance, &opts.extract())?;
    let total = final_mask.total();
    let mut ever: Vec<Vec<u64>> = final_mask
        .tensors
        .iter()
        .map(|t| vec![0u64; t.bits.words().len()])
        .collect();

    let mut sparsity_vs_init = Vec::with_capacity(seq.len());
    let mut outside_final_frac = Vec::with_capacity(seq.len());
    let mut cumulative = Vec::with_capacity(seq.len());
    let mut ever_outside = 0u64;
    for ck in seq {
        let (updated, outside) =
            outside_pass(init, ck, &final_mask, tolerance, opts.chunk_elems, Some(&mut ever))?;
        sparsity_vs_init.push(DeltaStats::from_counts(tolerance, updated, total).sparsity);
        outside_final_frac.push(ratio(outside, total));
        ever_outside = ever
            .iter()
            .zip(&final_mask.tensors)
            .map(|(e, t)| {
                e.iter()
                    .zip(t.bits.words())
                    .map(|(&a, &m)| (a & !m).count_ones() as u64)
                    .sum::<u64>()
            })
            .sum();
        cumulative.push(ratio(ever_outside, total));
    }
    let ever_updated: u64 = ever.iter().flatten().map(|w| w.count_ones() as u64).sum();

    let diff_opts = DiffOptions {
        tolerances: Tolerances::new(vec![tolerance])?,
        chunk_elems: opts.chunk_elems,
        filter: opts.filter.clone(),
    };
    let mut sparsity_consecutive = Vec::with_capacity(seq.len().saturating_sub(1));
    for pair in seq.windows(2) {
        let counts = tensor_counts(pair[0], pair[1], &diff_opts)?;
        let changed: u64 = counts.iter().map(|(_, c, _)| c[0]).sum();
        let n: u64 = counts.iter().map(|(_, _, t)| t).sum();
        sparsity_consecutive.push(DeltaStats::from_counts(tolerance, changed, n).sparsity);
    }

    Ok(DynamicsSeries {
        checkpoints: seq.iter().map(|c| name_of(c)).collect(),
        tolerance,
        sparsity_vs_init,
        sparsity_consecutive,
        outside_final_frac,
        cumulative_outside_final_frac: cumulative,
        ever_updated_outside_final_share: ratio(ever_outside, ever_updated),
        total_params: total,
    })
}

/// Three-way split of all parameters by their history relative to `init`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamPartition {
    /// Equal to init at every checkpoint.
    pub untouched: u64,
    /// Equal to init at the final checkpoint but different at some intermediate one.
    pub canceled: u64,
    /// Different from init at the final checkpoint.
    pub subnetwork: u64,
    pub total: u64,
    pub untouched_frac: f64,
    pub canceled_frac: f64,
    pub subnetwork_frac: f64,
}

impl ParamPartition {
    fn from_counts(untouched: u64, canceled: u64, subnetwork: u64) -> Self {
        let total = untouched + canceled + subnetwork;
        let canceled_frac = ratio(canceled, total);
        let subnetwork_frac = ratio(subnetwork, total);
        ParamPartition {
            untouched,
            canceled,
            subnetwork,
            total,
            // Complement of the other two so the fractions close to exactly 1.
            untouched_frac: if total == 0 {
                1.0
            } else {
                1.0 - (canceled_frac + subnetwork_frac)
            },
            canceled_frac,
            subnetwork_frac,
        }
    }
}

/// Partitions parameters into untouched / canceled / subnetwork.
///
/// With `final_ckpt = None` the last element of `seq` is the final checkpoint and the rest are
/// intermediates; otherwise every element of `seq` is an intermediate. At least one
/// intermediate is required. All checkpoints are streamed in lockstep per chunk.
pub fn classify_params(
    init: &CheckpointIndex,
    seq: &[&CheckpointIndex],
    final_ckpt: Option<&CheckpointIndex>,
    tolerance: f64,
    opts: &DynamicsOptions,
) -> Result<ParamPartition> {
    let (intermediates, last) = match final_ckpt {
        Some(f) => (seq, f),
        None => match seq.split_last() {
            Some((f, rest)) => (rest, *f),
            None => return Err(Error::EmptySequence),
        },
    };
    if intermediates.is_empty() {
        return Err(Error::InsufficientCheckpoints);
    }
    let metas = matched_tensors(init, last, &opts.filter)?;
    for ck in intermediates {
        matched_tensors(init, ck, &opts.filter)?;
    }
    let mut counts = [0u64; 3];
    for meta in metas {
        let v_init = init.view(&meta.name)?;
        let v_final = last.view(&meta.name)?;
        let v_mid = intermediates
            .iter()
            .map(|c| c.view(&meta.name))
            .collect::<Result<Vec<_>>>()?;
        let ranges: Vec<_> = crate::checkpoint::chunk_ranges(v_init.len(), opts.chunk_elems).collect();
        let c = ranges
            .into_par_iter()
            .map_init(
                || (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
                |(a, f, m, moved): &mut (Vec<f32>, Vec<f32>, Vec<f32>, Vec<bool>), range| {
                    v_init.decode_range(range.clone(), a);
                    v_final.decode_range(range.clone(), f);
                    moved.clear();
                    moved.resize(a.len(), false);
                    for v in &v_mid {
                        v.decode_range(range.clone(), m);
                        for ((flag, &x), &y) in moved.iter_mut().zip(a.iter()).zip(m.iter()) {
                            *flag |= values_differ(x, y, tolerance);
                        }
                    }
                    let mut c = [0u64; 3];
                    for ((&x, &y), &was_moved) in a.iter().zip(f.iter()).zip(moved.iter()) {
                        if values_differ(x, y, tolerance) {
                            c[2] += 1;
                        } else if was_moved {
                            c[1] += 1;
                        } else {
                            c[0] += 1;
                        }
                    }
                    c
                },
            )
            .reduce(|| [0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
        for k in 0..3 {
            counts[k] += c[k];
        }
    }
    Ok(ParamPartition::from_counts(counts[0], counts[1], counts[2]))
}
