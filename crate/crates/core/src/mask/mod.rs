//! Subnetwork masks: extraction from checkpoint pairs, set algebra, overlap statistics
//! and seeded random baselines.

mod bitset;
mod format;

pub use bitset::Bitset;
pub use format::{read_mask, write_mask, MASK_FORMAT_VERSION, MASK_MAGIC};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    matched_tensors, CheckpointIndex, RoleTable, TensorFilter, TensorView, DEFAULT_CHUNK_ELEMS,
};
use crate::diff::values_differ;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskTensorSchema {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

impl MaskTensorSchema {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        MaskTensorSchema {
            name: name.into(),
            shape,
            numel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major, bit set iff the parameter was updated.
    pub bits: Bitset,
}

/// Elementwise subnetwork mask over a set of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetMask {
    /// Tolerance used at extraction (0 for masks that were not extracted).
    pub tolerance: f64,
    pub source: String,
    pub tensors: Vec<MaskTensor>,
}

impl SubnetMask {
    pub fn empty(schema: &[MaskTensorSchema], tolerance: f64, source: impl Into<String>) -> Self {
        SubnetMask {
            tolerance,
            source: source.into(),
            tensors: schema
                .iter()
                .map(|s| MaskTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    bits: Bitset::zeros(s.numel),
                })
                .collect(),
        }
    }

    pub fn schema(&self) -> Vec<MaskTensorSchema> {
        self.tensors
            .iter()
            .map(|t| MaskTensorSchema {
                name: t.name.clone(),
                shape: t.shape.clone(),
                numel: t.bits.len(),
            })
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&MaskTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn updated(&self) -> u64 {
        self.tensors.iter().map(|t| t.bits.count_ones()).sum()
    }

    pub fn total(&self) -> u64 {
        self.tensors.iter().map(|t| t.bits.len() as u64).sum()
    }

    pub fn density(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.updated() as f64 / total as f64
        }
    }

    /// SHA-256 over the serialized mask (the digest stored in the file trailer).
    pub fn digest(&self) -> [u8; 32] {
        format::content_digest(self)
    }

    fn check_same_schema(&self, other: &SubnetMask) -> Result<()> {
        let mut offenders = Vec::new();
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                offenders.push(format!("{} {:?} vs {} {:?}", a.name, a.shape, b.name, b.shape));
            }
        }
        if self.tensors.len() != other.tensors.len() {
            offenders.push(format!(
                "tensor count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::SchemaMismatch { offenders })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractOptions {
    pub chunk_elems: usize,
    pub filter: TensorFilter,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            chunk_elems: DEFAULT_CHUNK_ELEMS,
            filter: TensorFilter::default(),
        }
    }
}

/// Sets bit `k` of `out` for element `64 * first_word + k` when it differs between the
/// two views under `tol`. `out` must start cleared.
pub(crate) fn diff_words(
    va: &TensorView<'_>,
    vb: &TensorView<'_>,
    first_word: usize,
    out: &mut [u64],
    tol: f64,
    buf_a: &mut Vec<f32>,
    buf_b: &mut Vec<f32>,
) {
    let start = first_word * 64;
    let end = (start + out.len() * 64).min(va.len());
    va.decode_range(start..end, buf_a);
    vb.decode_range(start..end, buf_b);
    for (k, (&x, &y)) in buf_a.iter().zip(buf_b.iter()).enumerate() {
        if values_differ(x, y, tol) {
            out[k / 64] |= 1u64 << (k % 64);
        }
    }
}

/// Marks every parameter whose value moved by more than `tolerance` between `init` and `tuned`.
pub fn extract_mask(
    init: &CheckpointIndex,
    tuned: &CheckpointIndex,
    tolerance: f64,
    opts: &ExtractOptions,
) -> Result<SubnetMask> {
    if !tolerance.is_finite() || tolerance < 0.0 {
        return Err(Error::InvalidTolerance(format!("{tolerance}")));
    }
    let metas = matched_tensors(init, tuned, &opts.filter)?;
    let chunk_words = (opts.chunk_elems / 64).max(1);
    let mut tensors = Vec::with_capacity(metas.len());
    for meta in metas {
        let va = init.view(&meta.name)?;
        let vb = tuned.view(&meta.name)?;
        let len = va.len();
        let mut words = vec![0u64; len.div_ceil(64)];
        words
            .par_chunks_mut(chunk_words)
            .enumerate()
            .for_each_init(
                || (Vec::new(), Vec::new()),
                |(buf_a, buf_b), (ci, out)| {
                    diff_words(&va, &vb, ci * chunk_words, out, tolerance, buf_a, buf_b)
                },
            );
        tensors.push(MaskTensor {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            bits: Bitset::from_words(len, words),
        });
    }
    Ok(SubnetMask {
        tolerance,
        source: format!("{} -> {}", init.path.display(), tuned.path.display()),
        tensors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOp {
    Intersect,
    Union,
    /// Bits of the first mask that are not in the second.
    Difference,
}

impl MaskOp {
    fn name(self) -> &'static str {
        match self {
            MaskOp::Intersect => "intersect",
            MaskOp::Union => "union",
            MaskOp::Difference => "difference",
        }
    }
}

pub fn mask_ops(a: &SubnetMask, b: &SubnetMask, op: MaskOp) -> Result<SubnetMask> {
    a.check_same_schema(b)?;
    let tensors = a
        .tensors
        .par_iter()
        .zip(&b.tensors)
        .map(|(ta, tb)| MaskTensor {
            name: ta.name.clone(),
            shape: ta.shape.clone(),
            bits: match op {
                MaskOp::Intersect => ta.bits.and(&tb.bits),
                MaskOp::Union => ta.bits.or(&tb.bits),
                MaskOp::Difference => ta.bits.and_not(&tb.bits),
            },
        })
        .collect();
    let source = if a.tolerance == b.tolerance {
        format!("{}({}; {})", op.name(), a.source, b.source)
    } else {
        format!(
            "{}({} @tol {}; {} @tol {})",
            op.name(),
            a.source,
            a.tolerance,
            b.source,
            b.tolerance
        )
    };
    Ok(SubnetMask {
        tolerance: a.tolerance,
        source,
        tensors,
    })
}

/// Complement of a mask over the same schema.
pub fn complement(mask: &SubnetMask) -> SubnetMask {
    SubnetMask {
        tolerance: mask.tolerance,
        source: format!("complement({})", mask.source),
        tensors: mask
            .tensors
            .iter()
            .map(|t| MaskTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                bits: t.bits.not(),
            })
            .collect(),
    }
}

/// One-sided overlaps of two subnetworks with their random-guessing baselines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub common: u64,
    pub updated1: u64,
    pub updated2: u64,
    pub total: u64,
    pub o1: f64,
    pub o2: f64,
    pub o1_random: f64,
    pub o2_random: f64,
    pub density1: f64,
    pub density2: f64,
    /// Per-layer breakdown; an extension beyond the single whole-model pair of numbers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<LayerOverlap>>,
}

/// Overlap restricted to one layer. Overlaps are `None` when that side has no updates there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerOverlap {
    pub layer_index: Option<usize>,
    pub common: u64,
    pub updated1: u64,
    pub updated2: u64,
    pub total: u64,
    pub o1: Option<f64>,
    pub o2: Option<f64>,
    pub o1_random: f64,
    pub o2_random: f64,
    pub density1: f64,
    pub density2: f64,
}

#[derive(Default, Clone, Copy)]
struct OverlapCounts {
    common: u64,
    updated1: u64,
    updated2: u64,
    total: u64,
}

impl OverlapCounts {
    fn add(&mut self, a: &Bitset, b: &Bitset) {
        self.common += a.and_count(b);
        self.updated1 += a.count_ones();
        self.updated2 += b.count_ones();
        self.total += a.len() as u64;
    }

    fn densities(&self) -> (f64, f64) {
        if self.total == 0 {
            return (0.0, 0.0);
        }
        (
            self.updated1 as f64 / self.total as f64,
            self.updated2 as f64 / self.total as f64,
        )
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `o1 = |I1 ∩ I2| / |I1|`, `o2 = |I1 ∩ I2| / |I2|`. A uniformly random subnetwork of
/// the same size as mask 2 covers a `density2` share of any fixed set, so the baselines
/// are `o1_random = density2` and `o2_random = density1`.
pub fn overlap(a: &SubnetMask, b: &SubnetMask) -> Result<OverlapReport> {
    a.check_same_schema(b)?;
    let mut c = OverlapCounts::default();
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        c.add(&ta.bits, &tb.bits);
    }
    if c.updated1 == 0 {
        return Err(Error::EmptyMask("first mask"));
    }
    if c.updated2 == 0 {
        return Err(Error::EmptyMask("second mask"));
    }
    let (density1, density2) = c.densities();
    Ok(OverlapReport {
        common: c.common,
        updated1: c.updated1,
        updated2: c.updated2,
        total: c.total,
        o1: c.common as f64 / c.updated1 as f64,
        o2: c.common as f64 / c.updated2 as f64,
        o1_random: density2,
        o2_random: density1,
        density1,
        density2,
        per_layer: None,
    })
}

/// [`overlap`] plus a per-layer breakdown using `roles` to assign tensors to layers.
pub fn overlap_by_layer(a: &SubnetMask, b: &SubnetMask, roles: &RoleTable) -> Result<OverlapReport> {
    let mut report = overlap(a, b)?;
    let mut layers: std::collections::BTreeMap<Option<usize>, OverlapCounts> = Default::default();
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        let layer = roles.classify(&ta.name).layer_index;
        layers.entry(layer).or_default().add(&ta.bits, &tb.bits);
    }
    report.per_layer = Some(
        layers
            .into_iter()
            .map(|(layer_index, c)| {
                let (density1, density2) = c.densities();
                LayerOverlap {
                    layer_index,
                    common: c.common,
                    updated1: c.updated1,
                    updated2: c.updated2,
                    total: c.total,
                    o1: ratio(c.common, c.updated1),
                    o2: ratio(c.common, c.updated2),
                    o1_random: density2,
                    o2_random: density1,
                    density1,
                    density2,
                }
            })
            .collect(),
    );
    Ok(report)
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Output number `counter + 1` of a SplitMix64 stream whose state starts at `seed`.
///
/// Random masks draw one value per element, using the element's position in the
/// concatenated schema as the counter, so any implementation of SplitMix64
/// reproduces them exactly.
#[inline]
pub fn splitmix64_at(seed: u64, counter: u64) -> u64 {
    let mut z = seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(SPLITMIX_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mask with each bit set independently with probability `density`.
///
/// Element `g` (position across the whole schema) is set iff
/// `splitmix64_at(seed, g) >> 11 < floor(density * 2^53)`.
pub fn random_mask(schema: &[MaskTensorSchema], density: f64, seed: u64) -> Result<SubnetMask> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Config(format!("density {density} is outside [0, 1]")));
    }
    let threshold = (density * (1u64 << 53) as f64) as u64;
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(schema.len());
    for s in schema {
        let base = offset;
        let mut words = vec![0u64; s.numel.div_ceil(64)];
        words.par_iter_mut().enumerate().for_each(|(wi, w)| {
            let first = wi * 64;
            let last = (first + 64).min(s.numel);
            let mut word = 0u64;
            for i in first..last {
                if splitmix64_at(seed, base + i as u64) >> 11 < threshold {
                    word |= 1 << (i - first);
                }
            }
            *w = word;
        });
        offset += s.numel as u64;
        tensors.push(MaskTensor {
            name: s.name.clone(),
            shape: s.shape.clone(),
            bits: Bitset::from_words(s.numel, words),
        });
    }
    Ok(SubnetMask {
        tolerance: 0.0,
        source: format!("random(density={density}, seed={seed})"),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(n: usize) -> Vec<MaskTensorSchema> {
        vec![MaskTensorSchema::new("w", vec![n])]
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of SplitMix64 seeded with 0 (reference C implementation).
        assert_eq!(splitmix64_at(0, 0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64_at(0, 1), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64_at(0, 2), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn random_density_extremes() {
        let s = schema(1000);
        assert_eq!(random_mask(&s, 0.0, 1).unwrap().updated(), 0);
        assert_eq!(random_mask(&s, 1.0, 1).unwrap().updated(), 1000);
        assert!(random_mask(&s, 1.5, 1).is_err());
    }

    #[test]
    fn random_density_binomial_bound() {
        let n = 1_000_000;
        let m = random_mask(&schema(n), 0.3, 42).unwrap();
        let sigma = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((m.density() - 0.3).abs() < 5.0 * sigma, "{}", m.density());
        assert!(5.0 * sigma < 0.0023);
    }

    #[test]
    fn random_is_reproducible_and_seed_dependent() {
        let s = vec![
            MaskTensorSchema::new("a", vec![7, 13]),
            MaskTensorSchema::new("b", vec![300]),
        ];
        let a = random_mask(&s, 0.4, 9).unwrap();
        assert_eq!(a, random_mask(&s, 0.4, 9).unwrap());
        assert_ne!(a.tensors, random_mask(&s, 0.4, 10).unwrap().tensors);
        // The second tensor continues the counter of the first.
        let joined = random_mask(&[MaskTensorSchema::new("x", vec![391])], 0.4, 9).unwrap();
        let bits: Vec<bool> = (0..391).map(|i| joined.tensors[0].bits.get(i)).collect();
        let split: Vec<bool> = (0..91)
            .map(|i| a.tensors[0].bits.get(i))
            .chain((0..300).map(|i| a.tensors[1].bits.get(i)))
            .collect();
        assert_eq!(bits, split);
    }

    #[test]
    fn set_algebra() {
        let s = schema(10_000);
        let a = random_mask(&s, 0.3, 1).unwrap();
        let b = random_mask(&s, 0.5, 2).unwrap();
        assert_eq!(mask_ops(&a, &a, MaskOp::Intersect).unwrap().tensors, a.tensors);
        assert_eq!(mask_ops(&a, &complement(&a), MaskOp::Intersect).unwrap().updated(), 0);
        let u = mask_ops(&a, &b, MaskOp::Union).unwrap().updated();
        let i = mask_ops(&a, &b, MaskOp::Intersect).unwrap().updated();
        // Inclusion-exclusion against an element-by-element count.
        let (mut na, mut nb, mut nboth) = (0u64, 0u64, 0u64);
        for k in 0..10_000 {
            let (x, y) = (a.tensors[0].bits.get(k), b.tensors[0].bits.get(k));
            na += x as u64;
            nb += y as u64;
            nboth += (x && y) as u64;
        }
        assert_eq!(i, nboth);
        assert_eq!(u, na + nb - nboth);
        let d = mask_ops(&a, &b, MaskOp::Difference).unwrap().updated();
        assert_eq!(d, na - nboth);
        assert!(mask_ops(&a, &random_mask(&schema(9), 0.5, 1).unwrap(), MaskOp::Union).is_err());
    }

    #[test]
    fn overlap_identity_and_disjoint() {
        let s = schema(1000);
        let a = random_mask(&s, 0.3, 3).unwrap();
        let r = overlap(&a, &a).unwrap();
        assert_eq!((r.o1, r.o2), (1.0, 1.0));
        let r = overlap(&a, &complement(&a)).unwrap();
        assert_eq!((r.o1, r.o2), (0.0, 0.0));
        let empty = SubnetMask::empty(&s, 0.0, "empty");
        assert!(matches!(overlap(&empty, &a), Err(Error::EmptyMask(_))));
        assert!(matches!(overlap(&a, &empty), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn overlap_baselines_are_opposite_densities() {
        let s = schema(100_000);
        let a = random_mask(&s, 0.129, 5).unwrap();
        let b = random_mask(&s, 0.230, 6).unwrap();
        let r = overlap(&a, &b).unwrap();
        assert_eq!(r.o1_random, r.density2);
        assert_eq!(r.o2_random, r.density1);
        assert_eq!(r.common, overlap(&b, &a).unwrap().common);
    }

    #[test]
    fn per_layer_overlap() {
        let s = vec![
            MaskTensorSchema::new("model.layers.0.mlp.up_proj.weight", vec![64]),
            MaskTensorSchema::new("model.layers.1.mlp.up_proj.weight", vec![64]),
        ];
        let mut a = SubnetMask::empty(&s, 0.0, "a");
        let mut b = SubnetMask::empty(&s, 0.0, "b");
        a.tensors[0].bits.set(1, true);
        a.tensors[0].bits.set(2, true);
        b.tensors[0].bits.set(2, true);
        b.tensors[1].bits.set(5, true);
        let r = overlap_by_layer(&a, &b, &RoleTable::builtin()).unwrap();
        let layers = r.per_layer.unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].layer_index, Some(0));
        assert_eq!((layers[0].o1, layers[0].o2), (Some(0.5), Some(1.0)));
        assert_eq!((layers[1].o1, layers[1].o2), (None, Some(0.0)));
    }
}
