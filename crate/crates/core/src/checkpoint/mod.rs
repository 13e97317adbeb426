//! Checkpoint access: safetensors parsing, dtype decoding and tensor-role classification.

mod dtype;
mod index;
mod roles;

pub use dtype::{bf16_round, bf16_to_f32, f32_to_bf16, Dtype, BF16_CANONICAL_NAN};
pub use index::{
    chunk_ranges, read_tensor_f32, write_safetensors, CheckpointIndex, TensorData, TensorMeta,
    TensorView,
};
pub use roles::{classify_tensor, RolePatternFile, RoleRuleSpec, RoleTable, TensorKind, TensorRole};

use regex::Regex;

use crate::error::{Error, Result};

/// Default number of elements decoded per work unit.
pub const DEFAULT_CHUNK_ELEMS: usize = 1 << 22;

/// Name-based tensor exclusion.
#[derive(Debug, Clone, Default)]
pub struct TensorFilter {
    exclude: Vec<Regex>,
}

impl TensorFilter {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let exclude = patterns
            .iter()
            .map(|p| Regex::new(p.as_ref()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(TensorFilter { exclude })
    }

    pub fn includes(&self, name: &str) -> bool {
        !self.exclude.iter().any(|re| re.is_match(name))
    }
}

/// Checks that `a` and `b` agree on names, shapes and dtypes of every included tensor,
/// returning the shared tensor names in order.
pub fn matched_tensors<'a>(
    a: &'a CheckpointIndex,
    b: &CheckpointIndex,
    filter: &TensorFilter,
) -> Result<Vec<&'a TensorMeta>> {
    let mut offenders = Vec::new();
    for (name, ma) in &a.tensors {
        if !filter.includes(name) {
            continue;
        }
        match b.tensors.get(name) {
            None => offenders.push(format!("{name} (missing in {})", b.path.display())),
            Some(mb) if mb.shape != ma.shape => offenders.push(format!(
                "{name} (shape {:?} vs {:?})",
                ma.shape, mb.shape
            )),
            Some(mb) if mb.dtype != ma.dtype => {
                offenders.push(format!("{name} (dtype {} vs {})", ma.dtype, mb.dtype))
            }
            Some(_) => {}
        }
    }
    for name in b.tensors.keys() {
        if filter.includes(name) && !a.tensors.contains_key(name) {
            offenders.push(format!("{name} (missing in {})", a.path.display()));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::SchemaMismatch { offenders });
    }
    Ok(a.tensors
        .values()
        .filter(|m| filter.includes(&m.name))
        .collect())
}
