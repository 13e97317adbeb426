//! Floating-point storage types and exact conversions to `f32`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a stored tensor. Only floating-point types are analyzed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dtype {
    BF16,
    F16,
    F32,
    F64,
}

/// Dtype strings that are valid safetensors but carry no floating-point weights.
const NON_FLOAT_DTYPES: &[&str] = &[
    "BOOL", "U8", "I8", "U16", "I16", "U32", "I32", "U64", "I64", "F8_E4M3", "F8_E5M2",
];

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::BF16 | Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::BF16 => "BF16",
            Dtype::F16 => "F16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    /// Parses a safetensors dtype string for `tensor`.
    pub fn parse(s: &str, tensor: &str) -> Result<Self> {
        match s {
            "BF16" => Ok(Dtype::BF16),
            "F16" => Ok(Dtype::F16),
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other if NON_FLOAT_DTYPES.contains(&other) => Err(Error::UnsupportedDtype {
                tensor: tensor.to_string(),
                dtype: other.to_string(),
            }),
            other => Err(Error::MalformedHeader(format!(
                "unknown dtype {other:?} for tensor {tensor}"
            ))),
        }
    }

    /// Decodes little-endian elements from `bytes` and appends them to `out`.
    ///
    /// `bytes.len()` must be a multiple of the element width. BF16 and F16 upcasts
    /// are exact; F64 values are narrowed to the nearest `f32`.
    pub fn decode_into(self, bytes: &[u8], out: &mut Vec<f32>) {
        debug_assert_eq!(bytes.len() % self.width(), 0);
        out.reserve(bytes.len() / self.width());
        match self {
            Dtype::BF16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]]))),
            ),
            Dtype::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32()),
            ),
            Dtype::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            ),
            Dtype::F64 => out.extend(bytes.chunks_exact(8).map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_le_bytes(b) as f32
            })),
        }
    }

    /// Encodes `values` little-endian into `out`. BF16 and F16 use round-to-nearest-even.
    pub fn encode_into(self, values: &[f32], out: &mut Vec<u8>) {
        out.reserve(values.len() * self.width());
        for &v in values {
            match self {
                Dtype::BF16 => out.extend_from_slice(&f32_to_bf16(v).to_le_bytes()),
                Dtype::F16 => out.extend_from_slice(&half::f16::from_f32(v).to_bits().to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
            }
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exact upcast of a bfloat16 bit pattern.
#[inline]
pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Rounds an `f32` to bfloat16 bits, round-to-nearest-even.
///
/// NaN payloads that survive truncation are kept (so every bf16 pattern round-trips);
/// a NaN whose payload lives only in the low half gets the quiet bit set.
#[inline]
pub fn f32_to_bf16(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        let hi = (bits >> 16) as u16;
        return if hi & 0x007F == 0 { hi | 0x0040 } else { hi };
    }
    let round_bias = 0x7FFF + ((bits >> 16) & 1);
    (bits.wrapping_add(round_bias) >> 16) as u16
}

/// Canonical quiet NaN in bfloat16.
pub const BF16_CANONICAL_NAN: u16 = 0x7FC0;

/// Rounds `x` to the nearest bfloat16-representable value (ties to even).
///
/// Increments below half an ulp of the stored value disappear. Every NaN maps to
/// the canonical quiet NaN.
#[inline]
pub fn bf16_round(x: f32) -> f32 {
    if x.is_nan() {
        return bf16_to_f32(BF16_CANONICAL_NAN);
    }
    bf16_to_f32(f32_to_bf16(x))
}
