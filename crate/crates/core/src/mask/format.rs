//! On-disk mask format (all integers little-endian):
//!
//! ```text
//! offset   size        field
//! 0        4           magic "SNMK"
//! 4        2           format version (u16, currently 1)
//! 6        8           extraction tolerance (f64 bit pattern)
//! 14       8           schema length L (u64)
//! 22       L           schema JSON: {"source": str, "tensors": [{"name", "shape", "numel"}]}
//! 22+L     ...         one bitset per schema tensor, in order, each ceil(numel/8) bytes;
//!                      bit k of byte j is element 8j+k, padding bits are zero
//! end-32   32          SHA-256 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Bitset, MaskTensor, MaskTensorSchema, SubnetMask};
use crate::error::{Error, Result};

pub const MASK_MAGIC: &[u8; 4] = b"SNMK";
pub const MASK_FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct SchemaBlock {
    source: String,
    tensors: Vec<MaskTensorSchema>,
}

/// Sends every written byte to both the hasher and the inner sink.
struct Hashing<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for Hashing<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn write_body<W: Write>(mask: &SubnetMask, out: &mut W) -> std::io::Result<()> {
    let schema = serde_json::to_vec(&SchemaBlock {
        source: mask.source.clone(),
        tensors: mask.schema(),
    })
    .expect("schema serializes");
    out.write_all(MASK_MAGIC)?;
    out.write_all(&MASK_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&mask.tolerance.to_bits().to_le_bytes())?;
    out.write_all(&(schema.len() as u64).to_le_bytes())?;
    out.write_all(&schema)?;
    let mut buf = Vec::new();
    for t in &mask.tensors {
        buf.clear();
        t.bits.write_bytes(&mut buf);
        out.write_all(&buf)?;
    }
    Ok(())
}

pub(super) fn content_digest(mask: &SubnetMask) -> [u8; 32] {
    let mut h = Hashing {
        inner: std::io::sink(),
        hasher: Sha256::new(),
    };
    write_body(mask, &mut h).expect("sink never fails");
    h.hasher.finalize().into()
}

/// Writes `mask` and returns its content digest.
pub fn write_mask(mask: &SubnetMask, path: impl AsRef<Path>) -> Result<[u8; 32]> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut h = Hashing {
        inner: BufWriter::new(file),
        hasher: Sha256::new(),
    };
    write_body(mask, &mut h).map_err(|e| Error::io(path, e))?;
    let digest: [u8; 32] = h.hasher.finalize().into();
    let mut inner = h.inner;
    inner.write_all(&digest).map_err(|e| Error::io(path, e))?;
    inner.flush().map_err(|e| Error::io(path, e))?;
    Ok(digest)
}

struct HashingReader<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingReader<R> {
    fn take(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        self.hasher.update(&buf);
        Ok(buf)
    }
}

fn truncated(e: std::io::Error, path: &Path) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::MalformedMask(format!("{}: truncated", path.display()))
    } else {
        Error::io(path, e)
    }
}

/// Reads and verifies a mask file in one streaming pass.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SubnetMask> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = HashingReader {
        inner: BufReader::new(file),
        hasher: Sha256::new(),
    };
    let io = |e| truncated(e, path);

    let magic = r.take(4).map_err(io)?;
    if magic != MASK_MAGIC {
        return Err(Error::MalformedMask(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes(r.take(2).map_err(io)?.try_into().expect("2"));
    if version != MASK_FORMAT_VERSION {
        return Err(Error::MalformedMask(format!("unsupported version {version}")));
    }
    let tolerance = f64::from_bits(u64::from_le_bytes(r.take(8).map_err(io)?.try_into().expect("8")));
    let schema_len = u64::from_le_bytes(r.take(8).map_err(io)?.try_into().expect("8"));
    let file_len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if schema_len > file_len {
        return Err(Error::MalformedMask(format!("schema length {schema_len} exceeds file size")));
    }
    let schema: SchemaBlock = serde_json::from_slice(&r.take(schema_len as usize).map_err(io)?)
        .map_err(|e| Error::MalformedMask(format!("schema: {e}")))?;

    let mut tensors = Vec::with_capacity(schema.tensors.len());
    for s in schema.tensors {
        if s.shape.iter().product::<usize>() != s.numel {
            return Err(Error::MalformedMask(format!(
                "tensor {}: shape {:?} does not hold {} elements",
                s.name, s.shape, s.numel
            )));
        }
        let bytes = r.take(s.numel.div_ceil(8)).map_err(io)?;
        let bits = Bitset::from_bytes(s.numel, &bytes).ok_or_else(|| {
            Error::MalformedMask(format!("tensor {}: nonzero padding bits", s.name))
        })?;
        tensors.push(MaskTensor {
            name: s.name,
            shape: s.shape,
            bits,
        });
    }
    let expected: [u8; 32] = r.hasher.finalize().into();
    let mut stored = [0u8; 32];
    r.inner.read_exact(&mut stored).map_err(io)?;
    if stored != expected {
        return Err(Error::MalformedMask(format!("{}: digest mismatch", path.display())));
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::MalformedMask(format!("{}: trailing bytes", path.display())));
    }
    Ok(SubnetMask {
        tolerance,
        source: schema.source,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::random_mask;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let mut m = SubnetMask::empty(&[MaskTensorSchema::new("w", vec![2, 5])], 1e-5, "src");
        m.tensors[0].bits.set(0, true);
        m.tensors[0].bits.set(9, true);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.snmk");
        let digest = write_mask(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"SNMK");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..14], &1e-5f64.to_bits().to_le_bytes());
        let l = u64::from_le_bytes(bytes[14..22].try_into().unwrap()) as usize;
        let schema: serde_json::Value = serde_json::from_slice(&bytes[22..22 + l]).unwrap();
        assert_eq!(schema["tensors"][0]["numel"], 10);
        assert_eq!(&bytes[22 + l..24 + l], &[0b0000_0001, 0b0000_0010]);
        assert_eq!(bytes.len(), 24 + l + 32);
        let sha: [u8; 32] = Sha256::digest(&bytes[..24 + l]).into();
        assert_eq!(&bytes[24 + l..], &sha);
        assert_eq!(digest, sha);
        assert_eq!(m.digest(), sha);
    }

    #[test]
    fn corruption_detected() {
        let m = random_mask(&[MaskTensorSchema::new("w", vec![100])], 0.5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.snmk");
        write_mask(&m, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::MalformedMask(_))));
        std::fs::write(&p, &bytes[..n - 10]).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::MalformedMask(_))));
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_mask(&p), Err(Error::MalformedMask(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn roundtrip(sizes in prop::collection::vec(0usize..300, 1..5), density in 0.0f64..=1.0, seed: u64, tol in 0.0f64..1e-3) {
            let schema: Vec<_> = sizes.iter().enumerate()
                .map(|(i, &n)| MaskTensorSchema::new(format!("t{i}"), vec![n])).collect();
            let mut m = random_mask(&schema, density, seed).unwrap();
            m.tolerance = tol;
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.snmk");
            let d = write_mask(&m, &p).unwrap();
            let back = read_mask(&p).unwrap();
            prop_assert_eq!(back.digest(), d);
            prop_assert_eq!(back, m);
        }
    }
}
