/// Fixed-length bitset backed by `u64` words. Bit `i` lives in word `i / 64`, bit `i % 64`,
/// so the little-endian byte image has bit `k` of byte `j` equal to element `8j + k`.
/// Bits past `len` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bitset {
    len: usize,
    words: Vec<u64>,
}

impl Bitset {
    pub fn zeros(len: usize) -> Self {
        Bitset {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut b = Bitset {
            len,
            words: vec![u64::MAX; len.div_ceil(64)],
        };
        b.clear_tail();
        b
    }

    pub(crate) fn from_words(len: usize, words: Vec<u64>) -> Self {
        assert_eq!(words.len(), len.div_ceil(64));
        let mut b = Bitset { len, words };
        b.clear_tail();
        b
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let m = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= m;
        } else {
            self.words[i / 64] &= !m;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let t = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + t)
            })
        })
    }

    pub(crate) fn zip_with(&self, other: &Bitset, f: impl Fn(u64, u64) -> u64) -> Bitset {
        assert_eq!(self.len, other.len);
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Bitset::from_words(self.len, words)
    }

    pub fn and(&self, other: &Bitset) -> Bitset {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Bitset) -> Bitset {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn and_not(&self, other: &Bitset) -> Bitset {
        self.zip_with(other, |a, b| a & !b)
    }

    pub fn not(&self) -> Bitset {
        let words = self.words.iter().map(|w| !w).collect();
        Bitset::from_words(self.len, words)
    }

    /// Popcount of `self & other` without materializing it.
    pub fn and_count(&self, other: &Bitset) -> u64 {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as u64)
            .sum()
    }

    /// Number of bytes in the padded byte image.
    pub fn byte_len(&self) -> usize {
        self.len.div_ceil(8)
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        let n = self.byte_len();
        let start = out.len();
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.truncate(start + n);
    }

    /// Rebuilds from a byte image; returns `None` if padding bits are set.
    pub fn from_bytes(len: usize, bytes: &[u8]) -> Option<Bitset> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let words: Vec<u64> = bytes
            .chunks(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..c.len()].copy_from_slice(c);
                u64::from_le_bytes(b)
            })
            .collect();
        let candidate = Bitset { len, words };
        let mut cleared = candidate.clone();
        cleared.clear_tail();
        (cleared == candidate).then_some(candidate)
    }
}
