//! Bit-packed bipolar tensors and the XNOR/popcount kernels.
//!
//! Element encoding: bit `1` is `+1`, bit `0` is `-1`. Bits are stored
//! LSB-first in 64-bit words, so element `i` lives in bit `i % 64` of word
//! `i / 64`. Bits past `bit_len` are kept at zero by every constructor, but
//! the dot-product kernels mask them anyway and never rely on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `bits`-long vector.
#[inline]
pub fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Real-valued tensor, row-major over `dims` (channels last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl RealTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::LengthMismatch {
                left: n,
                right: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Packed `{-1, +1}` tensor, one bit per element.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitTensor {
    pub dims: Vec<usize>,
    bit_len: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// All elements `-1`.
    pub fn zeros(bit_len: usize) -> Self {
        Self {
            dims: vec![bit_len],
            bit_len,
            words: vec![0; words_for(bit_len)],
        }
    }

    /// Builds a tensor from raw words. Padding bits are cleared.
    pub fn from_words(bit_len: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(bit_len) {
            return Err(Error::LengthMismatch {
                left: words_for(bit_len),
                right: words.len(),
            });
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(bit_len);
        }
        Ok(Self {
            dims: vec![bit_len],
            bit_len,
            words,
        })
    }

    /// Builds from raw words without clearing the padding bits. Only useful
    /// to exercise the kernels' masking.
    #[doc(hidden)]
    pub fn from_words_unmasked(bit_len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(bit_len) {
            return Err(Error::LengthMismatch {
                left: words_for(bit_len),
                right: words.len(),
            });
        }
        Ok(Self {
            dims: vec![bit_len],
            bit_len,
            words,
        })
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut n = 0usize;
        for b in bits {
            if n.is_multiple_of(WORD_BITS) {
                words.push(0);
            }
            if b {
                *words.last_mut().unwrap() |= 1u64 << (n % WORD_BITS);
            }
            n += 1;
        }
        Self {
            dims: vec![n],
            bit_len: n,
            words,
        }
    }

    pub fn with_dims(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.bit_len {
            return Err(Error::LengthMismatch {
                left: self.bit_len,
                right: n,
            });
        }
        self.dims = dims;
        Ok(self)
    }

    #[inline]
    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.bit_len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.bit_len, "bit index {i} out of range {}", self.bit_len);
        let w = &mut self.words[i / WORD_BITS];
        let m = 1u64 << (i % WORD_BITS);
        if value {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    /// Number of `+1` elements.
    pub fn count_ones(&self) -> u32 {
        let n = self.words.len();
        self.words
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let w = if j + 1 == n { w & tail_mask(self.bit_len) } else { w };
                w.count_ones()
            })
            .sum()
    }

    /// Flips every valid element.
    pub fn complement(&self) -> Self {
        let words = self.words.iter().map(|w| !w).collect();
        Self::from_words(self.bit_len, words)
            .expect("word count preserved")
            .with_dims(self.dims.clone())
            .expect("dims preserved")
    }

    /// Appends the bits of `other` to `self`.
    pub fn extend_from(&mut self, other: &BitTensor) {
        let new_len = self.bit_len + other.bit_len;
        let base = self.bit_len / WORD_BITS;
        let shift = self.bit_len % WORD_BITS;
        self.words.resize(words_for(new_len), 0);
        let n = other.words.len();
        for (j, &w) in other.words.iter().enumerate() {
            let w = if j + 1 == n { w & tail_mask(other.bit_len) } else { w };
            self.words[base + j] |= w << shift;
            if shift != 0 && base + j + 1 < self.words.len() {
                self.words[base + j + 1] |= w >> (WORD_BITS - shift);
            }
        }
        self.bit_len = new_len;
        self.dims = vec![new_len];
    }

    /// Concatenates bit vectors in order.
    pub fn concat<'a, I: IntoIterator<Item = &'a BitTensor>>(parts: I) -> Self {
        let mut out = BitTensor::zeros(0);
        for p in parts {
            out.extend_from(p);
        }
        out
    }

    /// Copies `len` bits starting at `start` into a new tensor.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.bit_len);
        BitTensor::from_bools((start..start + len).map(|i| self.get(i)))
    }
}

/// Sign rule applied elementwise: `x >= 0` maps to `+1` (bit 1).
pub fn binarize(x: &RealTensor) -> BitTensor {
    BitTensor::from_bools(x.values.iter().map(|&v| v >= 0.0))
        .with_dims(x.dims.clone())
        .expect("same element count")
}

/// Packs a bipolar integer vector.
pub fn pack(v: &[i8]) -> Result<BitTensor> {
    if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| x != 1 && x != -1) {
        return Err(Error::NotBipolar {
            index,
            value: value as i64,
        });
    }
    Ok(BitTensor::from_bools(v.iter().map(|&x| x == 1)))
}

pub fn unpack(t: &BitTensor) -> Vec<i8> {
    (0..t.bit_len()).map(|i| if t.get(i) { 1 } else { -1 }).collect()
}

/// Number of positions where the valid bits of `a` and `b` agree.
#[inline]
pub fn xnor_popcount(a: &BitTensor, b: &BitTensor) -> Result<u32> {
    if a.bit_len != b.bit_len {
        return Err(Error::LengthMismatch {
            left: a.bit_len,
            right: b.bit_len,
        });
    }
    Ok(xnor_popcount_words(&a.words, &b.words, a.bit_len))
}

/// Word-level kernel: popcount of `XNOR(a, b)` over the first `bits` bits.
#[inline]
pub fn xnor_popcount_words(a: &[u64], b: &[u64], bits: usize) -> u32 {
    let n = words_for(bits);
    let (Some((la, ha)), Some((lb, hb))) = (a[..n].split_last(), b[..n].split_last()) else {
        return 0;
    };
    let body: u32 = ha.iter().zip(hb).map(|(x, y)| (!(x ^ y)).count_ones()).sum();
    body + (!(la ^ lb) & tail_mask(bits)).count_ones()
}

/// Bipolar dot product `sum(a_i * b_i)` computed as `2 * popcount(XNOR) - F`.
pub fn xnor_popcount_dot(a: &BitTensor, b: &BitTensor) -> Result<i64> {
    let p = xnor_popcount(a, b)? as i64;
    Ok(2 * p - a.bit_len as i64)
}

/// Popcount of `XNOR(a, b)` restricted to bits `[start, start + len)`.
pub fn xnor_popcount_range(a: &BitTensor, b: &BitTensor, start: usize, len: usize) -> u32 {
    debug_assert_eq!(a.bit_len, b.bit_len);
    let end = (start + len).min(a.bit_len);
    if start >= end {
        return 0;
    }
    let mut acc = 0u32;
    let mut pos = start;
    while pos < end {
        let w = pos / WORD_BITS;
        let lo = pos % WORD_BITS;
        let hi = (end - w * WORD_BITS).min(WORD_BITS);
        let mask = if hi - lo == WORD_BITS {
            u64::MAX
        } else {
            ((1u64 << (hi - lo)) - 1) << lo
        };
        acc += (!(a.words[w] ^ b.words[w]) & mask).count_ones();
        pos = w * WORD_BITS + hi;
    }
    acc
}
