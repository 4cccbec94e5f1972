//! Bit-packed binary tensors and the XNOR/popcount primitive.
//!
//! Values in `{-1, +1}` are stored one bit per value along the channel axis,
//! 64 channels per `u64` word with channel 0 in the least-significant bit.
//! A set bit encodes `+1`, a clear bit `-1`. Channels are rounded up to a whole
//! number of words; the trailing pad bits are always zero.

use crate::error::{BitflowError, Result};
use crate::tensor::{KernelDims, Nhwc, Tensor};

/// Bits per packed word.
pub const WORD_BITS: usize = 64;

/// Number of words needed to hold `channels` bits.
#[inline]
pub fn words_for(channels: usize) -> usize {
    channels.div_ceil(WORD_BITS)
}

/// Mask of the valid (non-pad) bits in the last word of a `channels`-wide pixel.
#[inline]
pub fn tail_mask(channels: usize) -> u64 {
    match channels % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Sign used throughout the engine: zero maps to `+1`.
#[inline]
pub fn sign_bit(v: f32) -> bool {
    v >= 0.0
}

/// Activations packed one bit per value along channels (NHWC order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlaneTensor {
    dims: Nhwc,
    words_per_pixel: usize,
    words: Vec<u64>,
}

impl BitPlaneTensor {
    /// All-`-1` tensor (every bit clear).
    pub fn zeros(dims: Nhwc) -> Result<Self> {
        dims.validate()?;
        let wpp = words_for(dims.channels);
        let len = dims
            .pixels()
            .checked_mul(wpp)
            .ok_or(BitflowError::DimensionOverflow)?;
        Ok(Self {
            dims,
            words_per_pixel: wpp,
            words: vec![0; len],
        })
    }

    /// Wrap raw words. Pad bits must already be zero.
    pub fn from_words(dims: Nhwc, words: Vec<u64>) -> Result<Self> {
        dims.validate()?;
        let wpp = words_for(dims.channels);
        if words.len() != dims.pixels() * wpp {
            return Err(BitflowError::ShapeMismatch(format!(
                "expected {} words for {:?}, got {}",
                dims.pixels() * wpp,
                dims,
                words.len()
            )));
        }
        let mask = tail_mask(dims.channels);
        if words.chunks_exact(wpp).any(|px| px[wpp - 1] & !mask != 0) {
            return Err(BitflowError::Corrupt("non-zero channel pad bits".into()));
        }
        Ok(Self {
            dims,
            words_per_pixel: wpp,
            words,
        })
    }

    pub fn dims(&self) -> Nhwc {
        self.dims
    }

    pub fn words_per_pixel(&self) -> usize {
        self.words_per_pixel
    }

    /// Zero-filled pad bits per pixel.
    pub fn channel_pad(&self) -> usize {
        self.words_per_pixel * WORD_BITS - self.dims.channels
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub(crate) fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    /// Words of one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[u64] {
        let off = self.pixel_offset(n, y, x);
        &self.words[off..off + self.words_per_pixel]
    }

    #[inline]
    pub(crate) fn pixel_offset(&self, n: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.height + y) * self.dims.width + x) * self.words_per_pixel
    }

    /// Bit for channel `c` at a pixel.
    pub fn bit(&self, n: usize, y: usize, x: usize, c: usize) -> bool {
        let px = self.pixel(n, y, x);
        px[c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }
}

/// Binary kernels in `[out_channels, filter_h, filter_w, in_channels]` order,
/// `in_channels` packed into words per filter site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedKernelSet {
    dims: KernelDims,
    words_per_site: usize,
    words: Vec<u64>,
    pad_correction: i64,
}

impl PackedKernelSet {
    pub fn from_words(dims: KernelDims, words: Vec<u64>) -> Result<Self> {
        dims.validate()?;
        let wps = words_for(dims.in_channels);
        let expected = dims.sites() * dims.out_channels * wps;
        if words.len() != expected {
            return Err(BitflowError::ShapeMismatch(format!(
                "expected {expected} kernel words for {dims:?}, got {}",
                words.len()
            )));
        }
        let mask = tail_mask(dims.in_channels);
        if words.chunks_exact(wps).any(|s| s[wps - 1] & !mask != 0) {
            return Err(BitflowError::Corrupt("non-zero kernel pad bits".into()));
        }
        let channel_pad = wps * WORD_BITS - dims.in_channels;
        Ok(Self {
            dims,
            words_per_site: wps,
            words,
            pad_correction: (dims.sites() * channel_pad) as i64,
        })
    }

    pub fn dims(&self) -> KernelDims {
        self.dims
    }

    pub fn words_per_site(&self) -> usize {
        self.words_per_site
    }

    pub fn channel_pad(&self) -> usize {
        self.words_per_site * WORD_BITS - self.dims.in_channels
    }

    /// Pad-bit positions per output element; each always XNORs to a match.
    pub fn pad_correction(&self) -> i64 {
        self.pad_correction
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Contiguous words of one output channel (`filter_h * filter_w * words_per_site`).
    #[inline]
    pub fn kernel(&self, out: usize) -> &[u64] {
        let len = self.dims.sites() * self.words_per_site;
        &self.words[out * len..(out + 1) * len]
    }

    /// Bit of weight `(o, fy, fx, c)`.
    pub fn bit(&self, o: usize, fy: usize, fx: usize, c: usize) -> bool {
        let site = (fy * self.dims.filter_w + fx) * self.words_per_site;
        self.kernel(o)[site + c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    /// Copy with the pad correction shifted; only used to exercise fault detection.
    #[doc(hidden)]
    pub fn with_pad_correction_bias(&self, bias: i64) -> Self {
        let mut k = self.clone();
        k.pad_correction += bias;
        k
    }
}

/// Pack a real-valued NHWC tensor by sign (`v >= 0` is `+1`).
pub fn pack_activations(x: &Tensor<f32>) -> Result<BitPlaneTensor> {
    let dims = x.dims();
    let mut out = BitPlaneTensor::zeros(dims)?;
    pack_signs_into(x.data(), dims.channels, out.words_mut(), |v| sign_bit(*v));
    Ok(out)
}

/// Pack a real-valued `(out, fh, fw, in)` weight tensor by sign.
pub fn pack_weights(w: &[f32], dims: KernelDims) -> Result<PackedKernelSet> {
    dims.validate()?;
    let total = dims.element_count()?;
    if w.len() != total {
        return Err(BitflowError::ShapeMismatch(format!(
            "weight buffer has {} values, dims {:?} need {total}",
            w.len(),
            dims
        )));
    }
    let wps = words_for(dims.in_channels);
    let mut words = vec![0u64; dims.out_channels * dims.sites() * wps];
    pack_signs_into(w, dims.in_channels, &mut words, |v| sign_bit(*v));
    PackedKernelSet::from_words(dims, words)
}

/// Pack a `{-1,+1}` integer tensor. Any non-negative value counts as `+1`.
pub fn pack_pm1(x: &Tensor<i32>) -> Result<BitPlaneTensor> {
    let dims = x.dims();
    let mut out = BitPlaneTensor::zeros(dims)?;
    pack_signs_into(x.data(), dims.channels, out.words_mut(), |v| *v >= 0);
    Ok(out)
}

pub(crate) fn pack_signs_into<T>(
    values: &[T],
    channels: usize,
    words: &mut [u64],
    positive: impl Fn(&T) -> bool,
) {
    let wpp = words_for(channels);
    for (px, dst) in values
        .chunks_exact(channels)
        .zip(words.chunks_exact_mut(wpp))
    {
        for (w, chunk) in dst.iter_mut().zip(px.chunks(WORD_BITS)) {
            *w = chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, v)| acc | (positive(v) as u64) << i);
        }
    }
}

/// Expand packed bits back to `±1` integers on the unpadded channels.
pub fn unpack_bits(t: &BitPlaneTensor) -> Tensor<i32> {
    let dims = t.dims();
    let wpp = t.words_per_pixel();
    let mut data = Vec::with_capacity(dims.element_count_unchecked());
    for px in t.words().chunks_exact(wpp) {
        for c in 0..dims.channels {
            let b = px[c / WORD_BITS] >> (c % WORD_BITS) & 1;
            data.push(2 * b as i32 - 1);
        }
    }
    Tensor::from_vec(dims, data).expect("unpacked length matches dims")
}

/// Unpack a kernel set into `±1` integers in `(out, fh, fw, in)` order.
pub fn unpack_kernels(k: &PackedKernelSet) -> Vec<i32> {
    let d = k.dims();
    let wps = k.words_per_site();
    let mut out = Vec::with_capacity(d.out_channels * d.sites() * d.in_channels);
    for site in k.words().chunks_exact(wps) {
        for c in 0..d.in_channels {
            let b = site[c / WORD_BITS] >> (c % WORD_BITS) & 1;
            out.push(2 * b as i32 - 1);
        }
    }
    out
}

const M1: u64 = 0x5555_5555_5555_5555;
const M2: u64 = 0x3333_3333_3333_3333;
const M4: u64 = 0x0f0f_0f0f_0f0f_0f0f;
const M8: u64 = 0x00ff_00ff_00ff_00ff;
const M16: u64 = 0x0000_ffff_0000_ffff;

/// Per-byte bit counts of `v`, one count (0..=8) in each byte lane.
#[inline(always)]
pub fn byte_counts(v: u64) -> u64 {
    let v = v - ((v >> 1) & M1);
    let v = (v & M2) + ((v >> 2) & M2);
    (v + (v >> 4)) & M4
}

/// Sum the byte lanes of `v` into one value.
#[inline(always)]
fn reduce_u8_lanes(v: u64) -> u64 {
    let v = (v & M8) + ((v >> 8) & M8);
    reduce_u16_lanes(v)
}

#[inline(always)]
fn reduce_u16_lanes(v: u64) -> u64 {
    let v = (v & M16) + ((v >> 16) & M16);
    (v & 0xffff_ffff) + (v >> 32)
}

/// Byte lanes can absorb 31 words of counts (31 * 8 = 248) before widening.
const BYTE_LANE_WORDS: usize = 31;

/// Count positions where `a` and `b` agree, i.e. `popcount(XNOR(a, b))`.
///
/// Per-byte counts are summed pairwise in byte lanes, widened to 16-bit lanes
/// when a byte could overflow, and reduced horizontally once at the end.
/// The count is exact.
#[inline]
pub fn xnor_match(a: &[u64], b: &[u64]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut wide = 0u64;
    for (ca, cb) in a.chunks(BYTE_LANE_WORDS).zip(b.chunks(BYTE_LANE_WORDS)) {
        let mut lanes = 0u64;
        for (x, y) in ca.iter().zip(cb) {
            lanes += byte_counts(!(x ^ y));
        }
        wide += (lanes & M8) + ((lanes >> 8) & M8);
    }
    reduce_u16_lanes(wide) as u32
}

/// Checked [`xnor_match`] over two word spans.
pub fn popcount_match(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(BitflowError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(xnor_match(a, b))
}

/// Plain popcount of a word span using the same lane reduction.
pub fn popcount(a: &[u64]) -> u32 {
    a.iter()
        .map(|&w| reduce_u8_lanes(byte_counts(w)) as u32)
        .sum()
}
