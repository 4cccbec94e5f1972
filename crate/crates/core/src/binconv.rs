//! Binary direct convolution over packed bit planes.
//!
//! Every path funnels through one micro-kernel that walks a spatially padded
//! slab of packed input rows. For one output element and one filter row it
//! XNORs `filter_w * words_per_pixel` contiguous input words against the
//! matching kernel words, which works because kernels are stored as
//! `[out, fh, fw, in]`.
//!
//! Spatial padding uses `-1` (all bits clear). Channel pad bits are zero in
//! both operands, so they always match and are removed by
//! [`PackedKernelSet::pad_correction`].
//!
//! The 8-bit paths accumulate exactly and saturate once at the end, so
//! `conv_i8 == clamp(conv_i32, -127, 127)` holds element-wise.

use rayon::prelude::*;

use crate::bitcore::{byte_counts, words_for, BitPlaneTensor, PackedKernelSet, WORD_BITS};
use crate::bnquant::ThresholdParams;
use crate::error::{BitflowError, Result};
use crate::tensor::{clamp_i8, I32FeatureMap, I8FeatureMap, KernelDims, Nhwc, Tensor};

/// Stride and spatial padding of a direct convolution. Pad value is fixed at `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
        }
    }
}

impl ConvSpec {
    pub const fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { stride, pad }
    }

    /// `3x3, stride 1, pad 1`-style "same" spec for odd filters.
    pub const fn same(filter: usize) -> Self {
        Self {
            stride: (1, 1),
            pad: (filter / 2, filter / 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(BitflowError::InvalidParameter(
                "stride must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Output `(height, width)` of the standard direct-convolution formula.
    pub fn output_hw(
        &self,
        height: usize,
        width: usize,
        fh: usize,
        fw: usize,
    ) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = height + 2 * self.pad.0;
        let pw = width + 2 * self.pad.1;
        if ph < fh || pw < fw {
            return Err(BitflowError::EmptyOutput);
        }
        Ok(((ph - fh) / self.stride.0 + 1, (pw - fw) / self.stride.1 + 1))
    }

    pub fn output_dims(&self, input: Nhwc, k: KernelDims) -> Result<Nhwc> {
        if input.channels != k.in_channels {
            return Err(BitflowError::ChannelMismatch {
                input: input.channels,
                kernel: k.in_channels,
            });
        }
        let (oh, ow) = self.output_hw(input.height, input.width, k.filter_h, k.filter_w)?;
        Ok(Nhwc::new(input.batch, oh, ow, k.out_channels))
    }
}

/// Output rows processed per tile in [`conv_fused`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TileHint {
    /// Size tiles so one packed input tile plus one kernel fit in 32 KiB.
    #[default]
    Auto,
    /// Fixed number of output rows per tile (clamped to at least one).
    Rows(usize),
    /// One tile per image.
    WholeImage,
}

const TILE_BUDGET_BYTES: usize = 32 * 1024;

impl TileHint {
    fn output_rows(self, input: Nhwc, k: KernelDims, spec: &ConvSpec, out_h: usize) -> usize {
        match self {
            TileHint::Rows(r) => r.clamp(1, out_h),
            TileHint::WholeImage => out_h,
            TileHint::Auto => {
                let wpp = words_for(input.channels);
                let row_bytes = (input.width + 2 * spec.pad.1) * wpp * 8;
                let kernel_bytes = k.sites() * wpp * 8;
                let in_rows = TILE_BUDGET_BYTES.saturating_sub(kernel_bytes) / row_bytes.max(1);
                if in_rows < k.filter_h {
                    1
                } else {
                    ((in_rows - k.filter_h) / spec.stride.0 + 1).clamp(1, out_h)
                }
            }
        }
    }
}

/// Geometry shared by every path once the input slab is spatially padded.
struct Geometry {
    wpp: usize,
    /// Padded row length in words.
    row_words: usize,
    out_w: usize,
    out_c: usize,
    fh: usize,
    /// Words in one filter row of one kernel (`fw * wpp`).
    span: usize,
    stride: (usize, usize),
    /// `64 * wpp * sites + pad_correction`: subtract from `2 * matches`.
    bias: i64,
}

impl Geometry {
    fn new(padded_w: usize, out_w: usize, k: &PackedKernelSet, stride: (usize, usize)) -> Self {
        let d = k.dims();
        let wpp = k.words_per_site();
        Self {
            wpp,
            row_words: padded_w * wpp,
            out_w,
            out_c: d.out_channels,
            fh: d.filter_h,
            span: d.filter_w * wpp,
            stride,
            bias: (WORD_BITS * wpp * d.sites()) as i64 + k.pad_correction(),
        }
    }

    /// Exact `±1` dot products for `rows` output rows whose first receptive
    /// field starts at slab row 0; calls `emit(index, sum)` in NHWC order.
    #[inline]
    fn run(&self, slab: &[u64], k: &PackedKernelSet, rows: usize, emit: impl FnMut(usize, i64)) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            return unsafe { self.run_avx2(slab, k, rows, emit) };
        }
        self.run_generic(slab, k, rows, emit)
    }

    /// Same code with the kernel block held in 256-bit registers.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn run_avx2(
        &self,
        slab: &[u64],
        k: &PackedKernelSet,
        rows: usize,
        emit: impl FnMut(usize, i64),
    ) {
        self.run_generic(slab, k, rows, emit)
    }

    #[inline(always)]
    fn run_generic(
        &self,
        slab: &[u64],
        k: &PackedKernelSet,
        rows: usize,
        mut emit: impl FnMut(usize, i64),
    ) {
        let mut idx = 0;
        for oy in 0..rows {
            let row_base = oy * self.stride.0 * self.row_words;
            for ox in 0..self.out_w {
                let base = row_base + ox * self.stride.1 * self.wpp;
                let mut o = 0;
                while o + BLOCK <= self.out_c {
                    let kerns = [
                        k.kernel(o),
                        k.kernel(o + 1),
                        k.kernel(o + 2),
                        k.kernel(o + 3),
                    ];
                    for m in
                        window_matches_block(slab, base, self.row_words, kerns, self.fh, self.span)
                    {
                        emit(idx, 2 * m as i64 - self.bias);
                        idx += 1;
                    }
                    o += BLOCK;
                }
                for o in o..self.out_c {
                    let m =
                        window_matches(slab, base, self.row_words, k.kernel(o), self.fh, self.span);
                    emit(idx, 2 * m as i64 - self.bias);
                    idx += 1;
                }
            }
        }
    }
}

/// Output channels sharing one pass over a receptive field.
const BLOCK: usize = 4;
/// Byte lanes hold at most `8 * FLUSH` before widening.
const FLUSH: usize = 31;

#[inline(always)]
fn widen_bytes(lanes: u64) -> u64 {
    (lanes & 0x00ff_00ff_00ff_00ff) + ((lanes >> 8) & 0x00ff_00ff_00ff_00ff)
}

#[inline(always)]
fn fold_halfwords(wide: u64) -> u64 {
    let v = (wide & 0x0000_ffff_0000_ffff) + ((wide >> 16) & 0x0000_ffff_0000_ffff);
    (v & 0xffff_ffff) + (v >> 32)
}

/// [`window_matches`] for `BLOCK` kernels at once; each input word is loaded once.
#[inline(always)]
fn window_matches_block(
    slab: &[u64],
    base: usize,
    row_words: usize,
    kerns: [&[u64]; BLOCK],
    fh: usize,
    span: usize,
) -> [u64; BLOCK] {
    let mut wide = [0u64; BLOCK];
    let mut lanes = [0u64; BLOCK];
    let mut n = 0;
    for fy in 0..fh {
        let a = &slab[base + fy * row_words..base + fy * row_words + span];
        let b: [&[u64]; BLOCK] = std::array::from_fn(|j| &kerns[j][fy * span..(fy + 1) * span]);
        for (i, &x) in a.iter().enumerate() {
            for j in 0..BLOCK {
                lanes[j] += byte_counts(!(x ^ b[j][i]));
            }
            n += 1;
            if n == FLUSH {
                for j in 0..BLOCK {
                    wide[j] += widen_bytes(lanes[j]);
                    lanes[j] = 0;
                }
                n = 0;
            }
        }
    }
    std::array::from_fn(|j| fold_halfwords(wide[j] + widen_bytes(lanes[j])))
}

/// XNOR matches over one receptive field, with the byte-lane reduction tree.
#[inline(always)]
fn window_matches(
    slab: &[u64],
    base: usize,
    row_words: usize,
    kern: &[u64],
    fh: usize,
    span: usize,
) -> u64 {
    let mut wide = 0u64;
    let mut lanes = 0u64;
    let mut n = 0;
    for fy in 0..fh {
        let a = &slab[base + fy * row_words..base + fy * row_words + span];
        let b = &kern[fy * span..(fy + 1) * span];
        for (x, y) in a.iter().zip(b) {
            lanes += byte_counts(!(x ^ y));
            n += 1;
            if n == FLUSH {
                wide += widen_bytes(lanes);
                lanes = 0;
                n = 0;
            }
        }
    }
    fold_halfwords(wide + widen_bytes(lanes))
}

/// Copy of `x` with `pad` rows/columns of `-1` (zero bits) on every side.
pub fn pad_spatial(x: &BitPlaneTensor, pad: (usize, usize)) -> Result<BitPlaneTensor> {
    if pad == (0, 0) {
        return Ok(x.clone());
    }
    let d = x.dims();
    let pd = Nhwc::new(
        d.batch,
        d.height + 2 * pad.0,
        d.width + 2 * pad.1,
        d.channels,
    );
    let mut out = BitPlaneTensor::zeros(pd)?;
    let wpp = x.words_per_pixel();
    let row = d.width * wpp;
    for n in 0..d.batch {
        for y in 0..d.height {
            let src = x.pixel_offset(n, y, 0);
            let dst = out.pixel_offset(n, y + pad.0, pad.1);
            out.words_mut()[dst..dst + row].copy_from_slice(&x.words()[src..src + row]);
        }
    }
    Ok(out)
}

fn check(x: Nhwc, k: &PackedKernelSet, spec: &ConvSpec) -> Result<Nhwc> {
    spec.output_dims(x, k.dims())
}

fn conv_packed<T: Send + Copy + Default>(
    x: &BitPlaneTensor,
    k: &PackedKernelSet,
    spec: &ConvSpec,
    convert: impl Fn(i64) -> T + Sync,
) -> Result<Tensor<T>> {
    let od = check(x.dims(), k, spec)?;
    let padded = pad_spatial(x, spec.pad)?;
    let pd = padded.dims();
    let geo = Geometry::new(pd.width, od.width, k, spec.stride);
    let mut out = vec![T::default(); od.element_count()?];
    let row_len = od.width * od.channels;
    let image_words = pd.height * pd.width * geo.wpp;
    out.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(r, dst)| {
            let (n, oy) = (r / od.height, r % od.height);
            let start = n * image_words + oy * spec.stride.0 * geo.row_words;
            geo.run(&padded.words()[start..], k, 1, |i, s| dst[i] = convert(s));
        });
    Tensor::from_vec(od, out)
}

/// Exact binary convolution: each output is the `±1` dot product over its
/// receptive field.
pub fn conv_i32(x: &BitPlaneTensor, k: &PackedKernelSet, spec: &ConvSpec) -> Result<I32FeatureMap> {
    conv_packed(x, k, spec, |s| s as i32)
}

/// Binary convolution saturated to `[-127, 127]` after exact accumulation.
pub fn conv_i8(x: &BitPlaneTensor, k: &PackedKernelSet, spec: &ConvSpec) -> Result<I8FeatureMap> {
    conv_packed(x, k, spec, clamp_i8).map(I8FeatureMap::from_trusted)
}

/// Binarize 8-bit features: per-channel threshold when given, else `x >= 0`.
pub fn binarize(x: &I8FeatureMap, thr: Option<&ThresholdParams>) -> Result<BitPlaneTensor> {
    let d = x.dims();
    if let Some(t) = thr {
        t.check_channels(d.channels)?;
    }
    let mut out = BitPlaneTensor::zeros(d)?;
    let wpp = out.words_per_pixel();
    for (px, dst) in x
        .data()
        .chunks_exact(d.channels)
        .zip(out.words_mut().chunks_exact_mut(wpp))
    {
        pack_pixel(px, thr, dst);
    }
    Ok(out)
}

#[inline]
fn pack_pixel(px: &[i8], thr: Option<&ThresholdParams>, dst: &mut [u64]) {
    for (wi, w) in dst.iter_mut().enumerate() {
        let lo = wi * WORD_BITS;
        let chunk = &px[lo..(lo + WORD_BITS).min(px.len())];
        *w = match thr {
            None => chunk
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | ((v >= 0) as u64) << i),
            Some(t) => chunk.iter().enumerate().fold(0u64, |acc, (i, &v)| {
                acc | (t.decide(lo + i, v as i32) as u64) << i
            }),
        };
    }
}

/// Staged reference for [`conv_fused`]: binarize, pad, then [`conv_i8`].
pub fn conv_staged(
    x_prev: &I8FeatureMap,
    thr: Option<&ThresholdParams>,
    k: &PackedKernelSet,
    spec: &ConvSpec,
) -> Result<I8FeatureMap> {
    let bits = binarize(x_prev, thr)?;
    let padded = pad_spatial(&bits, spec.pad)?;
    conv_i8(&padded, k, &ConvSpec::new(spec.stride, (0, 0)))
}

/// Fused binarize + pad + convolve, processed in tiles of output rows.
///
/// Each tile packs only the input rows its receptive fields touch into a
/// small padded slab, then runs the micro-kernel over it. The result is
/// identical to [`conv_staged`] for every tile size.
pub fn conv_fused(
    x_prev: &I8FeatureMap,
    thr: Option<&ThresholdParams>,
    k: &PackedKernelSet,
    spec: &ConvSpec,
    tile: TileHint,
) -> Result<I8FeatureMap> {
    let d = x_prev.dims();
    let od = check(d, k, spec)?;
    if let Some(t) = thr {
        t.check_channels(d.channels)?;
    }
    let kd = k.dims();
    let tile_rows = tile.output_rows(d, kd, spec, od.height);
    let padded_w = d.width + 2 * spec.pad.1;
    let geo = Geometry::new(padded_w, od.width, k, spec.stride);
    let tiles_per_image = od.height.div_ceil(tile_rows);
    let row_len = od.width * od.channels;
    let mut out = vec![0i8; od.element_count()?];

    // Chunks never straddle images: split per image, then per tile.
    let mut chunks: Vec<(usize, usize, &mut [i8])> = Vec::with_capacity(d.batch * tiles_per_image);
    for (n, img) in out.chunks_mut(od.height * row_len).enumerate() {
        for (t, c) in img.chunks_mut(tile_rows * row_len).enumerate() {
            chunks.push((n, t * tile_rows, c));
        }
    }
    chunks
        .into_par_iter()
        .for_each_init(Vec::new, |slab: &mut Vec<u64>, (n, oy0, dst)| {
            let rows = dst.len() / row_len;
            let in_rows = (rows - 1) * spec.stride.0 + kd.filter_h;
            slab.clear();
            slab.resize(in_rows * geo.row_words, 0);
            let y0 = (oy0 * spec.stride.0) as isize - spec.pad.0 as isize;
            for r in 0..in_rows {
                let y = y0 + r as isize;
                if y < 0 || y >= d.height as isize {
                    continue;
                }
                let row = &mut slab[r * geo.row_words..(r + 1) * geo.row_words];
                for xx in 0..d.width {
                    let src = &x_prev.data()[d.index(n, y as usize, xx, 0)..][..d.channels];
                    let at = (xx + spec.pad.1) * geo.wpp;
                    pack_pixel(src, thr, &mut row[at..at + geo.wpp]);
                }
            }
            geo.run(slab, k, rows, |i, s| dst[i] = clamp_i8(s));
        });
    Ok(I8FeatureMap::from_trusted(Tensor::from_vec(od, out)?))
}

/// Textbook dense convolution over `±1` integers, accumulated in `f32`.
///
/// Out-of-bounds taps read `-1`. Used as ground truth for the packed paths.
pub fn conv_float_oracle(
    a: &Tensor<i32>,
    w: &[i32],
    wdims: KernelDims,
    spec: &ConvSpec,
) -> Result<I32FeatureMap> {
    let d = a.dims();
    if w.len() != wdims.element_count()? {
        return Err(BitflowError::ShapeMismatch(format!(
            "{} weights for {:?}",
            w.len(),
            wdims
        )));
    }
    let od = spec.output_dims(d, wdims)?;
    let mut out = Vec::with_capacity(od.element_count()?);
    for n in 0..d.batch {
        for oy in 0..od.height {
            for ox in 0..od.width {
                for o in 0..wdims.out_channels {
                    let mut acc = 0f32;
                    for fy in 0..wdims.filter_h {
                        for fx in 0..wdims.filter_w {
                            let y = (oy * spec.stride.0 + fy) as isize - spec.pad.0 as isize;
                            let x = (ox * spec.stride.1 + fx) as isize - spec.pad.1 as isize;
                            let inside = y >= 0
                                && x >= 0
                                && (y as usize) < d.height
                                && (x as usize) < d.width;
                            for c in 0..d.channels {
                                let av = if inside {
                                    *a.at(n, y as usize, x as usize, c)
                                } else {
                                    -1
                                };
                                acc += (av * w[wdims.index(o, fy, fx, c)]) as f32;
                            }
                        }
                    }
                    out.push(acc as i32);
                }
            }
        }
    }
    Tensor::from_vec(od, out)
}
