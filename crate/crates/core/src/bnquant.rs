//! Batch-Norm arithmetic for binary layers.
//!
//! Three forms of the same per-channel affine map `γ(x − μ)/σ + β`:
//!
//! * [`bn_float`], the real-valued reference;
//! * [`ThresholdParams`], for blocks whose output is immediately binarized.
//!   `sign(BN(x))` collapses to one integer comparison per channel;
//! * [`QbnParams`], a symmetric 16-bit Q-format version for blocks whose
//!   output feeds an addition. Inference runs a folded multiply-add
//!   `m·x + c` in fixed point with 8-bit input and output.
//!
//! Rounding is half away from zero everywhere.

use log::warn;
use rand::Rng;

use crate::bitcore::BitPlaneTensor;
use crate::error::{BitflowError, Result};
use crate::tensor::{clamp_i8, I8FeatureMap, Tensor};
use crate::wire::{Reader, Writer};

/// Per-channel Batch-Norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl BnParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let p = Self {
            gamma,
            beta,
            mu,
            sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if c == 0 {
            return Err(BitflowError::EmptyInput);
        }
        if self.beta.len() != c || self.mu.len() != c || self.sigma.len() != c {
            return Err(BitflowError::ShapeMismatch(
                "BN parameter vectors differ in length".into(),
            ));
        }
        if self.vars().iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(BitflowError::InvalidParameter(
                "non-finite BN parameter".into(),
            ));
        }
        if let Some(ch) = self.sigma.iter().position(|&s| s <= 0.0) {
            return Err(BitflowError::InvalidParameter(format!(
                "sigma <= 0 on channel {ch}"
            )));
        }
        Ok(())
    }

    /// `γ = σ = 1`, `μ = β = 0`.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    /// Random parameters: `σ ∈ [0.01, 10]`, `γ ∈ [−10, 10] \ {0}`, `μ, β ∈ [−20, 20]`.
    pub fn random(rng: &mut impl Rng, channels: usize) -> Self {
        let mut p = Self::identity(channels);
        for c in 0..channels {
            let g: f64 = rng.gen_range(0.001..10.0);
            p.gamma[c] = if rng.gen() { g } else { -g };
            p.sigma[c] = rng.gen_range(0.01..=10.0);
            p.mu[c] = rng.gen_range(-20.0..=20.0);
            p.beta[c] = rng.gen_range(-20.0..=20.0);
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// The four variables in `(γ, β, μ, σ)` order.
    pub fn vars(&self) -> [&[f64]; 4] {
        [&self.gamma, &self.beta, &self.mu, &self.sigma]
    }
}

/// `γ(x − μ)/σ + β` for one channel.
#[inline]
pub fn bn_float(x: f64, p: &BnParams, channel: usize) -> f64 {
    p.gamma[channel] * (x - p.mu[channel]) / p.sigma[channel] + p.beta[channel]
}

/// Comparison direction of a threshold channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `+1` iff `x >= τ` (γ/σ ≥ 0).
    Ge,
    /// `+1` iff `x <= τ` (γ/σ < 0).
    Le,
}

/// Per-channel integer thresholds replacing `sign(BN(x))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdParams {
    tau: Vec<i16>,
    direction: Vec<Direction>,
}

pub const TAU_MIN: i16 = -128;
pub const TAU_MAX: i16 = 128;

impl ThresholdParams {
    pub fn new(tau: Vec<i16>, direction: Vec<Direction>) -> Result<Self> {
        if tau.is_empty() {
            return Err(BitflowError::EmptyInput);
        }
        if tau.len() != direction.len() {
            return Err(BitflowError::ShapeMismatch("tau/direction length".into()));
        }
        if let Some(t) = tau.iter().find(|t| !(TAU_MIN..=TAU_MAX).contains(*t)) {
            return Err(BitflowError::InvalidParameter(format!(
                "threshold {t} outside [-128, 128]"
            )));
        }
        Ok(Self { tau, direction })
    }

    pub fn channels(&self) -> usize {
        self.tau.len()
    }

    pub fn tau(&self) -> &[i16] {
        &self.tau
    }

    pub fn direction(&self) -> &[Direction] {
        &self.direction
    }

    /// Binary decision for integer input `x` on `channel`; `true` is `+1`.
    #[inline]
    pub fn decide(&self, channel: usize, x: i32) -> bool {
        let t = self.tau[channel] as i32;
        match self.direction[channel] {
            Direction::Ge => x >= t,
            Direction::Le => x <= t,
        }
    }

    /// The fixed output of a channel that ignores its input over `[-127, 127]`.
    pub fn constant_value(&self, channel: usize) -> Option<bool> {
        let lo = self.decide(channel, -127);
        (lo == self.decide(channel, 127)).then_some(lo)
    }

    pub fn constant_channels(&self) -> Vec<usize> {
        (0..self.channels())
            .filter(|&c| self.constant_value(c).is_some())
            .collect()
    }

    pub(crate) fn check_channels(&self, channels: usize) -> Result<()> {
        if self.channels() != channels {
            return Err(BitflowError::ShapeMismatch(format!(
                "threshold has {} channels, input has {channels}",
                self.channels()
            )));
        }
        Ok(())
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) {
        for (&t, d) in self.tau.iter().zip(&self.direction) {
            out.put_i16(t);
            out.put_u8(match d {
                Direction::Ge => 0,
                Direction::Le => 1,
            });
        }
    }

    pub(crate) fn read_from(r: &mut Reader<'_>, channels: usize) -> Result<Self> {
        let mut tau = Vec::with_capacity(channels);
        let mut direction = Vec::with_capacity(channels);
        for _ in 0..channels {
            tau.push(r.i16()?);
            direction.push(match r.u8()? {
                0 => Direction::Ge,
                1 => Direction::Le,
                d => return Err(BitflowError::Corrupt(format!("threshold direction {d}"))),
            });
        }
        Self::new(tau, direction)
    }
}

/// Thresholds plus the channels that needed special handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdReport {
    pub params: ThresholdParams,
    /// Channels with `γ = 0`, mapped to a constant output.
    pub zero_gamma: Vec<usize>,
    /// Channels whose decision is constant over `[-127, 127]`.
    pub constant: Vec<usize>,
}

/// Reduce BN + sign to integer thresholds `τ = μ − βσ/γ`.
///
/// `Ge` channels use `ceil(τ)`, `Le` channels `floor(τ)`, clamped to
/// `[-128, 128]`. The integer is then checked against [`bn_float`] at the
/// decision boundary so that, for every integer `x ∈ [-127, 127]`, the
/// comparison reproduces `sign(bn_float(x))` (with `sign(0) = +1`) exactly,
/// even when `τ` lands within floating-point error of an integer.
pub fn compute_threshold(p: &BnParams) -> Result<ThresholdReport> {
    p.validate()?;
    let n = p.channels();
    let mut tau = Vec::with_capacity(n);
    let mut direction = Vec::with_capacity(n);
    let mut zero_gamma = Vec::new();
    for c in 0..n {
        let pos = |x: i32| bn_float(x as f64, p, c) >= 0.0;
        let (g, b, m, s) = (p.gamma[c], p.beta[c], p.mu[c], p.sigma[c]);
        if g == 0.0 {
            zero_gamma.push(c);
            direction.push(Direction::Ge);
            tau.push(if b >= 0.0 { TAU_MIN } else { TAU_MAX });
            continue;
        }
        let real = m - b * s / g;
        let clamp = |v: f64| v.clamp(TAU_MIN as f64, TAU_MAX as f64) as i32;
        if g / s >= 0.0 {
            // smallest x with bn(x) >= 0
            let mut t = clamp(real.ceil());
            while t > -127 && pos(t - 1) {
                t -= 1;
            }
            while t <= 127 && !pos(t) {
                t += 1;
            }
            direction.push(Direction::Ge);
            tau.push(t as i16);
        } else {
            // largest x with bn(x) >= 0
            let mut t = clamp(real.floor());
            while t < 127 && pos(t + 1) {
                t += 1;
            }
            while t >= -127 && !pos(t) {
                t -= 1;
            }
            direction.push(Direction::Le);
            tau.push(t as i16);
        }
    }
    let params = ThresholdParams::new(tau, direction)?;
    let constant = params.constant_channels();
    if !zero_gamma.is_empty() {
        warn!("gamma = 0 on channels {zero_gamma:?}; emitting constant outputs");
    }
    Ok(ThresholdReport {
        params,
        zero_gamma,
        constant,
    })
}

/// Binarize 8-bit features with per-channel thresholds.
pub fn apply_threshold(x: &I8FeatureMap, t: &ThresholdParams) -> Result<BitPlaneTensor> {
    crate::binconv::binarize(x, Some(t))
}

/// Symmetric signed 16-bit fixed-point format: 1 sign bit, `range_bits`
/// integer bits and `15 − range_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QFormat {
    range_bits: u8,
}

impl QFormat {
    pub fn new(range_bits: u8) -> Result<Self> {
        if range_bits > 15 {
            return Err(BitflowError::InvalidParameter(format!(
                "range_bits {range_bits} > 15"
            )));
        }
        Ok(Self { range_bits })
    }

    pub fn from_frac_bits(frac_bits: u8) -> Result<Self> {
        if frac_bits > 15 {
            return Err(BitflowError::Corrupt(format!("frac_bits {frac_bits} > 15")));
        }
        Self::new(15 - frac_bits)
    }

    pub fn range_bits(&self) -> u8 {
        self.range_bits
    }

    pub fn frac_bits(&self) -> u8 {
        15 - self.range_bits
    }

    pub fn scale(&self) -> f64 {
        (1u32 << self.frac_bits()) as f64
    }

    /// Quantization step `2^(−frac_bits)`.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    /// `round(2^F · w)`, failing if it leaves the signed 16-bit range.
    pub fn quantize(&self, w: f64) -> Result<i16> {
        let q = (w * self.scale()).round();
        if q < i16::MIN as f64 || q > i16::MAX as f64 || !q.is_finite() {
            return Err(BitflowError::QuantOverflow(w));
        }
        Ok(q as i16)
    }

    pub fn dequantize(&self, q: i16) -> f64 {
        q as f64 / self.scale()
    }

    fn widen(self) -> Option<Self> {
        (self.range_bits < 15).then(|| Self {
            range_bits: self.range_bits + 1,
        })
    }
}

/// Integer bits needed for a magnitude: `clip(ceil(log2(max_abs)), 0, 15)`.
pub fn range_bits_for(max_abs: f64) -> u8 {
    if max_abs <= 0.0 {
        return 0;
    }
    max_abs.log2().ceil().clamp(0.0, 15.0) as u8
}

/// Shared layer format: range bits fitted per variable, then the maximum.
pub fn qformat_fit(vars: &[&[f64]]) -> Result<QFormat> {
    if vars.is_empty() || vars.iter().all(|v| v.is_empty()) {
        return Err(BitflowError::EmptyInput);
    }
    let mut range = 0;
    for v in vars {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(BitflowError::InvalidParameter("non-finite value".into()));
        }
        let max_abs = v.iter().fold(0f64, |m, x| m.max(x.abs()));
        range = range.max(range_bits_for(max_abs));
    }
    QFormat::new(range)
}

/// Quantize every variable with one format, widening on boundary overflow.
fn quantize_vars(fmt: QFormat, vars: &[&[f64]]) -> Result<(QFormat, Vec<Vec<i16>>)> {
    let mut fmt = fmt;
    loop {
        let attempt: Result<Vec<Vec<i16>>> = vars
            .iter()
            .map(|v| v.iter().map(|&w| fmt.quantize(w)).collect())
            .collect();
        match attempt {
            Ok(q) => return Ok((fmt, q)),
            Err(e @ BitflowError::QuantOverflow(_)) => match fmt.widen() {
                Some(f) => fmt = f,
                None => return Err(e),
            },
            Err(e) => return Err(e),
        }
    }
}

/// 16-bit Q-format Batch-Norm tables plus the folded deployment pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QbnParams {
    pub format: QFormat,
    pub gamma: Vec<i16>,
    pub beta: Vec<i16>,
    pub mu: Vec<i16>,
    pub sigma: Vec<i16>,
    /// Format shared by `m` and `c`.
    pub fold_format: QFormat,
    /// Folded multiplier `γ_q / σ_q`.
    pub m: Vec<i16>,
    /// Folded bias `β_q − γ_q μ_q / σ_q`.
    pub c: Vec<i16>,
}

/// Output of [`quantize_bn`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBn {
    pub tables: QbnParams,
    /// Float parameters with quantization noise injected (`round(2^F·w)/2^F`),
    /// for the retraining loop.
    pub noisy: BnParams,
}

/// Quantize BN parameters to a shared 16-bit Q-format and fold them.
pub fn quantize_bn(p: &BnParams) -> Result<QuantizedBn> {
    p.validate()?;
    let (format, q) = quantize_vars(qformat_fit(&p.vars())?, &p.vars())?;
    let [gamma, beta, mu, mut sigma]: [Vec<i16>; 4] = q.try_into().expect("four variables");
    for s in sigma.iter_mut() {
        // sigma below half an LSB would round to zero
        *s = (*s).max(1);
    }
    let deq = |v: &[i16]| v.iter().map(|&x| format.dequantize(x)).collect::<Vec<_>>();
    let noisy = BnParams::new(deq(&gamma), deq(&beta), deq(&mu), deq(&sigma))?;
    let (m, c) = fold(&noisy);
    let (fold_format, fq) = quantize_vars(qformat_fit(&[&m, &c])?, &[&m, &c])?;
    let [m, c]: [Vec<i16>; 2] = fq.try_into().expect("two variables");
    Ok(QuantizedBn {
        tables: QbnParams {
            format,
            gamma,
            beta,
            mu,
            sigma,
            fold_format,
            m,
            c,
        },
        noisy,
    })
}

/// Real-valued folded pair `(γ/σ, β − γμ/σ)` per channel.
pub fn fold(p: &BnParams) -> (Vec<f64>, Vec<f64>) {
    (0..p.channels())
        .map(|i| {
            let m = p.gamma[i] / p.sigma[i];
            (m, p.beta[i] - m * p.mu[i])
        })
        .unzip()
}

/// Arithmetic shift right by `bits`, rounding half away from zero.
#[inline]
fn round_shift(acc: i32, bits: u8) -> i32 {
    if bits == 0 {
        return acc;
    }
    let half = 1i32 << (bits - 1);
    if acc >= 0 {
        (acc + half) >> bits
    } else {
        -((-acc + half) >> bits)
    }
}

impl QbnParams {
    pub fn channels(&self) -> usize {
        self.m.len()
    }

    /// Fixed-point `round(m·x + c)` for one channel, saturated to `[-127, 127]`.
    ///
    /// `m·x` is an `i16 × i8` product and `c` is already at the fold scale,
    /// so the sum is exact in 32 bits before the single rounding shift.
    #[inline]
    pub fn apply(&self, channel: usize, x: i8) -> i8 {
        let acc = self.m[channel] as i32 * x as i32 + self.c[channel] as i32;
        clamp_i8(round_shift(acc, self.fold_format.frac_bits()) as i64)
    }

    /// Dequantized folded pair of one channel.
    pub fn folded(&self, channel: usize) -> (f64, f64) {
        (
            self.fold_format.dequantize(self.m[channel]),
            self.fold_format.dequantize(self.c[channel]),
        )
    }

    /// The Q-format BN variables as floats.
    pub fn dequantized(&self) -> BnParams {
        let deq = |v: &[i16]| v.iter().map(|&x| self.format.dequantize(x)).collect();
        BnParams {
            gamma: deq(&self.gamma),
            beta: deq(&self.beta),
            mu: deq(&self.mu),
            sigma: deq(&self.sigma),
        }
    }

    /// Layout: `frac_bits` (u8), fold `frac_bits` (u8), then per channel six
    /// little-endian i16 in `(γ, β, μ, σ, m, c)` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + 12 * self.channels());
        self.write_to(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8], channels: usize) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let q = Self::read_from(&mut r, channels)?;
        if !r.is_empty() {
            return Err(BitflowError::Corrupt(
                "trailing bytes after BN table".into(),
            ));
        }
        Ok(q)
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) {
        out.put_u8(self.format.frac_bits());
        out.put_u8(self.fold_format.frac_bits());
        for i in 0..self.channels() {
            for v in [
                self.gamma[i],
                self.beta[i],
                self.mu[i],
                self.sigma[i],
                self.m[i],
                self.c[i],
            ] {
                out.put_i16(v);
            }
        }
    }

    pub(crate) fn read_from(r: &mut Reader<'_>, channels: usize) -> Result<Self> {
        let format = QFormat::from_frac_bits(r.u8()?)?;
        let fold_format = QFormat::from_frac_bits(r.u8()?)?;
        let mut cols: [Vec<i16>; 6] = Default::default();
        for _ in 0..channels {
            for col in cols.iter_mut() {
                col.push(r.i16()?);
            }
        }
        let [gamma, beta, mu, sigma, m, c] = cols;
        if sigma.iter().any(|&s| s <= 0) {
            return Err(BitflowError::Corrupt("non-positive quantized sigma".into()));
        }
        Ok(Self {
            format,
            gamma,
            beta,
            mu,
            sigma,
            fold_format,
            m,
            c,
        })
    }
}

/// Apply quantized BN to an 8-bit feature map.
pub fn bn_q_forward(x: &I8FeatureMap, q: &QbnParams) -> Result<I8FeatureMap> {
    let d = x.dims();
    if d.channels != q.channels() {
        return Err(BitflowError::ShapeMismatch(format!(
            "BN table has {} channels, input has {}",
            q.channels(),
            d.channels
        )));
    }
    let data = x
        .data()
        .chunks_exact(d.channels)
        .flat_map(|px| px.iter().enumerate().map(|(c, &v)| q.apply(c, v)))
        .collect();
    Ok(I8FeatureMap::from_trusted(Tensor::from_vec(d, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Nhwc;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one(g: f64, b: f64, m: f64, s: f64) -> BnParams {
        BnParams::new(vec![g], vec![b], vec![m], vec![s]).unwrap()
    }

    #[test]
    fn bn_float_examples() {
        assert_eq!(bn_float(5.0, &BnParams::identity(1), 0), 5.0);
        assert_eq!(bn_float(1.0, &one(2.0, 1.0, 3.0, 4.0), 0), 0.0);
        assert_eq!(bn_float(3.0, &one(2.0, 1.0, 3.0, 4.0), 0), 1.0);
    }

    #[test]
    fn threshold_examples() {
        let t = compute_threshold(&BnParams::identity(1)).unwrap().params;
        assert_eq!((t.tau()[0], t.direction()[0]), (0, Direction::Ge));
        assert!(t.decide(0, 0) && !t.decide(0, -1));

        let t = compute_threshold(&one(2.0, 1.0, 3.0, 4.0)).unwrap().params;
        assert_eq!((t.tau()[0], t.direction()[0]), (1, Direction::Ge));
        assert!(t.decide(0, 5));
        assert!(!t.decide(0, 0));

        let t = compute_threshold(&one(-1.0, 0.0, 0.0, 2.0)).unwrap().params;
        assert_eq!((t.tau()[0], t.direction()[0]), (0, Direction::Le));
        assert!(t.decide(0, 0) && t.decide(0, -5) && !t.decide(0, 1));
    }

    #[test]
    fn zero_gamma_is_constant_and_reported() {
        let p = BnParams::new(
            vec![0.0, 0.0, 1.0],
            vec![0.5, -0.5, 0.0],
            vec![0.0; 3],
            vec![1.0; 3],
        )
        .unwrap();
        let r = compute_threshold(&p).unwrap();
        assert_eq!(r.zero_gamma, vec![0, 1]);
        assert_eq!(r.params.constant_value(0), Some(true));
        assert_eq!(r.params.constant_value(1), Some(false));
        assert_eq!(r.params.constant_value(2), None);
        assert_eq!(r.constant, vec![0, 1]);
    }

    #[test]
    fn extreme_tau_saturates() {
        let r = compute_threshold(&one(1.0, -1000.0, 0.0, 1.0)).unwrap();
        assert_eq!(r.params.tau()[0], TAU_MAX);
        assert_eq!(r.params.constant_value(0), Some(false));
    }

    #[test]
    fn invalid_params() {
        assert!(BnParams::new(vec![1.0], vec![0.0], vec![0.0], vec![0.0]).is_err());
        assert!(BnParams::new(vec![f64::NAN], vec![0.0], vec![0.0], vec![1.0]).is_err());
        assert!(BnParams::new(vec![1.0, 2.0], vec![0.0], vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn threshold_exhaustive_against_float_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = BnParams::random(&mut rng, 4);
            let t = compute_threshold(&p).unwrap().params;
            for c in 0..4 {
                for x in -127..=127 {
                    assert_eq!(t.decide(c, x), bn_float(x as f64, &p, c) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn threshold_exact_at_integer_boundaries() {
        // tau lands on an integer up to floating-point error
        for (g, b, m, s) in [
            (3.0, 0.1, 0.1 * 7.0, 3.0),
            (0.1, 0.3, 3.0, 0.1),
            (-0.7, 2.1, -1.0, 0.7),
        ] {
            let p = one(g, b, m, s);
            let t = compute_threshold(&p).unwrap().params;
            for x in -127..=127 {
                assert_eq!(
                    t.decide(0, x),
                    bn_float(x as f64, &p, 0) >= 0.0,
                    "x={x} {g} {b} {m} {s}"
                );
            }
        }
    }

    #[test]
    fn apply_threshold_matches_decide() {
        let x = I8FeatureMap::new(Tensor::from_vec(Nhwc::new(1, 1, 2, 1), vec![5, 0]).unwrap())
            .unwrap();
        let t = compute_threshold(&one(2.0, 1.0, 3.0, 4.0)).unwrap().params;
        let b = apply_threshold(&x, &t).unwrap();
        assert!(b.bit(0, 0, 0, 0));
        assert!(!b.bit(0, 0, 1, 0));
    }

    #[test]
    fn qformat_fit_examples() {
        let f = qformat_fit(&[&[3.7, -1.0]]).unwrap();
        assert_eq!((f.range_bits(), f.frac_bits()), (2, 13));
        let f = qformat_fit(&[&[0.4]]).unwrap();
        assert_eq!((f.range_bits(), f.frac_bits()), (0, 15));
        let f = qformat_fit(&[&[-40000.0]]).unwrap();
        assert_eq!((f.range_bits(), f.frac_bits()), (15, 0));
        // layer format is the max over variables
        let f = qformat_fit(&[&[0.4], &[5.0], &[1.0]]).unwrap();
        assert_eq!(f.range_bits(), 3);
        assert!(matches!(qformat_fit(&[]), Err(BitflowError::EmptyInput)));
        assert!(matches!(qformat_fit(&[&[]]), Err(BitflowError::EmptyInput)));
    }

    #[test]
    fn quantize_examples() {
        let f = QFormat::new(2).unwrap();
        assert_eq!(f.quantize(1.0).unwrap(), 8192);
        for rb in 0..=15 {
            assert_eq!(QFormat::new(rb).unwrap().quantize(0.0).unwrap(), 0);
        }
    }

    #[test]
    fn boundary_overflow_refits() {
        // 4.0 needs ceil(log2 4) = 2 range bits but 4 * 2^13 = 32768 overflows
        let p = BnParams::new(vec![4.0], vec![0.0], vec![0.0], vec![1.0]).unwrap();
        let q = quantize_bn(&p).unwrap();
        assert_eq!(q.tables.format.range_bits(), 3);
        assert_eq!(q.noisy.gamma[0], 4.0);
    }

    #[test]
    fn folded_forward_examples() {
        let mk = |m: f64, c: f64| {
            let (f, q) = quantize_vars(qformat_fit(&[&[m], &[c]]).unwrap(), &[&[m], &[c]]).unwrap();
            QbnParams {
                format: f,
                gamma: vec![0],
                beta: vec![0],
                mu: vec![0],
                sigma: vec![1],
                fold_format: f,
                m: q[0].clone(),
                c: q[1].clone(),
            }
        };
        let id = mk(1.0, 0.0);
        assert_eq!(id.apply(0, 37), 37);
        assert_eq!(id.apply(0, -127), -127);
        assert_eq!(mk(0.5, 0.0).apply(0, 100), 50);
        assert_eq!(mk(0.5, 0.0).apply(0, -3), -2);
        assert_eq!(mk(1.0, 100.0).apply(0, 100), 127);
        assert_eq!(mk(1.0, -100.0).apply(0, -100), -127);
    }

    #[test]
    fn table_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = quantize_bn(&BnParams::random(&mut rng, 5)).unwrap().tables;
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), 2 + 12 * 5);
        assert_eq!(bytes[0], q.format.frac_bits());
        assert_eq!(QbnParams::from_bytes(&bytes, 5).unwrap(), q);
        assert!(QbnParams::from_bytes(&bytes[..bytes.len() - 1], 5).is_err());
        let x = I8FeatureMap::new(Tensor::filled(Nhwc::new(1, 1, 1, 4), 3).unwrap()).unwrap();
        assert!(bn_q_forward(&x, &q).is_err());
    }

    fn check_quant_error(p: &BnParams) -> std::result::Result<(), TestCaseError> {
        let q = quantize_bn(p).unwrap();
        let f = q.tables.format;
        let half = f.resolution() / 2.0;
        for (orig, noisy) in p.vars().iter().zip(q.noisy.vars()) {
            for (&w, &wq) in orig.iter().zip(noisy) {
                // sigma may be lifted to one LSB when it rounds to zero
                if wq != f.resolution() || w >= half {
                    prop_assert!(
                        (w - wq).abs() <= half + 1e-12,
                        "w={w} wq={wq} F={}",
                        f.frac_bits()
                    );
                }
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn quant_error_within_half_lsb(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            check_quant_error(&BnParams::random(&mut rng, 8))?;
        }

        #[test]
        fn folded_forward_within_bound_and_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = BnParams::random(&mut rng, 4);
            let q = quantize_bn(&p).unwrap().tables;
            let (m_true, c_true) = fold(&p);
            for ch in 0..4 {
                let (mq, cq) = q.folded(ch);
                let (em, ec) = ((mq - m_true[ch]).abs(), (cq - c_true[ch]).abs());
                let mut prev = q.apply(ch, -127);
                for x in -127i8..=127 {
                    let y = q.apply(ch, x) as f64;
                    let r = bn_float(x as f64, &p, ch).clamp(-127.0, 127.0);
                    let bound = (x as f64).abs() * em + ec + 0.5;
                    prop_assert!((y - r).abs() <= bound + 1e-9, "ch {ch} x {x}: {y} vs {r}, bound {bound}");
                    let cur = q.apply(ch, x);
                    if q.m[ch] >= 0 { prop_assert!(cur >= prev) } else { prop_assert!(cur <= prev) }
                    prev = cur;
                }
            }
        }
    }
}
