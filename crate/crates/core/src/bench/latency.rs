//! Latency measurement of one binary convolution macro-block per config.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BenchConfig, LayerShape, Variant};
use crate::binconv::{
    binarize, conv_float_oracle, conv_fused, conv_i32, pad_spatial, ConvSpec, TileHint,
};
use crate::bitcore::PackedKernelSet;
use crate::bnquant::{Direction, ThresholdParams};
use crate::error::{BitflowError, Result};
use crate::netgraph::reference::RefConv;
use crate::tensor::{clamp_i8, I32FeatureMap, I8FeatureMap, Nhwc, Tensor};

pub const CSV_HEADER: &str = "config,variant,median_us,min_us,max_us,ratio";
/// Bumped whenever the CSV columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Seeded inputs of one macro-block: 8-bit features from the previous
/// layer, per-channel thresholds and packed kernels.
#[derive(Debug, Clone)]
pub struct Workload {
    pub input: I8FeatureMap,
    pub thresholds: ThresholdParams,
    pub kernel: PackedKernelSet,
    pub spec: ConvSpec,
    conv: RefConv,
}

impl Workload {
    pub fn generate(shape: &LayerShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let d = shape.input_dims();
        let data = (0..d.element_count()?)
            .map(|_| rng.gen_range(-127i8..=127))
            .collect();
        let input = I8FeatureMap::new(Tensor::from_vec(d, data)?)?;
        let c = shape.in_channels;
        let thresholds = ThresholdParams::new(
            (0..c).map(|_| rng.gen_range(-48i16..=48)).collect(),
            (0..c)
                .map(|_| {
                    if rng.gen() {
                        Direction::Ge
                    } else {
                        Direction::Le
                    }
                })
                .collect(),
        )?;
        let conv = RefConv::random(rng, shape.kernel_dims(), shape.spec());
        Ok(Self {
            input,
            thresholds,
            kernel: conv.packed()?,
            spec: shape.spec(),
            conv,
        })
    }

    pub fn run_fused(&self) -> Result<I8FeatureMap> {
        conv_fused(
            &self.input,
            Some(&self.thresholds),
            &self.kernel,
            &self.spec,
            TileHint::Auto,
        )
    }

    pub fn run_i32_staged(&self) -> Result<I32FeatureMap> {
        let bits = binarize(&self.input, Some(&self.thresholds))?;
        let padded = pad_spatial(&bits, self.spec.pad)?;
        conv_i32(
            &padded,
            &self.kernel,
            &ConvSpec::new(self.spec.stride, (0, 0)),
        )
    }

    pub fn run_float_reference(&self) -> Result<I32FeatureMap> {
        let c = self.input.dims().channels;
        let signs = self.input.tensor().map({
            let mut i = 0;
            move |&v| {
                let s = if self.thresholds.decide(i % c, v as i32) {
                    1
                } else {
                    -1
                };
                i += 1;
                s
            }
        });
        conv_float_oracle(&signs, &self.conv.weights, self.conv.dims, &self.spec)
    }

    fn run(&self, v: Variant) -> Result<()> {
        match v {
            Variant::I8Fused => {
                black_box(self.run_fused()?);
            }
            Variant::I32Staged => {
                black_box(self.run_i32_staged()?);
            }
            Variant::FloatReference => {
                black_box(self.run_float_reference()?);
            }
        }
        Ok(())
    }

    /// Check every listed variant against the 32-bit staged output: the
    /// fused path must equal its clamp, the dense reference must equal it.
    pub fn check_agreement(&self, variants: &[Variant]) -> Result<()> {
        let wide = self.run_i32_staged()?;
        let d = wide.dims();
        for &v in variants {
            let diff = match v {
                Variant::I32Staged => None,
                Variant::I8Fused => {
                    let clamped: Vec<i32> = wide
                        .data()
                        .iter()
                        .map(|&s| clamp_i8(s as i64) as i32)
                        .collect();
                    let got: Vec<i32> =
                        self.run_fused()?.data().iter().map(|&x| x as i32).collect();
                    first_diff(d, &got, &clamped)
                }
                Variant::FloatReference => {
                    first_diff(d, self.run_float_reference()?.data(), wide.data())
                }
            };
            if let Some(diff) = diff {
                return Err(BitflowError::Mismatch(format!("{v} vs i32-staged: {diff}")));
            }
        }
        Ok(())
    }
}

/// Count and first location of differing elements.
pub(crate) fn first_diff(d: Nhwc, got: &[i32], want: &[i32]) -> Option<String> {
    if got.len() != want.len() {
        return Some(format!("length {} vs {}", got.len(), want.len()));
    }
    let mut bad = got
        .iter()
        .zip(want)
        .enumerate()
        .filter(|(_, (a, b))| a != b);
    let (i, (a, b)) = bad.next()?;
    let count = 1 + bad.count();
    let c = i % d.channels;
    let x = i / d.channels % d.width;
    let y = i / (d.channels * d.width) % d.height;
    let n = i / (d.channels * d.width * d.height);
    Some(format!(
        "{count} of {} elements differ, first at (n={n}, y={y}, x={x}, c={c}): got {a}, expected {b}",
        got.len()
    ))
}

/// Median, min and max in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub median_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

impl Timing {
    /// Summarize non-empty samples.
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(!samples.is_empty(), "no timing samples");
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        let median_us = if s.len() % 2 == 1 {
            s[m]
        } else {
            (s[m - 1] + s[m]) / 2.0
        };
        Self {
            median_us,
            min_us: s[0],
            max_us: s[s.len() - 1],
        }
    }
}

/// Round-robin over `variants` so drift in machine state hits all of them alike.
fn measure(
    w: &Workload,
    variants: &[Variant],
    warmup: usize,
    repeats: usize,
) -> Result<Vec<Timing>> {
    for _ in 0..warmup {
        for &v in variants {
            w.run(v)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(repeats); variants.len()];
    for _ in 0..repeats {
        for (&v, s) in variants.iter().zip(&mut samples) {
            let t = Instant::now();
            w.run(v)?;
            s.push(t.elapsed().as_secs_f64() * 1e6);
        }
    }
    Ok(samples.iter().map(|s| Timing::from_samples(s)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub variant: Variant,
    pub timing: Timing,
    /// Baseline median over this row's median; above 1 means faster.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.3},{:.3},{:.3},{:.4}",
                r.config, r.variant, r.timing.median_us, r.timing.min_us, r.timing.max_us, r.ratio
            )?;
        }
        Ok(())
    }

    pub fn row(&self, config: &str, variant: Variant) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.variant == variant)
    }

    /// `(wins, compared)`: configs where `a`'s median is at most `b`'s.
    pub fn median_wins(&self, a: Variant, b: Variant) -> (usize, usize) {
        let mut wins = 0;
        let mut compared = 0;
        for r in self.rows.iter().filter(|r| r.variant == a) {
            if let Some(o) = self.row(&r.config, b) {
                compared += 1;
                wins += (r.timing.median_us <= o.timing.median_us) as usize;
            }
        }
        (wins, compared)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wid = self
            .rows
            .iter()
            .map(|r| r.config.len())
            .max()
            .unwrap_or(6)
            .max(6);
        writeln!(
            f,
            "{:<wid$}  {:<15}  {:>12}  {:>12}  {:>12}  {:>7}",
            "config", "variant", "median_us", "min_us", "max_us", "ratio"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<wid$}  {:<15}  {:>12.1}  {:>12.1}  {:>12.1}  {:>6.2}x",
                r.config,
                r.variant.as_str(),
                r.timing.median_us,
                r.timing.min_us,
                r.timing.max_us,
                r.ratio
            )?;
        }
        Ok(())
    }
}

/// Benchmark every config. Outputs of all variants are checked for agreement
/// before anything is timed; a mismatch aborts the whole run.
///
/// Config `i` draws its workload from stream `i` of a ChaCha generator keyed
/// by `seed`. Ratios are relative to `i32-staged` when it is listed,
/// otherwise to the first variant.
pub fn cmd_bench(configs: &[BenchConfig], seed: u64) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for (i, c) in configs.iter().enumerate() {
        c.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let w = Workload::generate(&c.shape, &mut rng)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(c.threads)
            .build()
            .map_err(|e| BitflowError::Config(format!("{}: thread pool: {e}", c.id)))?;
        let timings = pool.install(|| -> Result<Vec<Timing>> {
            w.check_agreement(&c.variants)
                .map_err(|e| BitflowError::Mismatch(format!("config {}: {e}", c.id)))?;
            measure(&w, &c.variants, c.warmup, c.repeats)
        })?;
        let base = c
            .variants
            .iter()
            .position(|&v| v == Variant::I32Staged)
            .unwrap_or(0);
        let base_median = timings[base].median_us;
        for (&variant, timing) in c.variants.iter().zip(timings) {
            info!("{} {}: median {:.1} us", c.id, variant, timing.median_us);
            report.rows.push(BenchRow {
                config: c.id.clone(),
                variant,
                timing,
                ratio: base_median / timing.median_us,
            });
        }
    }
    Ok(report)
}
