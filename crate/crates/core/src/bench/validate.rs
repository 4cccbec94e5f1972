//! Randomized oracle-equivalence sweeps over the packed kernels, the BN
//! reductions and the block pipeline.

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::latency::first_diff;
use crate::binconv::{
    conv_float_oracle, conv_fused, conv_i32, conv_i8, conv_staged, ConvSpec, TileHint,
};
use crate::bitcore::pack_pm1;
use crate::bnquant::{
    bn_float, compute_threshold, fold, quantize_bn, BnParams, Direction, QbnParams, ThresholdParams,
};
use crate::error::{BitflowError, Result};
use crate::netgraph::reference::{vgg_model, vgg_trace, RefConv, RefVggLayer};
use crate::netgraph::{convert_model, run_model, ConvertMode, Model};
use crate::tensor::{clamp_i8, I8FeatureMap, KernelDims, Nhwc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sizes {
    /// A few seconds; smaller channel counts and fewer cases.
    Tiny,
    #[default]
    Full,
}

impl FromStr for Sizes {
    type Err = BitflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Sizes::Tiny),
            "full" => Ok(Sizes::Full),
            _ => Err(BitflowError::Config(format!(
                "unknown size {s:?} (tiny | full)"
            ))),
        }
    }
}

struct Budget {
    conv_configs: usize,
    max_channels: usize,
    fused_configs: usize,
    bn_sets: usize,
    qbn_sets: usize,
    models: usize,
}

impl Sizes {
    fn budget(self) -> Budget {
        match self {
            Sizes::Tiny => Budget {
                conv_configs: 150,
                max_channels: 96,
                fused_configs: 40,
                bn_sets: 1000,
                qbn_sets: 200,
                models: 20,
            },
            Sizes::Full => Budget {
                conv_configs: 1000,
                max_channels: 256,
                fused_configs: 200,
                bn_sets: 10_000,
                qbn_sets: 2000,
                models: 100,
            },
        }
    }
}

/// Tile sizes every fused case is run with.
pub const FUSED_TILES: [TileHint; 5] = [
    TileHint::Rows(1),
    TileHint::Rows(2),
    TileHint::Rows(3),
    TileHint::WholeImage,
    TileHint::Auto,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidateOptions {
    pub sizes: Sizes,
    pub seed: u64,
    /// Added to every packed kernel's pad correction in the conv sweep.
    /// Non-zero values simulate a broken build.
    pub pad_correction_fault: i64,
}

impl ValidateOptions {
    pub fn new(sizes: Sizes, seed: u64) -> Self {
        Self {
            sizes,
            seed,
            pad_correction_fault: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checked: usize,
    pub failed: usize,
    pub first_failure: Option<String>,
}

impl SuiteResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checked: 0,
            failed: 0,
            first_failure: None,
        }
    }

    fn record(&mut self, failure: Option<String>) {
        self.checked += 1;
        if let Some(f) = failure {
            self.failed += 1;
            self.first_failure.get_or_insert(f);
        }
    }

    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidateReport {
    pub suites: Vec<SuiteResult>,
}

impl ValidateReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }

    /// First failure of the first failing suite.
    pub fn first_failure(&self) -> Option<String> {
        self.suites
            .iter()
            .find_map(|s| s.first_failure.as_ref().map(|f| format!("{}: {f}", s.name)))
    }
}

impl fmt::Display for ValidateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let status = if s.passed() { "PASS" } else { "FAIL" };
            writeln!(
                f,
                "{status} {:<12} {} checked, {} failed",
                s.name, s.checked, s.failed
            )?;
            if let Some(first) = &s.first_failure {
                writeln!(f, "     first failure: {first}")?;
            }
        }
        write!(
            f,
            "{}",
            if self.passed() {
                "all suites passed"
            } else {
                "validation FAILED"
            }
        )
    }
}

/// Run every suite. Mismatches are reported, not returned as errors.
pub fn cmd_validate(opts: &ValidateOptions) -> Result<ValidateReport> {
    let b = opts.sizes.budget();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (exact, clamp) = conv_sweep(&mut rng, &b, opts.pad_correction_fault)?;
    let suites = vec![
        exact,
        clamp,
        fused_sweep(&mut rng, &b)?,
        threshold_sweep(&mut rng, &b)?,
        qformat_sweep(&mut rng, &b)?,
        netgraph_sweep(&mut rng, &b)?,
    ];
    for s in &suites {
        info!("{}: {} checked, {} failed", s.name, s.checked, s.failed);
    }
    Ok(ValidateReport { suites })
}

/// A random valid convolution: `H, W ≤ 16`, filters 1/3/5, stride ≤ 2.
#[derive(Debug, Clone, Copy)]
struct ConvCase {
    input: Nhwc,
    kernel: KernelDims,
    spec: ConvSpec,
}

impl fmt::Display for ConvCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (d, k) = (self.input, self.kernel);
        write!(
            f,
            "input {}x{}x{}x{}, kernel {}x{}x{}x{}, stride {:?}, pad {:?}",
            d.batch,
            d.height,
            d.width,
            d.channels,
            k.out_channels,
            k.filter_h,
            k.filter_w,
            k.in_channels,
            self.spec.stride,
            self.spec.pad
        )
    }
}

fn random_case(rng: &mut impl Rng, max_channels: usize) -> ConvCase {
    loop {
        let c = rng.gen_range(1..=max_channels);
        let input = Nhwc::new(
            rng.gen_range(1..=2),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            c,
        );
        let fh = [1, 3, 5][rng.gen_range(0..3)];
        let fw = if rng.gen_bool(0.8) {
            fh
        } else {
            [1, 3, 5][rng.gen_range(0..3)]
        };
        let kernel = KernelDims::new(rng.gen_range(1..=6), fh, fw, c);
        let spec = ConvSpec::new(
            (rng.gen_range(1..=2), rng.gen_range(1..=2)),
            (rng.gen_range(0..=fh / 2 + 1), rng.gen_range(0..=fw / 2 + 1)),
        );
        if spec.output_dims(input, kernel).is_ok() {
            return ConvCase {
                input,
                kernel,
                spec,
            };
        }
    }
}

fn random_pm1(rng: &mut impl Rng, d: Nhwc) -> Result<Tensor<i32>> {
    let data = (0..d.element_count()?)
        .map(|_| if rng.gen() { 1 } else { -1 })
        .collect();
    Tensor::from_vec(d, data)
}

fn random_i8(rng: &mut impl Rng, d: Nhwc) -> Result<I8FeatureMap> {
    let data = (0..d.element_count()?)
        .map(|_| rng.gen_range(-127i8..=127))
        .collect();
    I8FeatureMap::new(Tensor::from_vec(d, data)?)
}

fn random_thresholds(rng: &mut impl Rng, channels: usize) -> Result<ThresholdParams> {
    ThresholdParams::new(
        (0..channels)
            .map(|_| rng.gen_range(-130i16..=130).clamp(-128, 128))
            .collect(),
        (0..channels)
            .map(|_| {
                if rng.gen() {
                    Direction::Ge
                } else {
                    Direction::Le
                }
            })
            .collect(),
    )
}

fn conv_sweep(rng: &mut impl Rng, b: &Budget, fault: i64) -> Result<(SuiteResult, SuiteResult)> {
    let mut exact = SuiteResult::new("conv-exact");
    let mut clamp = SuiteResult::new("clamp-law");
    for i in 0..b.conv_configs {
        let case = random_case(rng, b.max_channels);
        let a = random_pm1(rng, case.input)?;
        let conv = RefConv::random(rng, case.kernel, case.spec);
        let k = conv.packed()?.with_pad_correction_bias(fault);
        let x = pack_pm1(&a)?;
        let wide = conv_i32(&x, &k, &case.spec)?;
        let oracle = conv_float_oracle(&a, &conv.weights, case.kernel, &case.spec)?;
        let od = wide.dims();
        exact.record(
            first_diff(od, wide.data(), oracle.data()).map(|d| format!("config {i} ({case}): {d}")),
        );

        let narrow: Vec<i32> = conv_i8(&x, &k, &case.spec)?
            .data()
            .iter()
            .map(|&v| v as i32)
            .collect();
        let clamped: Vec<i32> = wide
            .data()
            .iter()
            .map(|&v| clamp_i8(v as i64) as i32)
            .collect();
        let failure = if let Some(p) = narrow.iter().position(|&v| v == i8::MIN as i32) {
            Some(format!("config {i} ({case}): -128 at element {p}"))
        } else {
            first_diff(od, &narrow, &clamped).map(|d| format!("config {i} ({case}): {d}"))
        };
        clamp.record(failure);
    }
    Ok((exact, clamp))
}

fn fused_sweep(rng: &mut impl Rng, b: &Budget) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("fusion");
    for i in 0..b.fused_configs {
        let case = random_case(rng, b.max_channels);
        let x = random_i8(rng, case.input)?;
        let thr = if rng.gen_bool(0.75) {
            Some(random_thresholds(rng, case.input.channels)?)
        } else {
            None
        };
        let k = RefConv::random(rng, case.kernel, case.spec).packed()?;
        let staged = conv_staged(&x, thr.as_ref(), &k, &case.spec)?;
        let want: Vec<i32> = staged.data().iter().map(|&v| v as i32).collect();
        for tile in FUSED_TILES {
            let got: Vec<i32> = conv_fused(&x, thr.as_ref(), &k, &case.spec, tile)?
                .data()
                .iter()
                .map(|&v| v as i32)
                .collect();
            s.record(
                first_diff(staged.dims(), &got, &want)
                    .map(|d| format!("config {i} ({case}), {tile:?}: {d}")),
            );
        }
    }
    Ok(s)
}

fn threshold_sweep(rng: &mut impl Rng, b: &Budget) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("threshold");
    let (mut pos, mut neg) = (0, 0);
    for i in 0..b.bn_sets {
        let p = BnParams::random(rng, 1);
        if p.gamma[0] / p.sigma[0] > 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
        let t = compute_threshold(&p)?.params;
        let bad = (-127..=127).find(|&x| t.decide(0, x) != (bn_float(x as f64, &p, 0) >= 0.0));
        s.record(bad.map(|x| format!("set {i} ({p:?}): x = {x}")));
    }
    if pos == 0 || neg == 0 {
        s.record(Some(format!(
            "only one sign of gamma/sigma drawn ({pos} positive, {neg} negative)"
        )));
    }
    Ok(s)
}

/// Quantization error at most half an LSB (except `σ` lifted to one LSB),
/// folded pair within half a fold LSB, byte roundtrip exact.
fn qformat_sweep(rng: &mut impl Rng, b: &Budget) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("qformat");
    for i in 0..b.qbn_sets {
        let mut p = BnParams::random(rng, 4);
        // occasionally reach the wide formats while the folded bias still fits
        if rng.gen_bool(0.2) {
            p.mu[0] *= rng.gen_range(1.0..1500.0);
            p.gamma[0] = p.sigma[0] * rng.gen_range(-0.5..0.5);
        }
        let q = quantize_bn(&p)?;
        let t = &q.tables;
        s.record(check_qbn(&p, t).map(|e| format!("set {i}: {e}")));
        let back = QbnParams::from_bytes(&t.to_bytes(), t.channels())?;
        s.record((back != *t).then(|| format!("set {i}: byte roundtrip changed the tables")));
    }
    Ok(s)
}

fn check_qbn(p: &BnParams, t: &QbnParams) -> Option<String> {
    let half = t.format.resolution() / 2.0;
    let d = t.dequantized();
    for (v, (orig, got)) in ["gamma", "beta", "mu", "sigma"]
        .into_iter()
        .zip(p.vars().into_iter().zip(d.vars()))
    {
        for (c, (&w, &g)) in orig.iter().zip(got).enumerate() {
            let lifted = v == "sigma" && w < half;
            if !lifted && (w - g).abs() > half {
                return Some(format!(
                    "{v}[{c}] = {w} quantized to {g} with Q frac {}",
                    t.format.frac_bits()
                ));
            }
        }
    }
    let (m, c) = fold(&d);
    let fold_half = t.fold_format.resolution() / 2.0;
    for ch in 0..t.channels() {
        let (qm, qc) = t.folded(ch);
        if (qm - m[ch]).abs() > fold_half || (qc - c[ch]).abs() > fold_half {
            return Some(format!(
                "folded pair of channel {ch} off by more than half an LSB"
            ));
        }
    }
    None
}

/// Random VGG stacks: converted engine output against the float reference,
/// then again after a byte roundtrip of the model.
fn netgraph_sweep(rng: &mut impl Rng, b: &Budget) -> Result<SuiteResult> {
    let mut s = SuiteResult::new("netgraph");
    for i in 0..b.models {
        let first_in = rng.gen_range(1..=80);
        let mut c = first_in;
        let (h, w) = (rng.gen_range(3..=10), rng.gen_range(3..=10));
        let depth = rng.gen_range(1..=3);
        let mut layers = Vec::with_capacity(depth + 1);
        for l in 0..=depth {
            let out = rng.gen_range(1..=40);
            let f = [1, 3][rng.gen_range(0..2)];
            let conv = RefConv::random(rng, KernelDims::new(out, f, f, c), ConvSpec::same(f));
            layers.push(if l == depth {
                RefVggLayer::Terminal(conv)
            } else {
                let reach = (f * f * c).min(127) as f64;
                let bn = BnParams::new(
                    (0..out)
                        .map(|_| rng.gen_range(0.5..2.0) * if rng.gen() { 1.0 } else { -1.0 })
                        .collect(),
                    (0..out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..out).map(|_| rng.gen_range(-reach..=reach)).collect(),
                    (0..out).map(|_| rng.gen_range(0.5..4.0)).collect(),
                )?;
                RefVggLayer::Bn(conv, bn)
            });
            c = out;
        }
        let d = Nhwc::new(rng.gen_range(1..=2), h, w, first_in);
        let input = Tensor::from_vec(
            d,
            (0..d.element_count()?)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect(),
        )?;
        let want = vgg_trace(&layers, &input)?.pop().expect("non-empty stack");
        let (model, _) = convert_model(&vgg_model(&layers)?, ConvertMode::VggThreshold)?;
        let engine = |m: &Model| -> Result<Vec<i32>> {
            Ok(run_model(m, &input)?
                .data()
                .iter()
                .map(|&v| v as i32)
                .collect())
        };
        s.record(
            first_diff(want.dims(), &engine(&model)?, want.data())
                .map(|d| format!("model {i}: {d}")),
        );
        let reloaded = Model::from_bytes(&model.to_bytes()?)?;
        s.record(
            first_diff(want.dims(), &engine(&reloaded)?, want.data())
                .map(|d| format!("model {i} reloaded: {d}")),
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_run_passes() {
        let r = cmd_validate(&ValidateOptions::new(Sizes::Tiny, 0xB17F10)).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.suites.len(), 6);
        assert_eq!(r.suite("fusion").unwrap().checked, 40 * FUSED_TILES.len());
    }

    #[test]
    fn pad_correction_fault_is_located() {
        let mut o = ValidateOptions::new(Sizes::Tiny, 7);
        o.pad_correction_fault = 1;
        let r = cmd_validate(&o).unwrap();
        assert!(!r.passed());
        let s = r.suite("conv-exact").unwrap();
        assert_eq!(s.failed, s.checked);
        let first = r.first_failure().unwrap();
        assert!(
            first.starts_with("conv-exact: config 0 (")
                && first.contains("first at (n=0, y=0, x=0, c=0)"),
            "{first}"
        );
    }

    #[test]
    fn sizes_parse() {
        assert_eq!("tiny".parse::<Sizes>().unwrap(), Sizes::Tiny);
        assert!("huge".parse::<Sizes>().is_err());
    }
}
