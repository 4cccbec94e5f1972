//! Acceptance criteria 1 to 10, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! Exits non-zero when any hard criterion fails. Criterion 9 depends on the
//! host and is reported but never fails the run.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bitflow::bench::{cmd_bench, default_suite, seed_from_env, Variant};
use bitflow::binconv::{binarize, conv_fused, conv_i32, conv_i8, pad_spatial, ConvSpec, TileHint};
use bitflow::bitcore::{pack_pm1, pack_weights};
use bitflow::bnquant::{
    apply_threshold, compute_threshold, qformat_fit, quantize_bn, BnParams, Direction, QbnParams,
    ThresholdParams,
};
use bitflow::netgraph::{run_model, Layer, Model, ResnetBlock, VggBlock, VggOutput};
use bitflow::trainkit::{
    bn_quantize_retrain, grad_check, netgraph_predictions, train_stage1, train_stage2,
    Architecture, SurrogateOp, ToyTask, ToyTaskConfig, TrainConfig,
};
use bitflow::{I8FeatureMap, KernelDims, Nhwc, Tensor};

const CONV_CONFIGS: usize = 1000;
const CONV_BUDGET: Duration = Duration::from_secs(60);
const BN_SETS: usize = 10_000;
const FUSED_CONFIGS: usize = 200;
const TILES: [TileHint; 5] = [
    TileHint::Rows(1),
    TileHint::Rows(2),
    TileHint::Rows(4),
    TileHint::WholeImage,
    TileHint::Auto,
];
const STAGE1_EPOCHS: usize = 30;
const STAGE2_EPOCHS: usize = 10;
const RETRAIN_EPOCHS: usize = 1;
const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const GRAD_TOL: f64 = 1e-6;
const FUZZ_MODELS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- oracles

/// Dense `±1` convolution; taps outside the image read `-1`.
fn dense_conv(a: &Tensor<i32>, w: &[i32], k: KernelDims, spec: &ConvSpec) -> Vec<i64> {
    let d = a.dims();
    let oh = (d.height + 2 * spec.pad.0 - k.filter_h) / spec.stride.0 + 1;
    let ow = (d.width + 2 * spec.pad.1 - k.filter_w) / spec.stride.1 + 1;
    let mut out = Vec::with_capacity(d.batch * oh * ow * k.out_channels);
    for n in 0..d.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..k.out_channels {
                    let mut acc = 0i64;
                    for fy in 0..k.filter_h {
                        for fx in 0..k.filter_w {
                            let y = (oy * spec.stride.0 + fy) as isize - spec.pad.0 as isize;
                            let x = (ox * spec.stride.1 + fx) as isize - spec.pad.1 as isize;
                            let inside = y >= 0
                                && x >= 0
                                && (y as usize) < d.height
                                && (x as usize) < d.width;
                            for c in 0..k.in_channels {
                                let av = if inside {
                                    *a.at(n, y as usize, x as usize, c)
                                } else {
                                    -1
                                };
                                let wv = w
                                    [((o * k.filter_h + fy) * k.filter_w + fx) * k.in_channels + c];
                                acc += (av * wv) as i64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn sign_bn(x: f64, g: f64, b: f64, m: f64, s: f64) -> bool {
    g * (x - m) / s + b >= 0.0
}

// ---------------------------------------------------------------- generators

#[derive(Debug, Clone, Copy)]
struct Case {
    input: Nhwc,
    kernel: KernelDims,
    spec: ConvSpec,
}

fn channels(rng: &mut impl Rng) -> usize {
    const EDGES: [usize; 10] = [1, 2, 63, 64, 65, 127, 128, 129, 255, 256];
    if rng.gen_bool(0.3) {
        EDGES[rng.gen_range(0..EDGES.len())]
    } else {
        rng.gen_range(1..=256)
    }
}

fn random_case(rng: &mut impl Rng) -> Case {
    loop {
        let c = channels(rng);
        let input = Nhwc::new(
            rng.gen_range(1..=2),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            c,
        );
        let f = [1, 3, 5][rng.gen_range(0..3)];
        let kernel = KernelDims::new(rng.gen_range(1..=8), f, f, c);
        let spec = ConvSpec::new(
            (rng.gen_range(1..=2), rng.gen_range(1..=2)),
            (rng.gen_range(0..=f / 2), rng.gen_range(0..=f / 2)),
        );
        if input.height + 2 * spec.pad.0 >= f && input.width + 2 * spec.pad.1 >= f {
            return Case {
                input,
                kernel,
                spec,
            };
        }
    }
}

fn pm1(rng: &mut impl Rng, n: usize) -> Vec<i32> {
    (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect()
}

fn random_i8(rng: &mut impl Rng, d: Nhwc) -> I8FeatureMap {
    let n = d.batch * d.height * d.width * d.channels;
    let data = (0..n).map(|_| rng.gen_range(-127i8..=127)).collect();
    I8FeatureMap::new(Tensor::from_vec(d, data).unwrap()).unwrap()
}

fn random_thresholds(rng: &mut impl Rng, c: usize) -> ThresholdParams {
    ThresholdParams::new(
        (0..c).map(|_| rng.gen_range(-128i16..=128)).collect(),
        (0..c)
            .map(|_| {
                if rng.gen() {
                    Direction::Ge
                } else {
                    Direction::Le
                }
            })
            .collect(),
    )
    .unwrap()
}

fn random_bn(rng: &mut impl Rng, c: usize, scale: f64) -> BnParams {
    let mut g = Vec::with_capacity(c);
    for _ in 0..c {
        let v: f64 = rng.gen_range(1e-3..10.0) * scale;
        g.push(if rng.gen() { v } else { -v });
    }
    BnParams::new(
        g,
        (0..c).map(|_| rng.gen_range(-20.0..20.0) * scale).collect(),
        (0..c)
            .map(|_| rng.gen_range(-150.0..150.0) * scale)
            .collect(),
        (0..c).map(|_| rng.gen_range(1e-2..10.0) * scale).collect(),
    )
    .unwrap()
}

// ---------------------------------------------------------------- criteria

/// Criteria 1 and 2 share one sweep.
fn conv_sweep(rng: &mut impl Rng) -> (Outcome, Outcome) {
    let t = Instant::now();
    let (mut exact_bad, mut clamp_bad, mut saw_min, mut saturated) = (0, 0, false, 0usize);
    for _ in 0..CONV_CONFIGS {
        let case = random_case(rng);
        let d = case.input;
        let a = Tensor::from_vec(d, pm1(rng, d.batch * d.height * d.width * d.channels)).unwrap();
        let w = pm1(
            rng,
            case.kernel.out_channels * case.kernel.sites() * case.kernel.in_channels,
        );
        let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let k = pack_weights(&wf, case.kernel).unwrap();
        let x = pack_pm1(&a).unwrap();
        let want = dense_conv(&a, &w, case.kernel, &case.spec);
        let wide = conv_i32(&x, &k, &case.spec).unwrap();
        if wide
            .data()
            .iter()
            .map(|&v| v as i64)
            .ne(want.iter().copied())
        {
            exact_bad += 1;
        }
        let narrow = conv_i8(&x, &k, &case.spec).unwrap();
        saw_min |= narrow.data().contains(&i8::MIN);
        saturated += want.iter().filter(|v| v.abs() > 127).count();
        if narrow
            .data()
            .iter()
            .map(|&v| v as i64)
            .ne(want.iter().map(|v| v.clamp(&-127, &127)).copied())
        {
            clamp_bad += 1;
        }
    }
    let el = t.elapsed();
    (
        outcome(
            exact_bad == 0 && el < CONV_BUDGET,
            format!("{CONV_CONFIGS} configs, {exact_bad} mismatching, {:.1} s (limit 60 s)", el.as_secs_f64()),
        ),
        outcome(
            clamp_bad == 0 && !saw_min && saturated > 0,
            format!(
                "{CONV_CONFIGS} configs, {clamp_bad} mismatching, -128 seen: {saw_min}, {saturated} saturated elements"
            ),
        ),
    )
}

fn criterion3(rng: &mut impl Rng) -> Outcome {
    const PER: usize = 100;
    let (mut bad, mut pos, mut neg) = (0usize, 0usize, 0usize);
    let xs: Vec<i8> = (-127..=127).collect();
    for _ in 0..BN_SETS / PER {
        let p = random_bn(rng, PER, 1.0);
        let t = compute_threshold(&p).unwrap().params;
        let d = Nhwc::new(1, 1, xs.len(), PER);
        let data = xs
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, PER))
            .collect();
        let fm = I8FeatureMap::new(Tensor::from_vec(d, data).unwrap()).unwrap();
        let bits = apply_threshold(&fm, &t).unwrap();
        for c in 0..PER {
            if p.gamma[c] / p.sigma[c] > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            for (i, &x) in xs.iter().enumerate() {
                let want = sign_bn(x as f64, p.gamma[c], p.beta[c], p.mu[c], p.sigma[c]);
                bad += (bits.bit(0, 0, i, c) != want) as usize;
            }
        }
    }
    outcome(
        bad == 0 && pos > 0 && neg > 0,
        format!("{BN_SETS} BN sets x 255 inputs, {bad} disagreements, gamma/sigma > 0: {pos}, < 0: {neg}"),
    )
}

fn criterion4(rng: &mut impl Rng) -> Outcome {
    let mut worst = 0f64;
    let (mut bad, mut sets, mut formats) = (0usize, 0usize, [false; 16]);
    for _ in 0..2000 {
        let scale = 10f64.powi(rng.gen_range(-3..=2));
        let p = random_bn(rng, 8, scale);
        let Ok(q) = quantize_bn(&p) else { continue };
        sets += 1;
        let t: &QbnParams = &q.tables;
        let f = t.format.frac_bits() as i32;
        formats[f as usize] = true;
        let lsb = 2f64.powi(-f);
        let bound = lsb / 2.0;
        for (name, orig, ints) in [
            ("gamma", &p.gamma, &t.gamma),
            ("beta", &p.beta, &t.beta),
            ("mu", &p.mu, &t.mu),
            ("sigma", &p.sigma, &t.sigma),
        ] {
            for (&w, &qi) in orig.iter().zip(ints) {
                let direct = (w * 2f64.powi(f)).round();
                let fits = (i16::MIN as f64..=i16::MAX as f64).contains(&direct);
                let lifted = name == "sigma" && direct == 0.0 && qi == 1;
                let err = (qi as f64 * lsb - w).abs();
                if !lifted {
                    worst = worst.max(err / bound);
                }
                if !fits || (!lifted && (err > bound || qi as f64 != direct)) {
                    bad += 1;
                }
            }
        }
        if QbnParams::from_bytes(&t.to_bytes(), t.channels())
            .ok()
            .as_ref()
            != Some(t)
        {
            bad += 1;
        }
    }
    let low = qformat_fit(&[&[0.4]]).unwrap().frac_bits();
    let high = qformat_fit(&[&[40000.0]]).unwrap().frac_bits();
    let used = formats.iter().filter(|&&b| b).count();
    outcome(
        bad == 0 && sets >= 1000 && low == 15 && high == 0,
        format!(
            "{sets} BN sets over {used} formats, {bad} violations, worst error {worst:.3} of the half-LSB bound, 0.4 -> frac {low}, 40000 -> frac {high}"
        ),
    )
}

fn criterion5(rng: &mut impl Rng) -> Outcome {
    let mut bad = 0;
    for _ in 0..FUSED_CONFIGS {
        let case = random_case(rng);
        let x = random_i8(rng, case.input);
        let thr = rng
            .gen_bool(0.8)
            .then(|| random_thresholds(rng, case.input.channels));
        let w: Vec<f32> = pm1(
            rng,
            case.kernel.out_channels * case.kernel.sites() * case.kernel.in_channels,
        )
        .into_iter()
        .map(|v| v as f32)
        .collect();
        let k = pack_weights(&w, case.kernel).unwrap();
        let bits = binarize(&x, thr.as_ref()).unwrap();
        let padded = pad_spatial(&bits, case.spec.pad).unwrap();
        let staged = conv_i8(&padded, &k, &ConvSpec::new(case.spec.stride, (0, 0))).unwrap();
        for tile in TILES {
            let fused = conv_fused(&x, thr.as_ref(), &k, &case.spec, tile).unwrap();
            bad += (fused != staged) as usize;
        }
    }
    outcome(
        bad == 0,
        format!(
            "{FUSED_CONFIGS} configs x {} tile sizes, {bad} mismatching",
            TILES.len()
        ),
    )
}

/// Criteria 6 and 7: one seeded training run.
fn training(seed: u64) -> (Outcome, Outcome) {
    let t = Instant::now();
    let task = ToyTask::generate(ToyTaskConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let config = TrainConfig {
        seed,
        ..Default::default()
    };
    let s1 = train_stage1(
        Architecture::residual_toy(64, 1),
        config,
        &task,
        STAGE1_EPOCHS,
    )
    .unwrap();
    let stage1 = s1.float_accuracy(&task.val).unwrap();
    let ablation = s1.deploy_accuracy(&task.val).unwrap();
    let s2 = train_stage2(s1, &task, STAGE2_EPOCHS).unwrap();
    let stage2 = s2.deploy_accuracy(&task.val).unwrap();
    let el = t.elapsed();
    let six = outcome(
        stage2 >= stage1 - 1.0 && stage1 - ablation > 1.0 && el <= TRAIN_BUDGET,
        format!(
            "stage 1 {stage1:.1}%, clipped without retraining {ablation:.1}%, stage 2 {stage2:.1}%, {:.0} s (limit 900 s)",
            el.as_secs_f64()
        ),
    );
    let (q, report) = bn_quantize_retrain(s2, &task, RETRAIN_EPOCHS).unwrap();
    let model = Model::from_bytes(&q.export_model().unwrap().to_bytes().unwrap()).unwrap();
    let engine = netgraph_predictions(&model, q.readout(), &task.val).unwrap();
    let own = q.predict(&task.val).unwrap();
    let diff = engine.iter().zip(&own).filter(|(a, b)| a != b).count();
    let seven = outcome(
        diff == 0 && engine.len() == task.val.len(),
        format!(
            "{} validation images, {diff} differing predictions, BN tables for blocks {:?}, accuracy {:.1}% -> {:.1}% after quantization",
            engine.len(),
            q.freeze_order(),
            report.accuracy_before,
            report.accuracy_after
        ),
    );
    (six, seven)
}

fn criterion8() -> Outcome {
    let sign_points: Vec<f64> = (-3000..=3000).map(|i| i as f64 * 1e-3 + 3.7e-5).collect();
    let clip_points: Vec<f64> = (-3000..=3000).map(|i| i as f64 * 0.1 + 3.7e-3).collect();
    let a = grad_check(SurrogateOp::SignClamp, &sign_points);
    let c = grad_check(SurrogateOp::ClipI8, &clip_points);
    outcome(
        a.max_abs_error <= GRAD_TOL && c.max_abs_error <= GRAD_TOL && a.checked > 5000 && c.checked > 5000,
        format!(
            "sign clamp: {} points, max error {:.1e}; clip: {} points, max error {:.1e} (tolerance 1e-6)",
            a.checked, a.max_abs_error, c.checked, c.max_abs_error
        ),
    )
}

fn criterion9(seed: u64) -> Outcome {
    let mut suite = default_suite();
    for c in suite.iter_mut() {
        c.repeats = 21;
        c.warmup = 3;
        c.threads = 1;
    }
    let report = cmd_bench(&suite, seed).unwrap();
    let (wins, n) = report.median_wins(Variant::I8Fused, Variant::I32Staged);
    let ratios: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.variant == Variant::I8Fused)
        .map(|r| r.ratio)
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let best = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        2 * wins >= n,
        format!("i8-fused median <= i32-staged median on {wins}/{n} configs, mean speedup {mean:.2}x, best {best:.2}x"),
    )
}

fn random_model(rng: &mut impl Rng) -> (Model, Tensor<f32>) {
    let mut c = rng.gen_range(1..=70);
    let input_c = c;
    let mut layers = Vec::new();
    let kernel = |rng: &mut ChaCha8Rng, out: usize, cin: usize| {
        let f = [1, 3][rng.gen_range(0..2)];
        let dims = KernelDims::new(out, f, f, cin);
        let w: Vec<f32> = pm1(rng, out * f * f * cin)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        (pack_weights(&w, dims).unwrap(), ConvSpec::same(f))
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    for _ in 0..r.gen_range(0..=2) {
        let out = r.gen_range(1..=70);
        let (k, spec) = kernel(&mut r, out, c);
        layers.push(Layer::Vgg(VggBlock {
            kernel: k,
            spec,
            output: VggOutput::Threshold(random_thresholds(&mut r, out)),
        }));
        c = out;
    }
    let out = r.gen_range(1..=70);
    let (k, spec) = kernel(&mut r, out, c);
    layers.push(Layer::Vgg(VggBlock {
        kernel: k,
        spec,
        output: VggOutput::Terminal,
    }));
    for _ in 0..r.gen_range(0..=2) {
        let (k, spec) = kernel(&mut r, out, out);
        let qbn = loop {
            if let Ok(q) = quantize_bn(&random_bn(&mut r, out, 0.1)) {
                break q.tables;
            }
        };
        layers.push(Layer::Resnet(ResnetBlock {
            kernel: k,
            spec,
            qbn,
        }));
    }
    let d = Nhwc::new(1, r.gen_range(1..=8), r.gen_range(1..=8), input_c);
    let x = (0..d.height * d.width * d.channels)
        .map(|_| r.gen_range(-1.0f32..1.0))
        .collect();
    (Model::new(layers), Tensor::from_vec(d, x).unwrap())
}

fn criterion10(rng: &mut ChaCha8Rng) -> Outcome {
    let (mut diffs, mut undetected, mut corruptions) = (0usize, 0usize, 0usize);
    for i in 0..FUZZ_MODELS {
        let (m, x) = random_model(rng);
        let bytes = m.to_bytes().unwrap();
        let back = Model::from_bytes(&bytes).unwrap();
        if back != m || run_model(&back, &x).unwrap() != run_model(&m, &x).unwrap() {
            diffs += 1;
        }
        // every position for a few models, one random position for the rest
        let positions: Vec<usize> = if i < 10 {
            (0..bytes.len()).collect()
        } else {
            vec![rng.gen_range(0..bytes.len())]
        };
        for p in positions {
            let mut bad = bytes.clone();
            bad[p] ^= rng.gen_range(1..=255u8);
            corruptions += 1;
            undetected += Model::from_bytes(&bad).is_ok() as usize;
        }
    }
    outcome(
        diffs == 0 && undetected == 0,
        format!("{FUZZ_MODELS} models, {diffs} behavioral diffs, {undetected} of {corruptions} single-byte corruptions undetected"),
    )
}

fn main() -> ExitCode {
    let seed = seed_from_env().expect("BITFLOW_SEED");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    println!("acceptance suite, seed {seed:#x}");
    let mut results: Vec<(usize, &str, bool, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, soft: bool, o: Outcome| {
        let status = match (o.pass, soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (soft, hardware-dependent)",
        };
        println!("criterion {n:>2} {name}: {status}: {}", o.detail);
        results.push((n, name, soft, o));
    };
    let (one, two) = conv_sweep(&mut rng);
    report(1, "conv exactness", false, one);
    report(2, "clamp law", false, two);
    report(3, "threshold equivalence", false, criterion3(&mut rng));
    report(4, "BN quantization", false, criterion4(&mut rng));
    report(5, "fusion transparency", false, criterion5(&mut rng));
    report(9, "fused vs staged latency", true, criterion9(seed));
    report(8, "gradient checks", false, criterion8());
    report(10, "serialization", false, criterion10(&mut rng));
    let (six, seven) = training(seed);
    report(6, "two-stage training", false, six);
    report(7, "train/infer parity", false, seven);
    let hard_failures = results
        .iter()
        .filter(|(_, _, soft, o)| !o.pass && !soft)
        .count();
    let passed = results.iter().filter(|(_, _, _, o)| o.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
