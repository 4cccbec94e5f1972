use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::{bn_backward_for_test, bn_batch_for_test, conv_backward_for_test};
use super::*;
use crate::binconv::{conv_float_oracle, ConvSpec};
use crate::tensor::{KernelDims, Nhwc, Tensor};

#[test]
fn ste_sign_examples() {
    assert_eq!(ste_sign(0.5), (1.0, true));
    assert_eq!(ste_sign(2.0), (1.0, false));
    assert_eq!(ste_sign(-1.0), (-1.0, true));
    assert_eq!(ste_sign(0.0), (1.0, true));
    assert_eq!(ste_sign(1.0), (1.0, true));
    assert_eq!(ste_sign(-1.000001), (-1.0, false));
}

#[test]
fn clip_examples() {
    assert_eq!(clip_i8_surrogate(50.0), (50.0, true));
    assert_eq!(clip_i8_surrogate(200.0), (127.0, false));
    assert_eq!(clip_i8_surrogate(-127.0), (-127.0, true));
    assert_eq!(clip_i8_surrogate(-300.0), (-127.0, false));
}

#[test]
fn grad_check_examples() {
    let r = grad_check(SurrogateOp::SignClamp, &[0.5]);
    assert!((r.max_abs_error) < 1e-6 && r.checked == 1);
    let r = grad_check(SurrogateOp::SignClamp, &[3.0]);
    assert!(r.max_abs_error < 1e-6);
    assert_eq!(SurrogateOp::SignClamp.gradient(3.0), 0.0);
    let r = grad_check(SurrogateOp::ClipI8, &[-200.0, 50.0]);
    assert!(r.max_abs_error < 1e-6 && r.checked == 2);
    let fd = (SurrogateOp::ClipI8.forward(50.0 + FD_STEP)
        - SurrogateOp::ClipI8.forward(50.0 - FD_STEP))
        / (2.0 * FD_STEP);
    assert!((fd - 1.0).abs() < 1e-6);
}

#[test]
fn grad_check_skips_kinks() {
    let r = grad_check(SurrogateOp::SignClamp, &[1.0, -0.995, 1.005, 0.2]);
    assert_eq!((r.checked, r.skipped_near_kink), (1, 3));
    let r = grad_check(SurrogateOp::ClipI8, &[127.0, -126.5, 128.0, 0.0]);
    assert_eq!((r.checked, r.skipped_near_kink), (1, 3));
}

proptest! {
    #[test]
    fn ste_mask_law(i in -40_000i32..=40_000) {
        let x = i as f64 / 10_000.0;
        prop_assert_eq!(ste_sign(x).1, (-1.0..=1.0).contains(&x));
        prop_assert_eq!(ste_sign(x).0, if x >= 0.0 { 1.0 } else { -1.0 });
    }

    #[test]
    fn clip_mask_law(x in -1000.0f64..1000.0) {
        let (v, m) = clip_i8_surrogate(x);
        prop_assert_eq!(m, (-127.0..=127.0).contains(&x));
        prop_assert!((-127.0..=127.0).contains(&v));
        if m { prop_assert_eq!(v, x); }
    }
}

fn pm1(rng: &mut impl Rng, n: usize) -> Vec<i32> {
    (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect()
}

/// `L = Σ g·conv(b, w)` through the dense oracle.
fn weighted_sum(b: &Tensor<i32>, w: &[i32], kd: KernelDims, spec: &ConvSpec, g: &[f32]) -> f64 {
    let z = conv_float_oracle(b, w, kd, spec).unwrap();
    z.data()
        .iter()
        .zip(g)
        .map(|(&z, &g)| z as f64 * g as f64)
        .sum()
}

#[test]
fn conv_backward_matches_oracle_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let f = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2);
        let id = Nhwc::new(
            rng.gen_range(1..=2),
            rng.gen_range(f..=7),
            rng.gen_range(f..=7),
            rng.gen_range(1..=5),
        );
        let kd = KernelDims::new(rng.gen_range(1..=4), f, f, id.channels);
        let spec = ConvSpec::new((s, s), (rng.gen_range(0..=f / 2), rng.gen_range(0..=f / 2)));
        let b = Tensor::from_vec(id, pm1(&mut rng, id.element_count().unwrap())).unwrap();
        let mut w = pm1(&mut rng, kd.element_count().unwrap());
        let od = spec.output_dims(id, kd).unwrap();
        let g: Vec<f32> = (0..od.element_count().unwrap())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        let input: Vec<f32> = b.data().iter().map(|&v| v as f32 * 0.5).collect();
        let wf: Vec<f32> = w.iter().map(|&v| v as f32 * 0.3).collect();
        let (dw, da) = conv_backward_for_test(id, od, kd, &spec, &input, &wf, &g);
        // L is linear in each weight, so the gradient is half the ±1 difference.
        for k in 0..w.len() {
            let orig = w[k];
            w[k] = 1;
            let hi = weighted_sum(&b, &w, kd, &spec, &g);
            w[k] = -1;
            let lo = weighted_sum(&b, &w, kd, &spec, &g);
            w[k] = orig;
            assert!(((hi - lo) / 2.0 - dw[k] as f64).abs() < 1e-3, "dw[{k}]");
        }
        let mut bv = b.data().to_vec();
        for k in 0..bv.len() {
            let orig = bv[k];
            bv[k] = 1;
            let hi = weighted_sum(
                &Tensor::from_vec(id, bv.clone()).unwrap(),
                &w,
                kd,
                &spec,
                &g,
            );
            bv[k] = -1;
            let lo = weighted_sum(
                &Tensor::from_vec(id, bv.clone()).unwrap(),
                &w,
                kd,
                &spec,
                &g,
            );
            bv[k] = orig;
            assert!(((hi - lo) / 2.0 - da[k] as f64).abs() < 1e-3, "da[{k}]");
        }
    }
}

#[test]
fn bn_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = 3;
    let n = 40;
    let z: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-20.0f32..20.0)).collect();
    let gamma: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5f32..2.0)).collect();
    let beta: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let g: Vec<f32> = (0..n * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let scale = 4.0;
    let loss = |z: &[f32], gamma: &[f32], beta: &[f32]| -> f64 {
        let y = bn_batch_for_test(z, c, gamma, beta, scale);
        y.iter().zip(&g).map(|(&y, &g)| y as f64 * g as f64).sum()
    };
    let (dz, dg, db) = bn_backward_for_test(z.as_slice(), c, &gamma, &beta, scale, &g);
    let h = 1e-2f32;
    for k in [0, 7, 50, 119] {
        let mut p = z.clone();
        p[k] += h;
        let mut m = z.clone();
        m[k] -= h;
        let fd = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * h as f64);
        assert!(
            (fd - dz[k] as f64).abs() < 2e-3 * (1.0 + fd.abs()),
            "dz[{k}] {fd} vs {}",
            dz[k]
        );
    }
    for ch in 0..c {
        let mut p = gamma.clone();
        p[ch] += h;
        let mut m = gamma.clone();
        m[ch] -= h;
        let fd = (loss(&z, &p, &beta) - loss(&z, &m, &beta)) / (2.0 * h as f64);
        assert!(
            (fd - dg[ch] as f64).abs() < 1e-2 * (1.0 + fd.abs()),
            "dγ {fd} vs {}",
            dg[ch]
        );
        let mut p = beta.clone();
        p[ch] += h;
        let mut m = beta.clone();
        m[ch] -= h;
        let fd = (loss(&z, &gamma, &p) - loss(&z, &gamma, &m)) / (2.0 * h as f64);
        assert!(
            (fd - db[ch] as f64).abs() < 1e-2 * (1.0 + fd.abs()),
            "dβ {fd} vs {}",
            db[ch]
        );
    }
}

use crate::bnquant::BnParams;
use crate::error::BitflowError;
use crate::netgraph::{convert_model, ConvertMode, Model};

fn small_task(train: usize) -> ToyTask {
    ToyTask::generate(ToyTaskConfig {
        train,
        val: 100,
        ..Default::default()
    })
    .unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        batch_size: 25,
        ..Default::default()
    }
}

/// Every conv fan-in is at most 108, so no clip can ever engage.
fn narrow_vgg() -> Architecture {
    Architecture {
        in_channels: IMAGE_CHANNELS,
        blocks: vec![
            BlockSpec::new(BlockKind::Vgg, 12, 3, 1),
            BlockSpec::new(BlockKind::Vgg, 12, 3, 2),
            BlockSpec::new(BlockKind::Terminal, 12, 3, 1),
        ],
    }
}

#[test]
fn toy_task_is_reproducible_and_balanced() {
    let a = small_task(200);
    let b = small_task(200);
    assert_eq!(a, b);
    let c = ToyTask::generate(ToyTaskConfig {
        seed: 1,
        train: 200,
        val: 100,
        ..Default::default()
    })
    .unwrap();
    assert_ne!(a.train, c.train);
    for k in 0..CLASSES as u8 {
        assert_eq!(a.train.labels().iter().filter(|&&l| l == k).count(), 20);
    }
    let (x, y) = a.val.all().unwrap();
    assert_eq!(
        x.dims(),
        Nhwc::new(100, IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS)
    );
    assert_eq!(y, a.val.labels());
}

#[test]
fn toy_task_rejects_empty_splits() {
    let cfg = ToyTaskConfig {
        train: 0,
        ..Default::default()
    };
    assert!(matches!(
        ToyTask::generate(cfg),
        Err(BitflowError::EmptyInput)
    ));
}

#[test]
fn architecture_validation() {
    assert!(Architecture::vgg_toy(8).validate().is_ok());
    assert!(Architecture::residual_toy(8, 2).validate().is_ok());
    let mut a = Architecture::vgg_toy(8);
    a.blocks.pop();
    assert!(matches!(a.validate(), Err(BitflowError::MalformedGraph(_))));
    let mut a = Architecture::vgg_toy(8);
    a.blocks
        .insert(0, BlockSpec::new(BlockKind::Resnet, 8, 3, 1));
    assert!(a.validate().is_err());
    let mut a = Architecture::residual_toy(8, 1);
    a.blocks[3].stride = 2;
    assert!(a.validate().is_err());
    let mut a = Architecture::vgg_toy(8);
    a.blocks[0].filter = 2;
    assert!(a.validate().is_err());
}

#[test]
fn zero_epochs_leaves_initialization() {
    let task = small_task(100);
    let s = train_stage1(Architecture::vgg_toy(8), quick_config(), &task, 0).unwrap();
    assert_eq!(
        s,
        TrainState::new(Architecture::vgg_toy(8), quick_config()).unwrap()
    );
    assert!(s.history().is_empty());
    assert_eq!(s.epoch(), 0);
}

#[test]
fn seeded_training_is_bit_identical() {
    let task = small_task(200);
    let a = train_stage1(Architecture::residual_toy(8, 1), quick_config(), &task, 2).unwrap();
    let b = train_stage1(Architecture::residual_toy(8, 1), quick_config(), &task, 2).unwrap();
    assert_eq!(a.history(), b.history());
    assert_eq!(a, b);
    let c = train_stage1(
        Architecture::residual_toy(8, 1),
        TrainConfig {
            seed: 7,
            ..quick_config()
        },
        &task,
        2,
    )
    .unwrap();
    assert_ne!(a.history(), c.history());
}

#[test]
fn training_loss_decreases() {
    let task = small_task(400);
    let s = train_stage1(Architecture::vgg_toy(16), quick_config(), &task, 6).unwrap();
    let train: Vec<f64> = s
        .history()
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.loss)
        .collect();
    assert_eq!(train.len(), 6);
    let head = (train[0] + train[1]) / 2.0;
    let tail = (train[4] + train[5]) / 2.0;
    assert!(tail < head, "{train:?}");
}

#[test]
fn nan_learning_rate_reports_divergence() {
    let task = small_task(100);
    let cfg = TrainConfig {
        lr: f32::NAN,
        ..quick_config()
    };
    let r = train_stage1(Architecture::vgg_toy(8), cfg, &task, 1);
    assert!(matches!(r, Err(BitflowError::Diverged(_))), "{r:?}");
}

#[test]
fn stage_transitions_are_one_way() {
    let task = small_task(100);
    let s = TrainState::new(Architecture::residual_toy(8, 1), quick_config()).unwrap();
    let r = bn_quantize_retrain(s.clone(), &task, 0);
    assert!(matches!(r, Err(BitflowError::StageViolation(_))));
    let s2 = train_stage2(s, &task, 0).unwrap();
    assert_eq!(s2.stage(), Stage::Clipped);
    assert!(matches!(
        train_stage2(s2, &task, 1),
        Err(BitflowError::StageViolation(_))
    ));
}

#[test]
fn clip_inactive_stage2_matches_continued_stage1() {
    let task = small_task(200);
    let s1 = train_stage1(narrow_vgg(), quick_config(), &task, 1).unwrap();
    assert_eq!(s1.saturation_rate(&task.train).unwrap(), 0.0);
    let mut cont = s1.clone();
    cont.train_epochs(&task, 2).unwrap();
    let clipped = train_stage2(s1, &task, 2).unwrap();
    let strip = |s: &TrainState| -> Vec<(usize, Split, f64, f64)> {
        s.history()
            .iter()
            .map(|r| (r.epoch, r.split, r.loss, r.accuracy))
            .collect()
    };
    assert_eq!(strip(&cont), strip(&clipped));
    for i in 0..3 {
        assert_eq!(cont.weights(i), clipped.weights(i));
        assert_eq!(cont.bn_params(i), clipped.bn_params(i));
    }
}

#[test]
fn export_requires_quantized_residual_bn() {
    let task = small_task(100);
    let s = train_stage2(
        TrainState::new(Architecture::residual_toy(8, 1), quick_config()).unwrap(),
        &task,
        0,
    )
    .unwrap();
    assert!(matches!(
        s.export_model(),
        Err(BitflowError::StageViolation(_))
    ));
}

#[test]
fn float_export_converts_to_threshold_export() {
    let task = small_task(200);
    let s = train_stage2(
        train_stage1(Architecture::vgg_toy(8), quick_config(), &task, 1).unwrap(),
        &task,
        1,
    )
    .unwrap();
    let (converted, _) =
        convert_model(&s.export_float_model().unwrap(), ConvertMode::VggThreshold).unwrap();
    assert_eq!(converted, s.export_model().unwrap());
    let p = netgraph_predictions(&converted, s.readout(), &task.val).unwrap();
    assert_eq!(p, s.predict(&task.val).unwrap());
}

/// γ = 2, σ = 2, μ = 0, β = 3 is exact in any Q-format with 2+ range bits,
/// and folds to m = 1, c = 3.
fn representable(channels: usize) -> BnParams {
    BnParams::new(
        vec![2.0; channels],
        vec![3.0; channels],
        vec![0.0; channels],
        vec![2.0; channels],
    )
    .unwrap()
}

#[test]
fn representable_bn_quantizes_without_noise() {
    let task = small_task(100);
    let mut s = TrainState::new(Architecture::residual_toy(8, 1), quick_config()).unwrap();
    for i in s.architecture().bn_blocks() {
        s.set_bn_params(i, &representable(8)).unwrap();
        assert_eq!(s.bn_params(i).unwrap(), representable(8));
    }
    let s = train_stage2(s, &task, 0).unwrap();
    let before = s.predict(&task.val).unwrap();
    let (q, report) = bn_quantize_retrain(s, &task, 0).unwrap();
    assert_eq!(report.max_noise, 0.0);
    assert_eq!(report.accuracy_before, report.accuracy_after);
    assert_eq!(q.predict(&task.val).unwrap(), before);
    for (_, t) in &report.tables {
        assert!(t.m.iter().all(|&m| m == t.m[0]));
    }
}

#[test]
fn single_bn_model_runs_one_cycle() {
    let task = small_task(100);
    let arch = Architecture {
        in_channels: IMAGE_CHANNELS,
        blocks: vec![
            BlockSpec::new(BlockKind::Terminal, 8, 3, 2),
            BlockSpec::new(BlockKind::Resnet, 8, 3, 1),
        ],
    };
    let s = train_stage2(
        train_stage1(arch, quick_config(), &task, 1).unwrap(),
        &task,
        1,
    )
    .unwrap();
    let epochs = s.epoch();
    let (q, report) = bn_quantize_retrain(s, &task, 1).unwrap();
    assert_eq!(q.freeze_order(), &[1]);
    assert_eq!(report.tables.len(), 1);
    assert_eq!(q.epoch(), epochs + 1);
}

#[test]
fn three_bn_model_freezes_in_order_and_matches_engine() {
    let task = small_task(300);
    let s = train_stage1(Architecture::residual_toy(16, 1), quick_config(), &task, 2).unwrap();
    let s = train_stage2(s, &task, 1).unwrap();
    let (q, report) = bn_quantize_retrain(s, &task, 1).unwrap();
    assert_eq!(q.freeze_order(), &[0, 1, 3]);
    assert_eq!(
        report.tables.iter().map(|t| t.0).collect::<Vec<_>>(),
        vec![0, 1, 3]
    );
    let frozen = q.clone();
    let model = q.export_model().unwrap();
    let bytes = model.to_bytes().unwrap();
    let model = Model::from_bytes(&bytes).unwrap();
    let engine = netgraph_predictions(&model, q.readout(), &task.val).unwrap();
    assert_eq!(engine, q.predict(&task.val).unwrap());
    // Frozen blocks are left alone by later retraining.
    for i in q.freeze_order() {
        assert_eq!(q.weights(*i), frozen.weights(*i));
    }
}

#[test]
fn curves_csv_layout() {
    let task = small_task(100);
    let s = train_stage1(Architecture::vgg_toy(8), quick_config(), &task, 2).unwrap();
    let mut out = Vec::new();
    write_curves_csv(&mut out, s.history()).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,split,loss,accuracy");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,train,"));
    assert!(lines[4].starts_with("2,val,"));
}
