//! Two-stage training on the toy task, BN quantization and export.
//!
//! `cargo run --release --example two_stage_training -- [stage1] [stage2] [curves.csv]`
//! The defaults (8 and 3 epochs) take about two minutes; 30 and 10 match
//! the acceptance run.

use std::fs::File;

use bitflow::trainkit::{
    bn_quantize_retrain, netgraph_predictions, train_stage1, train_stage2, write_curves_csv,
    Architecture, ToyTask, ToyTaskConfig, TrainConfig,
};

fn main() -> bitflow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let epochs = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (e1, e2) = (epochs(1, 8), epochs(2, 3));

    let task = ToyTask::generate(ToyTaskConfig::default())?;
    let arch = Architecture::residual_toy(64, 1);
    println!(
        "{} train / {} val images, {} blocks",
        task.train.len(),
        task.val.len(),
        arch.blocks.len()
    );

    let s1 = train_stage1(arch, TrainConfig::default(), &task, e1)?;
    let stage1 = s1.float_accuracy(&task.val)?;
    let clipped = s1.deploy_accuracy(&task.val)?;
    println!("stage 1: {stage1:.1}% unclipped, {clipped:.1}% once clipped to 8 bits");
    println!(
        "saturated conv outputs: {:.2}%",
        100.0 * s1.saturation_rate(&task.val)?
    );

    let s2 = train_stage2(s1, &task, e2)?;
    println!(
        "stage 2: {:.1}% with the 8-bit data flow",
        s2.deploy_accuracy(&task.val)?
    );

    let (q, report) = bn_quantize_retrain(s2, &task, 1)?;
    println!(
        "BN quantized in order {:?}: {:.1}% -> {:.1}%, largest parameter change {:.2e}",
        q.freeze_order(),
        report.accuracy_before,
        report.accuracy_after,
        report.max_noise
    );

    let model = q.export_model()?;
    let engine = netgraph_predictions(&model, q.readout(), &task.val)?;
    let same = engine == q.predict(&task.val)?;
    println!(
        "exported model ({} bytes) predicts identically: {same}",
        model.to_bytes()?.len()
    );

    if let Some(path) = args.get(3) {
        write_curves_csv(File::create(path)?, q.history())?;
        println!("curves written to {path}");
    }
    Ok(())
}
