//! Build a float-BN model, lower it to thresholds, save, reload and run it.

use bitflow::bench::convert;
use bitflow::binconv::ConvSpec;
use bitflow::bnquant::BnParams;
use bitflow::netgraph::reference::{vgg_model, vgg_trace, RefConv, RefVggLayer};
use bitflow::netgraph::{load_model, run_model, save_model, ConvertMode};
use bitflow::{KernelDims, Nhwc, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bitflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bn = BnParams::new(
        (0..32).map(|_| rng.gen_range(0.5..2.0)).collect(),
        (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..32).map(|_| rng.gen_range(-20.0..20.0)).collect(),
        (0..32).map(|_| rng.gen_range(0.5..3.0)).collect(),
    )?;
    bn.gamma[7] = 0.0;
    let layers = [
        RefVggLayer::Bn(
            RefConv::random(&mut rng, KernelDims::new(32, 3, 3, 16), ConvSpec::same(3)),
            bn,
        ),
        RefVggLayer::Terminal(RefConv::random(
            &mut rng,
            KernelDims::new(10, 3, 3, 32),
            ConvSpec::same(3),
        )),
    ];
    let float_model = vgg_model(&layers)?;

    let (model, summary) = convert(&float_model, ConvertMode::VggThreshold)?;
    for d in &summary.diagnostics {
        println!("warning: {d}");
    }
    let path = std::env::temp_dir().join("bitflow_example.bdf");
    save_model(&path, &model)?;
    let size = std::fs::metadata(&path)?.len();
    let reloaded = load_model(&path)?;
    println!(
        "saved {} layers in {size} bytes to {}",
        reloaded.layers.len(),
        path.display()
    );

    let d = Nhwc::new(2, 12, 12, 16);
    let x = Tensor::from_vec(
        d,
        (0..d.element_count()?)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;
    let engine = run_model(&reloaded, &x)?;
    let reference = vgg_trace(&layers, &x)?.pop().expect("two layers");
    let same = engine
        .data()
        .iter()
        .zip(reference.data())
        .all(|(&a, &b)| a as i32 == b);
    println!(
        "engine output {:?} matches the float reference: {same}",
        engine.dims()
    );

    // any flipped byte trips the checksum
    let mut bytes = reloaded.to_bytes()?;
    bytes[40] ^= 0x10;
    println!(
        "corrupted load: {}",
        bitflow::netgraph::Model::from_bytes(&bytes).unwrap_err()
    );
    std::fs::remove_file(path)?;
    Ok(())
}
