//! Fused threshold + pack + pad + conv over row tiles, against the staged pipeline.

use std::time::Instant;

use bitflow::binconv::{conv_fused, conv_staged, ConvSpec, TileHint};
use bitflow::bitcore::pack_weights;
use bitflow::bnquant::{Direction, ThresholdParams};
use bitflow::{I8FeatureMap, KernelDims, Nhwc, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bitflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Nhwc::new(1, 28, 28, 128);
    let x = I8FeatureMap::new(Tensor::from_vec(
        d,
        (0..d.element_count()?)
            .map(|_| rng.gen_range(-127i8..=127))
            .collect(),
    )?)?;
    let thr = ThresholdParams::new(
        (0..128).map(|_| rng.gen_range(-30i16..=30)).collect(),
        (0..128)
            .map(|c| {
                if c % 4 == 0 {
                    Direction::Le
                } else {
                    Direction::Ge
                }
            })
            .collect(),
    )?;
    let k = KernelDims::new(128, 3, 3, 128);
    let w: Vec<f32> = (0..k.element_count()?)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let kernels = pack_weights(&w, k)?;
    let spec = ConvSpec::same(3);

    let t = Instant::now();
    let staged = conv_staged(&x, Some(&thr), &kernels, &spec)?;
    println!(
        "{:<16} {:>8.2} ms",
        "staged",
        t.elapsed().as_secs_f64() * 1e3
    );
    for tile in [
        TileHint::Rows(1),
        TileHint::Rows(4),
        TileHint::WholeImage,
        TileHint::Auto,
    ] {
        let t = Instant::now();
        let fused = conv_fused(&x, Some(&thr), &kernels, &spec, tile)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        println!(
            "{:<16} {ms:>8.2} ms  identical: {}",
            format!("{tile:?}"),
            fused == staged
        );
    }
    Ok(())
}
