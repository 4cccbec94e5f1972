//! Exact and saturating binary convolution on a wide layer.
//!
//! A 3x3 conv over 256 channels can reach sums of ±2304, far outside the
//! 8-bit range. `conv_i8` accumulates exactly and saturates once.

use bitflow::binconv::{conv_i32, conv_i8, ConvSpec};
use bitflow::bitcore::{pack_activations, pack_weights};
use bitflow::{KernelDims, Nhwc, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bitflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = Nhwc::new(1, 8, 8, 256);
    // correlated input so some sums leave [-127, 127]
    let base: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f32> = (0..64 * 256)
        .map(|i| base[i % 256] + rng.gen_range(-0.6..0.6))
        .collect();
    let k = KernelDims::new(16, 3, 3, 256);
    let w: Vec<f32> = (0..k.element_count()?)
        .map(|i| {
            if i % 16 < 12 {
                base[i % 256]
            } else {
                rng.gen_range(-1.0..1.0)
            }
        })
        .collect();

    let bits = pack_activations(&Tensor::from_vec(d, x)?)?;
    let kernels = pack_weights(&w, k)?;
    let spec = ConvSpec::same(3);
    let wide = conv_i32(&bits, &kernels, &spec)?;
    let narrow = conv_i8(&bits, &kernels, &spec)?;

    let (lo, hi) = wide
        .data()
        .iter()
        .fold((i32::MAX, i32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let saturated = wide.data().iter().filter(|v| v.abs() > 127).count();
    println!("output {:?}", wide.dims());
    println!(
        "32-bit sums span [{lo}, {hi}], {saturated} of {} saturate",
        wide.data().len()
    );
    let law = wide
        .data()
        .iter()
        .zip(narrow.data())
        .all(|(&s, &q)| s.clamp(-127, 127) == q as i32);
    println!("conv_i8 == clamp(conv_i32, -127, 127): {law}");
    Ok(())
}
