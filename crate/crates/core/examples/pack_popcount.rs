//! Pack a ±1 vector into words and recover its dot product from XNOR + popcount.

use bitflow::bitcore::{pack_activations, popcount_match, tail_mask, words_for};
use bitflow::{Nhwc, Tensor};

fn main() -> bitflow::Result<()> {
    let n = 100;
    let a: Vec<f32> = (0..n)
        .map(|i| if i % 3 == 0 { -1.0 } else { 1.0 })
        .collect();
    let b: Vec<f32> = (0..n)
        .map(|i| if i % 5 == 0 { -1.0 } else { 1.0 })
        .collect();

    // one pixel with n channels
    let pa = pack_activations(&Tensor::from_vec(Nhwc::new(1, 1, 1, n), a.clone())?)?;
    let pb = pack_activations(&Tensor::from_vec(Nhwc::new(1, 1, 1, n), b.clone())?)?;
    println!(
        "{n} channels -> {} words, last word mask {:#018x}",
        words_for(n),
        tail_mask(n)
    );

    let matches = popcount_match(pa.words(), pb.words())?;
    // pad bits are zero in both operands and always match
    let pad = (pa.words_per_pixel() * 64 - n) as i64;
    let dot = 2 * (matches as i64 - pad) - n as i64;
    let direct: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    println!("matches {matches}, pad {pad}, dot {dot}, direct {direct}");
    assert_eq!(dot, direct as i64);
    Ok(())
}
