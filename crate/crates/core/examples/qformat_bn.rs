//! Quantize BN to a shared 16-bit Q-format, fold it and run it on 8-bit features.

use bitflow::bnquant::{bn_float, qformat_fit, quantize_bn, BnParams};

fn main() -> bitflow::Result<()> {
    let p = BnParams::new(
        vec![0.91, -1.37, 2.05],
        vec![0.12, -3.4, 7.9],
        vec![-14.6, 3.25, 40.1],
        vec![6.3, 0.72, 12.5],
    )?;
    for v in [0.4, 3.0, 40.1, 40000.0] {
        let f = qformat_fit(&[&[v]])?;
        println!("max |w| {v:>8}: Q{}.{}", f.range_bits(), f.frac_bits());
    }

    let q = quantize_bn(&p)?;
    let t = &q.tables;
    println!(
        "layer format Q{}.{} (step {}), folded Q{}.{}",
        t.format.range_bits(),
        t.format.frac_bits(),
        t.format.resolution(),
        t.fold_format.range_bits(),
        t.fold_format.frac_bits()
    );
    for c in 0..p.channels() {
        let d = t.dequantized();
        println!(
            "channel {c}: gamma {} -> {} ({:+.2e}), mu {} -> {} ({:+.2e})",
            p.gamma[c],
            t.gamma[c],
            d.gamma[c] - p.gamma[c],
            p.mu[c],
            t.mu[c],
            d.mu[c] - p.mu[c]
        );
    }

    let mut worst = 0f64;
    for x in -127i8..=127 {
        for c in 0..p.channels() {
            let exact = bn_float(x as f64, &p, c).clamp(-127.0, 127.0);
            worst = worst.max((t.apply(c, x) as f64 - exact).abs());
        }
    }
    println!("integer BN vs float BN over all 8-bit inputs: max |diff| {worst:.3}");
    println!("serialized tables: {} bytes", t.to_bytes().len());
    Ok(())
}
