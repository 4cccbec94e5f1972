//! Replace BN + sign by one integer comparison per channel.

use bitflow::bnquant::{bn_float, compute_threshold, BnParams};

fn main() -> bitflow::Result<()> {
    // channel 1 has a negative gamma (decision flips), channel 3 can never fire
    let p = BnParams::new(
        vec![1.5, -0.8, 2.0, 0.5],
        vec![0.3, 0.1, -1.0, -90.0],
        vec![4.2, -10.0, 0.0, 0.0],
        vec![2.0, 1.0, 0.5, 1.0],
    )?;
    let r = compute_threshold(&p)?;
    for c in 0..p.channels() {
        let tau = p.mu[c] - p.beta[c] * p.sigma[c] / p.gamma[c];
        println!(
            "channel {c}: real tau {tau:>8.3} -> {:?} {:>4}",
            r.params.direction()[c],
            r.params.tau()[c]
        );
    }
    println!("constant channels: {:?}", r.constant);

    let agree = (-127..=127).all(|x| {
        (0..p.channels()).all(|c| r.params.decide(c, x) == (bn_float(x as f64, &p, c) >= 0.0))
    });
    println!("thresholds reproduce sign(BN(x)) for all x in [-127, 127]: {agree}");
    Ok(())
}
