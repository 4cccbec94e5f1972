//! Time the fused 8-bit path against the staged 32-bit path on a few layers.
//!
//! `bitflow bench` runs the full nine-layer suite with CSV output.

use bitflow::bench::{cmd_bench, parse_configs, Variant};

const CONFIGS: &str = "
id = early
h = 56
w = 56
c_in = 64

id = middle
h = 14
w = 14
c_in = 256
variants = i8-fused,i32-staged,float-reference
repeats = 5
warmup = 1

id = late-s2
h = 14
w = 14
c_in = 256
c_out = 512
stride = 2
";

fn main() -> bitflow::Result<()> {
    let configs = parse_configs(CONFIGS)?;
    let report = cmd_bench(&configs, 0xB17F10)?;
    print!("{report}");
    let (wins, n) = report.median_wins(Variant::I8Fused, Variant::I32Staged);
    println!("i8-fused at least as fast on {wins}/{n} layers");
    println!();
    report.write_csv(std::io::stdout().lock())?;
    Ok(())
}
