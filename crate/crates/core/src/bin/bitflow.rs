use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bitflow::bench::{
    cmd_bench, cmd_convert, cmd_validate, default_suite, parse_configs, parse_seed, parse_variants,
    seed_from_env, BenchOverrides, Sizes, ValidateOptions, Variant, EXIT_MISMATCH, EXIT_PASS,
    EXIT_USAGE,
};
use bitflow::netgraph::ConvertMode;
use bitflow::BitflowError;

/// Binary convolution benchmarks, model conversion and oracle validation.
///
/// Exit codes: 0 pass, 1 mismatch, 2 usage or input error.
#[derive(Parser)]
#[command(name = "bitflow", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time conv macro-blocks after checking every variant's output.
    Bench {
        /// key=value stanzas; the built-in ResNet-18 body suite when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of i8-fused, i32-staged, float-reference.
        #[arg(long, value_parser = parse_variants_arg)]
        variants: Option<VariantList>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Lower float BN layers to thresholds or 16-bit tables.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// vgg-threshold or resnet-qbn.
        #[arg(long)]
        mode: ConvertMode,
    },
    /// Run the oracle-equivalence sweeps.
    Validate {
        #[arg(long, default_value = "full")]
        sizes: Sizes,
        /// Overrides BITFLOW_SEED.
        #[arg(long, value_parser = parse_seed_arg)]
        seed: Option<u64>,
        #[arg(long, hide = true, default_value_t = 0, allow_hyphen_values = true)]
        inject_pad_fault: i64,
    },
}

/// One comma-separated `--variants` value.
#[derive(Clone)]
struct VariantList(Vec<Variant>);

fn parse_variants_arg(s: &str) -> Result<VariantList, String> {
    parse_variants(s)
        .map(VariantList)
        .map_err(|e| e.to_string())
}

fn parse_seed_arg(s: &str) -> Result<u64, String> {
    parse_seed(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> bitflow::Result<i32> {
    match cli.cmd {
        Cmd::Bench {
            config,
            variants,
            repeats,
            warmup,
            threads,
            csv,
        } => {
            let mut configs = match config {
                Some(p) => parse_configs(&std::fs::read_to_string(p)?)?,
                None => default_suite(),
            };
            let o = BenchOverrides {
                variants: variants.map(|v| v.0),
                repeats,
                warmup,
                threads,
            };
            configs.iter_mut().for_each(|c| o.apply(c));
            let report = cmd_bench(&configs, seed_from_env()?)?;
            print!("{report}");
            let (wins, n) = report.median_wins(Variant::I8Fused, Variant::I32Staged);
            if n > 0 {
                println!("i8-fused median <= i32-staged median on {wins}/{n} configs");
            }
            if let Some(p) = csv {
                report.write_csv(BufWriter::new(File::create(p)?))?;
            }
            Ok(EXIT_PASS)
        }
        Cmd::Convert {
            input,
            output,
            mode,
        } => {
            let s = cmd_convert(&input, &output, mode)?;
            for d in &s.diagnostics {
                println!("warning: {d}");
            }
            println!(
                "converted {} layer(s), {} warning(s): {}",
                s.converted_layers,
                s.warning_count(),
                output.display()
            );
            Ok(EXIT_PASS)
        }
        Cmd::Validate {
            sizes,
            seed,
            inject_pad_fault,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => seed_from_env()?,
            };
            let report = cmd_validate(&ValidateOptions {
                sizes,
                seed,
                pad_correction_fault: inject_pad_fault,
            })?;
            println!("seed {seed:#x}");
            println!("{report}");
            Ok(if report.passed() {
                EXIT_PASS
            } else {
                EXIT_MISMATCH
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_USAGE as u8
            } else {
                EXIT_PASS as u8
            });
        }
    };
    let code = match run(cli) {
        Ok(c) => c,
        Err(e @ BitflowError::Mismatch(_)) => {
            eprintln!("error: {e}");
            EXIT_MISMATCH
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    };
    ExitCode::from(code as u8)
}
