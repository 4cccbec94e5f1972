//! Latency harness, model conversion and oracle validation behind the
//! `bitflow` command line.
//!
//! Every timed variant is first checked against the 32-bit staged output;
//! no timing is produced for outputs that disagree. Ratios compare medians.

mod config;
mod convert;
mod latency;
mod validate;

pub use config::{
    default_suite, parse_configs, parse_variants, BenchConfig, BenchOverrides, LayerShape, Variant,
    MIN_REPEATS,
};
pub use convert::{cmd_convert, convert, ConvertSummary};
pub use latency::{
    cmd_bench, BenchReport, BenchRow, Timing, Workload, CSV_HEADER, CSV_SCHEMA_VERSION,
};
pub use validate::{
    cmd_validate, Sizes, SuiteResult, ValidateOptions, ValidateReport, FUSED_TILES,
};

use crate::error::{BitflowError, Result};

pub const DEFAULT_SEED: u64 = 0xB17F10;
pub const SEED_ENV: &str = "BITFLOW_SEED";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Decimal or `0x`-prefixed hexadecimal.
pub fn parse_seed(s: &str) -> Result<u64> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|_| BitflowError::Config(format!("invalid seed {s:?}")))
}

/// Seed from `BITFLOW_SEED` if set, else [`DEFAULT_SEED`].
pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => parse_seed(&v),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_SEED),
        Err(e) => Err(BitflowError::Config(format!("{SEED_ENV}: {e}"))),
    }
}
