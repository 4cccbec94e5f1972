//! Offline lowering of float BN model files.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;

use crate::error::{BitflowError, Result};
use crate::netgraph::{
    convert_model, load_model, save_model, ConvertMode, Diagnostic, Layer, Model,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvertSummary {
    pub converted_layers: usize,
    pub diagnostics: Vec<Diagnostic>,
}

impl ConvertSummary {
    /// Distinct `(layer, channel)` pairs flagged by any diagnostic.
    pub fn warning_count(&self) -> usize {
        let mut seen = BTreeSet::new();
        for d in &self.diagnostics {
            let (Diagnostic::ConstantChannels { layer, channels }
            | Diagnostic::ZeroGamma { layer, channels }) = d;
            seen.extend(channels.iter().map(|&c| (*layer, c)));
        }
        seen.len()
    }
}

/// Convert every float BN layer of an in-memory model and check the result.
pub fn convert(m: &Model, mode: ConvertMode) -> Result<(Model, ConvertSummary)> {
    let converted_layers = m
        .layers
        .iter()
        .filter(|l| matches!(l, Layer::FloatBn(_)))
        .count();
    if converted_layers == 0 {
        return Err(BitflowError::MalformedGraph(
            "model has no float BN layers to convert".into(),
        ));
    }
    let (out, diagnostics) = convert_model(m, mode)?;
    out.validate()?;
    for d in &diagnostics {
        warn!("{d}");
    }
    Ok((
        out,
        ConvertSummary {
            converted_layers,
            diagnostics,
        },
    ))
}

/// Load, convert and save a model file.
pub fn cmd_convert(
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    mode: ConvertMode,
) -> Result<ConvertSummary> {
    let (out, summary) = convert(&load_model(input)?, mode)?;
    save_model(output, &out)?;
    Ok(summary)
}
