pub mod calibrate;
pub mod gen_trace;
pub mod norm;
pub mod sim;
pub mod sweep;
pub mod verify;

use std::path::Path;

use anyhow::{Context, Result};
use haan_core::datapath::NormKind;
use haan_core::trace::ActivationTrace;

use crate::docs::{self, PredictorDocument};
use crate::exit;

pub fn load_trace(path: &Path) -> Result<ActivationTrace> {
    docs::must_exist(path)?;
    ActivationTrace::read_file(path).with_context(|| format!("reading trace {}", path.display()))
}

/// Loads an optional predictor and settles the normalization kind.
pub fn predictor_and_kind(
    path: Option<&Path>,
    kind: Option<NormKind>,
) -> Result<(Option<PredictorDocument>, NormKind)> {
    let Some(path) = path else {
        return Ok((None, kind.unwrap_or_default()));
    };
    docs::must_exist(path)?;
    let doc = PredictorDocument::load(path)?;
    if let Some(k) = kind {
        if k != doc.kind {
            return Err(exit::usage(format!(
                "--kind {} conflicts with the predictor's kind {}",
                docs::kind_name(k),
                docs::kind_name(doc.kind)
            )));
        }
    }
    let kind = doc.kind;
    Ok((Some(doc), kind))
}
