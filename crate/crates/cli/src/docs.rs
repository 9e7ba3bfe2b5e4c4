//! TOML documents read and written by the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use haan_core::calibrate::{AnchorPolicy, Calibration, IsdPredictor};
use haan_core::datapath::NormKind;
use haan_core::numerics::NumericFormat;
use haan_core::sim::AccelConfig;

use crate::report::real;

pub const SCHEMA_VERSION: u32 = 1;

/// Parses a TOML document, reporting the offending field path on failure.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let field = if path == "." { String::new() } else { format!(":{path}") };
        haan_core::Error::Config {
            path: format!("{origin}{field}"),
            msg: inner.message().trim().to_string(),
        }
        .into()
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(haan_core::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    parse(&text, &path.display().to_string())
}

fn check_schema(found: u32, origin: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(haan_core::Error::Config {
            path: format!("{origin}:schema_version"),
            msg: format!("expected {SCHEMA_VERSION}, found {found}"),
        }
        .into());
    }
    Ok(())
}

/// Calibrated ISD predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorDocument {
    pub schema_version: u32,
    pub model_id: String,
    pub kind: NormKind,
    pub skip_start: usize,
    pub skip_end: usize,
    pub decay: f64,
    pub min_cor: f64,
    pub min_gap: usize,
    pub threshold: f64,
    #[serde(default)]
    pub anchor: AnchorPolicy,
    pub anchor_log_isd: f64,
    pub trace_digest: String,
}

impl PredictorDocument {
    pub fn new(
        model_id: &str,
        kind: NormKind,
        cal: &Calibration,
        min_gap: usize,
        threshold: f64,
        trace_digest: String,
    ) -> Self {
        let p = cal.predictor;
        Self {
            schema_version: SCHEMA_VERSION,
            model_id: model_id.to_string(),
            kind,
            skip_start: p.skip_start,
            skip_end: p.skip_end,
            decay: p.decay,
            min_cor: cal.min_cor,
            min_gap,
            threshold,
            anchor: p.anchor,
            anchor_log_isd: p.anchor_log_isd,
            trace_digest,
        }
    }

    pub fn predictor(&self) -> IsdPredictor {
        IsdPredictor {
            skip_start: self.skip_start,
            skip_end: self.skip_end,
            decay: self.decay,
            anchor: self.anchor,
            anchor_log_isd: self.anchor_log_isd,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: Self = load(path)?;
        check_schema(doc.schema_version, &path.display().to_string())?;
        doc.predictor().validate(None)?;
        Ok(doc)
    }

    /// Reals are written with 17 significant digits.
    pub fn to_toml(&self) -> String {
        let anchor = match self.anchor {
            AnchorPolicy::Live => "live",
            AnchorPolicy::CalibrationMean => "calibration_mean",
        };
        let mut s = String::new();
        let _ = writeln!(s, "schema_version = {}", self.schema_version);
        let _ = writeln!(s, "model_id = {}", toml_string(&self.model_id));
        let _ = writeln!(s, "kind = \"{}\"", kind_name(self.kind));
        let _ = writeln!(s, "skip_start = {}", self.skip_start);
        let _ = writeln!(s, "skip_end = {}", self.skip_end);
        let _ = writeln!(s, "decay = {}", real(self.decay));
        let _ = writeln!(s, "min_cor = {}", real(self.min_cor));
        let _ = writeln!(s, "min_gap = {}", self.min_gap);
        let _ = writeln!(s, "threshold = {}", real(self.threshold));
        let _ = writeln!(s, "anchor = \"{anchor}\"");
        let _ = writeln!(s, "anchor_log_isd = {}", real(self.anchor_log_isd));
        let _ = writeln!(s, "trace_digest = \"{}\"", self.trace_digest);
        s
    }
}

pub fn kind_name(kind: NormKind) -> &'static str {
    match kind {
        NormKind::LayerNorm => "layernorm",
        NormKind::RmsNorm => "rmsnorm",
    }
}

/// Basic TOML string with escapes.
pub fn toml_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 || c == '\u{7f}' => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Published skip range kept with a preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublishedRange {
    pub skip_start: usize,
    pub skip_end: usize,
}

/// Simulator configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDocument {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    #[serde(default)]
    pub kind: NormKind,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub accel: AccelConfig,
    #[serde(default)]
    pub published: Option<PublishedRange>,
}

fn schema_v1() -> u32 {
    SCHEMA_VERSION
}

impl SimDocument {
    pub fn from_str(text: &str, origin: &str) -> Result<Self> {
        let doc: Self = parse(text, origin)?;
        check_schema(doc.schema_version, origin)?;
        doc.accel.validate()?;
        if let Some(spec) = doc.accel.precision.fixed {
            spec.validate()?;
        }
        if let Some(r) = doc.published {
            if r.skip_start >= r.skip_end {
                return Err(haan_core::Error::Config {
                    path: format!("{origin}:published.skip_end"),
                    msg: "must exceed skip_start".into(),
                }
                .into());
            }
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(haan_core::Error::from)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_str(&text, &path.display().to_string())
    }
}

pub const PRESETS: &[(&str, &str)] = &[
    ("llama-7b", include_str!("../presets/llama-7b.toml")),
    ("opt-2.7b", include_str!("../presets/opt-2.7b.toml")),
    ("gpt2-1.5b", include_str!("../presets/gpt2-1.5b.toml")),
];

pub fn preset(name: &str) -> Result<SimDocument> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
            crate::exit::usage(format!("unknown preset `{name}` (known: {})", names.join(", ")))
        })?;
    SimDocument::from_str(text, &format!("preset {name}"))
}

/// Sweep grid: the cartesian product of the listed values.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDocument {
    #[serde(default)]
    pub kind: NormKind,
    pub p_d: Vec<usize>,
    pub p_n: Vec<usize>,
    pub format: Vec<NumericFormat>,
    /// Omitted means full-length statistics only.
    #[serde(default)]
    pub n_sub: Option<Vec<usize>>,
    #[serde(default = "one_replica")]
    pub pipeline_depth: Vec<usize>,
    /// Base settings for every point.
    #[serde(default)]
    pub base: AccelConfig,
}

fn one_replica() -> Vec<usize> {
    vec![1]
}

/// Settings for `verify`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyDocument {
    pub sigma: f64,
    pub newton_iters: u32,
    pub fixed_spec: haan_core::numerics::FixedPointSpec,
    pub samples: usize,
    pub vectors: usize,
}

impl Default for VerifyDocument {
    fn default() -> Self {
        Self {
            sigma: haan_core::invsqrt::DEFAULT_SIGMA,
            newton_iters: 1,
            fixed_spec: haan_core::numerics::FixedPointSpec::Q16_16,
            samples: 100_000,
            vectors: 200,
        }
    }
}

/// Inputs resolved relative to the current directory.
pub fn must_exist(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(crate::exit::usage(format!("{} does not exist", path.display())));
    }
    Ok(path.to_path_buf())
}
