//! Activation traces: the `HAANTRC1` container, a synthetic generator and
//! ISD-table extraction.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "HAANTRC1"                      8 bytes
//! version = 1                     u32
//! layer_count, embedding_dim      u32, u32
//! sample_count                    u32
//! model_id, then one label/layer  u32 byte length + UTF-8 bytes each
//! payload                         f32, sample-major, then layer, then element
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibrate::IsdTable;
use crate::datapath::NormKind;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::norm::reference_isd;

pub const MAGIC: &[u8; 8] = b"HAANTRC1";
pub const VERSION: u32 = 1;

/// Longest label accepted when reading.
const MAX_LABEL_BYTES: u32 = 1 << 16;

/// Per-layer normalization inputs for a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    model_id: String,
    layer_labels: Vec<String>,
    embedding_dim: usize,
    sample_count: usize,
    data: Vec<f32>,
}

impl ActivationTrace {
    /// `data` is laid out sample-major, then layer, then element.
    pub fn new(
        model_id: impl Into<String>,
        layer_labels: Vec<String>,
        embedding_dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let layer_count = layer_labels.len();
        if layer_count == 0 || embedding_dim == 0 {
            return Err(Error::InvalidTrace(
                "layer_count and embedding_dim must be positive".into(),
            ));
        }
        let per_sample = layer_count * embedding_dim;
        if !data.len().is_multiple_of(per_sample) {
            return Err(Error::DimensionMismatch(format!(
                "{} payload values do not fill whole samples of {layer_count} x {embedding_dim}",
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = layer_labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::InvalidTrace(format!("duplicate layer label `{dup}`")));
        }
        Ok(Self {
            model_id: model_id.into(),
            layer_labels,
            embedding_dim,
            sample_count: data.len() / per_sample,
            data,
        })
    }

    /// Builds a trace from `[sample][layer][element]` vectors.
    pub fn from_vectors(
        model_id: impl Into<String>,
        layer_labels: Vec<String>,
        samples: &[Vec<Vec<f32>>],
    ) -> Result<Self> {
        let dim = samples
            .first()
            .and_then(|s| s.first())
            .map_or(0, Vec::len);
        let mut data = Vec::new();
        for (s, sample) in samples.iter().enumerate() {
            if sample.len() != layer_labels.len() {
                return Err(Error::DimensionMismatch(format!(
                    "sample {s} has {} layers, expected {}",
                    sample.len(),
                    layer_labels.len()
                )));
            }
            for (l, v) in sample.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "sample {s} layer {l} has {} elements, expected {dim}",
                        v.len()
                    )));
                }
                data.extend_from_slice(v);
            }
        }
        Self::new(model_id, layer_labels, dim, data)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn layer_labels(&self) -> &[String] {
        &self.layer_labels
    }

    pub fn layer_count(&self) -> usize {
        self.layer_labels.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn vector(&self, sample: usize, layer: usize) -> &[f32] {
        let start = (sample * self.layer_count() + layer) * self.embedding_dim;
        &self.data[start..start + self.embedding_dim]
    }

    pub fn vector_f64(&self, sample: usize, layer: usize) -> Vec<f64> {
        self.vector(sample, layer).iter().map(|&v| v as f64).collect()
    }

    /// The flat payload.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::InvalidTrace(format!("{what} {v} exceeds u32")))
        };
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            dim(self.layer_count(), "layer_count")?,
            dim(self.embedding_dim, "embedding_dim")?,
            dim(self.sample_count, "sample_count")?,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in std::iter::once(&self.model_id).chain(&self.layer_labels) {
            w.write_all(&dim(s.len(), "label length")?.to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.embedding_dim * 4);
        for chunk in self.data.chunks(self.embedding_dim) {
            buf.clear();
            chunk.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader { inner: r, offset: 0 };
        let mut magic = [0u8; 8];
        r.fill(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, not a HAANTRC1 trace".into(),
            });
        }
        let version_at = r.offset;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: version_at,
                msg: format!("unsupported version {version}"),
            });
        }
        let header_at = r.offset;
        let layers = r.u32("layer_count")? as usize;
        let dim = r.u32("embedding_dim")? as usize;
        let samples = r.u32("sample_count")? as usize;
        if layers == 0 || dim == 0 {
            return Err(Error::Format {
                offset: header_at,
                msg: "layer_count and embedding_dim must be positive".into(),
            });
        }
        let model_id = r.string()?;
        let labels = (0..layers).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let total = layers
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(samples))
            .ok_or_else(|| Error::Format {
                offset: header_at,
                msg: "payload size overflows".into(),
            })?;
        let mut data = Vec::with_capacity(total.min(1 << 24));
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..samples * layers {
            r.fill(&mut buf, "payload")?;
            data.extend(
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
        }
        let mut extra = [0u8; 1];
        let end = r.offset;
        if r.inner.read(&mut extra)? != 0 {
            return Err(Error::Format {
                offset: end,
                msg: "trailing bytes after payload".into(),
            });
        }
        ActivationTrace::new(model_id, labels, dim, data).map_err(|e| Error::Format {
            offset: header_at,
            msg: e.to_string(),
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + done as u64,
                        msg: format!("truncated {what}"),
                    })
                }
                Ok(n) => done += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.offset;
        let len = self.u32("label length")?;
        if len > MAX_LABEL_BYTES {
            return Err(Error::Format {
                offset: at,
                msg: format!("label length {len} too large"),
            });
        }
        let mut b = vec![0u8; len as usize];
        self.fill(&mut b, "label")?;
        String::from_utf8(b).map_err(|_| Error::Format {
            offset: at + 4,
            msg: "label is not UTF-8".into(),
        })
    }
}

/// Planted per-layer log-ISD profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IsdProfile {
    /// `base + slope * (l - start)` on `[start, end]`; a zigzag plateau
    /// (not log-linear) before and after.
    LogLinearTail {
        start: usize,
        end: usize,
        slope: f64,
        #[serde(default)]
        base: f64,
    },
    /// One log-ISD per layer.
    Table { values: Vec<f64> },
    /// Piecewise-linear through `(layer, log_isd)` knots, constant beyond.
    Custom { knots: Vec<(usize, f64)> },
}

/// Amplitude of the plateau zigzag outside a log-linear tail.
const PLATEAU_ZIGZAG: f64 = 0.25;

impl IsdProfile {
    pub fn log_isd(&self, layer: usize) -> f64 {
        match self {
            IsdProfile::LogLinearTail { start, end, slope, base } => {
                let zig = |l: usize| match l % 3 {
                    0 => PLATEAU_ZIGZAG,
                    1 => -PLATEAU_ZIGZAG,
                    _ => 0.5 * PLATEAU_ZIGZAG,
                };
                if layer < *start {
                    base + zig(layer)
                } else if layer <= *end {
                    base + slope * (layer - start) as f64
                } else {
                    base + slope * (end - start) as f64 + zig(layer)
                }
            }
            IsdProfile::Table { values } => values[layer],
            IsdProfile::Custom { knots } => {
                let first = knots[0];
                if layer <= first.0 {
                    return first.1;
                }
                for w in knots.windows(2) {
                    let ((l0, v0), (l1, v1)) = (w[0], w[1]);
                    if layer <= l1 {
                        let t = (layer - l0) as f64 / (l1 - l0) as f64;
                        return v0 + t * (v1 - v0);
                    }
                }
                knots[knots.len() - 1].1
            }
        }
    }

    fn validate(&self, layer_count: usize) -> Result<()> {
        match self {
            IsdProfile::LogLinearTail { start, end, slope, base } => {
                if !(start < end && *end < layer_count) {
                    return Err(Error::config(
                        "profile",
                        format!("need start < end < layer_count, got {start}, {end}, {layer_count}"),
                    ));
                }
                if !slope.is_finite() || !base.is_finite() {
                    return Err(Error::config("profile.slope", "must be finite"));
                }
            }
            IsdProfile::Table { values } => {
                if values.len() != layer_count || values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config(
                        "profile.values",
                        format!("need {layer_count} finite values"),
                    ));
                }
            }
            IsdProfile::Custom { knots } => {
                if knots.is_empty()
                    || knots.windows(2).any(|w| w[0].0 >= w[1].0)
                    || knots.iter().any(|k| !k.1.is_finite())
                {
                    return Err(Error::config(
                        "profile.knots",
                        "need strictly increasing layers and finite values",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTraceSpec {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub layer_count: usize,
    pub embedding_dim: usize,
    pub sample_count: usize,
    pub profile: IsdProfile,
    /// Standard deviation of the per-vector log-ISD jitter.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Rescale each vector to zero mean and exactly the planted deviation.
    #[serde(default)]
    pub exact_moments: bool,
    /// Constant added to every element.
    #[serde(default)]
    pub offset: f64,
}

fn default_model_id() -> String {
    "synthetic".into()
}

impl SyntheticTraceSpec {
    pub fn log_linear_tail(
        layer_count: usize,
        embedding_dim: usize,
        sample_count: usize,
        (start, end, slope): (usize, usize, f64),
    ) -> Self {
        Self {
            model_id: default_model_id(),
            layer_count,
            embedding_dim,
            sample_count,
            profile: IsdProfile::LogLinearTail { start, end, slope, base: 0.0 },
            noise_sigma: 0.0,
            exact_moments: false,
            offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.embedding_dim < 2 || self.sample_count == 0 {
            return Err(Error::config(
                "layer_count",
                "need layer_count >= 1, embedding_dim >= 2, sample_count >= 1",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !self.offset.is_finite() {
            return Err(Error::config("offset", "must be finite"));
        }
        self.profile.validate(self.layer_count)
    }
}

/// Draws a trace whose layer-`l` vectors are `N(offset, sigma_l^2)` with
/// `ln(1/sigma_l)` from the profile plus jitter. Sample `s` uses ChaCha
/// stream `s`, so output does not depend on `exec`.
pub fn generate_synthetic(spec: &SyntheticTraceSpec, seed: u64, exec: Exec) -> Result<ActivationTrace> {
    spec.validate()?;
    let n = spec.embedding_dim;
    let samples = exec::map_range(exec, spec.sample_count, |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let mut out = Vec::with_capacity(spec.layer_count * n);
        for l in 0..spec.layer_count {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let log_isd = spec.profile.log_isd(l) + spec.noise_sigma * jitter;
            let sigma = libm::exp(-log_isd);
            let mut g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            if spec.exact_moments {
                let mean = g.iter().sum::<f64>() / n as f64;
                g.iter_mut().for_each(|v| *v -= mean);
                let sd = (g.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
                g.iter_mut().for_each(|v| *v /= sd);
            }
            out.extend(g.iter().map(|v| (spec.offset + sigma * v) as f32));
        }
        out
    });
    let labels = (0..spec.layer_count).map(|l| format!("norm{l}")).collect();
    ActivationTrace::new(spec.model_id.clone(), labels, n, samples.concat())
}

/// Natural-log ISD of every `(sample, layer)` vector, computed in FP64.
pub fn extract_isd_table(trace: &ActivationTrace, kind: NormKind, exec: Exec) -> Result<IsdTable> {
    let rows = exec::try_map(exec, &(0..trace.sample_count()).collect::<Vec<_>>(), |&s| {
        (0..trace.layer_count())
            .map(|l| match reference_isd(&trace.vector_f64(s, l), kind) {
                Ok(isd) => Ok(libm::log(isd)),
                Err(Error::ZeroVariance) => Err(Error::ZeroVarianceAt { sample: s, layer: l }),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    IsdTable::new(rows)
}
