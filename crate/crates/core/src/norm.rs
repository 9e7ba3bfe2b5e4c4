//! Exact and approximate LayerNorm / RMSNorm.
//!
//! The reference functions compute in f64 with compensated sums (roughly
//! double-double accumulation) and serve as the oracle. The approximate path
//! runs through [`Datapath`]: one-pass statistics, optional subsampling to the
//! first `n_sub` elements, the fixed-point inverter, or a predicted ISD.

use serde::{Deserialize, Serialize};

use crate::datapath::{Datapath, NormOutput, RawIsd, RawStats};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::numerics::NumericFormat;
use crate::calibrate::IsdPredictor;
use crate::trace::ActivationTrace;

pub use crate::datapath::{NormKind, Precision};

/// Where the ISD of a layer comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsdMode {
    #[default]
    Compute,
    Predicted,
}

/// One normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormConfig {
    pub kind: NormKind,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub format: NumericFormat,
    pub n_sub: usize,
    pub isd_mode: IsdMode,
    pub precision: Precision,
}

impl NormConfig {
    /// Identity affine (`alpha = 1`, `beta = 0`), no subsampling, FP64 backing.
    pub fn new(kind: NormKind, n: usize) -> Self {
        Self {
            kind,
            alpha: vec![1.0; n],
            beta: vec![0.0; n],
            format: NumericFormat::Fp64,
            n_sub: n,
            isd_mode: IsdMode::Compute,
            precision: Precision::default(),
        }
    }

    pub fn with_format(mut self, format: NumericFormat) -> Self {
        self.format = format;
        self
    }

    pub fn with_n_sub(mut self, n_sub: usize) -> Self {
        self.n_sub = n_sub;
        self
    }

    pub fn with_affine(mut self, alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn with_mode(mut self, mode: IsdMode) -> Self {
        self.isd_mode = mode;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.beta.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "alpha has {n} entries, beta {}",
                self.beta.len()
            )));
        }
        if n == 0 {
            return Err(Error::DimensionMismatch("empty layer".into()));
        }
        if self.n_sub == 0 || self.n_sub > n {
            return Err(Error::config(
                "n_sub",
                format!("must satisfy 1 <= n_sub <= N = {n}, got {}", self.n_sub),
            ));
        }
        Ok(())
    }

    pub fn datapath(&self) -> Result<Datapath> {
        Datapath::new(self.format, self.kind, &self.precision)
    }

    /// Elements feeding the mean. Equal to `n_sub` unless `full_mean` is set.
    pub fn mean_count(&self) -> usize {
        if self.precision.full_mean {
            self.n()
        } else {
            self.n_sub
        }
    }
}

/// Statistics of one input vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputStats {
    pub mean: f64,
    pub variance: f64,
    /// `1/sigma` (or `1/r` for RMSNorm); infinite when the variance is zero.
    pub isd: f64,
    pub sample_count: usize,
    /// Cancellation produced a negative variance that was clamped to zero.
    pub clamped: bool,
    pub saturated: bool,
    pub(crate) raw: RawStats,
    pub(crate) raw_isd: Option<RawIsd>,
}

/// ISD handed to [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IsdSource<'a> {
    Stats(&'a InputStats),
    Predicted(f64),
}

/// Compensated accumulator (Neumaier).
#[derive(Debug, Default, Clone, Copy)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut acc = Compensated::default();
    xs.for_each(|x| acc.add(x));
    acc.value()
}

/// Reference mean and standard deviation (two-pass, corrected).
fn reference_moments(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = compensated_sum(z.iter().copied()) / n;
    let d_sum = compensated_sum(z.iter().map(|v| v - mean));
    let sq = compensated_sum(z.iter().map(|v| (v - mean) * (v - mean)));
    let var = (sq - d_sum * d_sum / n) / n;
    (mean + d_sum / n, var.max(0.0).sqrt())
}

fn reference_rms(z: &[f64]) -> f64 {
    (compensated_sum(z.iter().map(|v| v * v)) / z.len() as f64).sqrt()
}

fn check_affine(z: &[f64], cfg: &NormConfig) -> Result<()> {
    if z.len() != cfg.alpha.len() || z.len() != cfg.beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} elements, alpha {}, beta {}",
            z.len(),
            cfg.alpha.len(),
            cfg.beta.len()
        )));
    }
    Ok(())
}

/// `alpha * (z - mu) / sigma + beta` in high precision.
pub fn reference_layernorm(z: &[f64], cfg: &NormConfig) -> Result<Vec<f64>> {
    check_affine(z, cfg)?;
    if z.len() < 2 {
        return Err(Error::DimensionMismatch("LayerNorm needs N >= 2".into()));
    }
    let (mean, sigma) = reference_moments(z);
    if sigma == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(z.iter()
        .zip(cfg.alpha.iter().zip(&cfg.beta))
        .map(|(v, (a, b))| a * ((v - mean) / sigma) + b)
        .collect())
}

/// `alpha * z / rms(z) + beta` in high precision.
pub fn reference_rmsnorm(z: &[f64], cfg: &NormConfig) -> Result<Vec<f64>> {
    check_affine(z, cfg)?;
    let r = reference_rms(z);
    if r == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(z.iter()
        .zip(cfg.alpha.iter().zip(&cfg.beta))
        .map(|(v, (a, b))| a * (v / r) + b)
        .collect())
}

/// Reference normalization for either kind.
pub fn reference_norm(z: &[f64], cfg: &NormConfig) -> Result<Vec<f64>> {
    match cfg.kind {
        NormKind::LayerNorm => reference_layernorm(z, cfg),
        NormKind::RmsNorm => reference_rmsnorm(z, cfg),
    }
}

/// Reference ISD: `1/sigma` for LayerNorm, `1/rms` for RMSNorm.
pub fn reference_isd(z: &[f64], kind: NormKind) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::DimensionMismatch("empty vector".into()));
    }
    let s = match kind {
        NormKind::LayerNorm => reference_moments(z).1,
        NormKind::RmsNorm => reference_rms(z),
    };
    if s == 0.0 {
        Err(Error::ZeroVariance)
    } else {
        Ok(1.0 / s)
    }
}

fn stats_with(dp: &Datapath, z: &[f64], count: usize) -> Result<InputStats> {
    let (lanes, saturated) = dp.ingress(z)?;
    let outcome = dp.stats(&lanes, count)?;
    let (mean, variance) = dp.stats_values(&outcome.raw);
    let (isd, raw_isd, isd_sat) = match dp.isd(&outcome.raw) {
        Ok(o) => (dp.isd_value(&o.raw), Some(o.raw), o.saturated),
        Err(Error::ZeroVariance) => (f64::INFINITY, None, false),
        Err(e) => return Err(e),
    };
    Ok(InputStats {
        mean,
        variance,
        isd,
        sample_count: count,
        clamped: outcome.clamped,
        saturated: saturated || isd_sat,
        raw: outcome.raw,
        raw_isd,
    })
}

/// One-pass LayerNorm statistics, `Var = E(z^2) - E(z)^2`, in `fmt`.
pub fn onepass_stats(z: &[f64], fmt: NumericFormat) -> Result<InputStats> {
    onepass_stats_kind(z, fmt, NormKind::LayerNorm)
}

/// One-pass statistics for either kind (RMSNorm skips the mean).
pub fn onepass_stats_kind(z: &[f64], fmt: NumericFormat, kind: NormKind) -> Result<InputStats> {
    if z.is_empty() {
        return Err(Error::DimensionMismatch("empty vector".into()));
    }
    let dp = Datapath::new(fmt, kind, &Precision::default())?;
    stats_with(&dp, z, z.len())
}

/// ISD estimated from the first `n_sub` elements.
pub fn subsampled_isd(z: &[f64], n_sub: usize, fmt: NumericFormat, kind: NormKind) -> Result<f64> {
    if n_sub == 0 || n_sub > z.len() {
        return Err(Error::config(
            "n_sub",
            format!("must satisfy 1 <= n_sub <= {}, got {n_sub}", z.len()),
        ));
    }
    let dp = Datapath::new(fmt, kind, &Precision::default())?;
    let stats = stats_with(&dp, z, n_sub)?;
    if stats.isd.is_infinite() {
        return Err(Error::ZeroVariance);
    }
    Ok(stats.isd)
}

/// Statistics of `z` under `cfg` (subsampled per `cfg.n_sub`).
pub fn layer_stats(z: &[f64], cfg: &NormConfig) -> Result<InputStats> {
    cfg.validate()?;
    check_affine(z, cfg)?;
    stats_with(&cfg.datapath()?, z, cfg.n_sub)
}

/// Applies `(z - mu) * isd` (or `z * isd`) and the affine transform in
/// `cfg.format`.
///
/// With a predicted ISD the mean (LayerNorm) is still taken from the input,
/// over the first `n_sub` elements unless `full_mean` is set.
pub fn normalize(z: &[f64], cfg: &NormConfig, source: IsdSource<'_>) -> Result<NormOutput> {
    Ok(normalize_detailed(z, cfg, source)?.output)
}

/// Output of one normalized vector with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutcome {
    pub output: NormOutput,
    /// ISD actually applied, decoded.
    pub isd: f64,
    pub mean: f64,
    pub clamped: bool,
    pub saturations: usize,
}

pub fn normalize_detailed(
    z: &[f64],
    cfg: &NormConfig,
    source: IsdSource<'_>,
) -> Result<LayerOutcome> {
    cfg.validate()?;
    check_affine(z, cfg)?;
    let dp = cfg.datapath()?;
    let (lanes, in_sat) = dp.ingress(z)?;
    let (stats, isd, clamped, isd_sat) = match source {
        IsdSource::Stats(s) => {
            let raw_isd = s.raw_isd.ok_or(Error::InvalidIsd(s.isd))?;
            if !(s.isd.is_finite() && s.isd > 0.0) {
                return Err(Error::InvalidIsd(s.isd));
            }
            let stats = if cfg.mean_count() == s.sample_count {
                s.raw
            } else {
                dp.mean_only(&lanes, cfg.mean_count())?
            };
            (stats, raw_isd, s.clamped, s.saturated)
        }
        IsdSource::Predicted(v) => {
            let isd = dp.isd_from_value(v)?;
            let stats = dp.mean_only(&lanes, cfg.mean_count())?;
            (stats, isd.raw, false, isd.saturated)
        }
    };
    let affine = dp.affine(&cfg.alpha, &cfg.beta)?;
    let (vals, sat) = dp.normalize_range(&lanes, 0..z.len(), &stats, &isd, &affine);
    Ok(LayerOutcome {
        output: dp.egress(vals),
        isd: dp.isd_value(&isd),
        mean: dp.stats_values(&stats).0,
        clamped,
        saturations: sat + in_sat as usize + isd_sat as usize,
    })
}

/// Full library path for one vector: statistics (or a predicted ISD) then
/// normalization. This is the composition the simulator must reproduce.
pub fn run_layer(z: &[f64], cfg: &NormConfig, predicted: Option<f64>) -> Result<LayerOutcome> {
    match (cfg.isd_mode, predicted) {
        (IsdMode::Predicted, Some(v)) => normalize_detailed(z, cfg, IsdSource::Predicted(v)),
        (IsdMode::Predicted, None) => Err(Error::InvalidIsd(f64::NAN)),
        (IsdMode::Compute, _) => {
            let stats = layer_stats(z, cfg)?;
            if stats.isd.is_infinite() {
                return Err(Error::ZeroVariance);
            }
            normalize_detailed(z, cfg, IsdSource::Stats(&stats))
        }
    }
}

/// [`run_layer`] over a batch of vectors.
pub fn run_batch(
    exec: Exec,
    vectors: &[Vec<f64>],
    cfg: &NormConfig,
    predicted: Option<&[f64]>,
) -> Result<Vec<LayerOutcome>> {
    if let Some(p) = predicted {
        if p.len() != vectors.len() {
            return Err(Error::DimensionMismatch("one prediction per vector".into()));
        }
    }
    let idx: Vec<usize> = (0..vectors.len()).collect();
    exec::try_map(exec, &idx, |&i| {
        run_layer(&vectors[i], cfg, predicted.map(|p| p[i]))
    })
}

/// Normalizes every vector of a trace layer by layer, replacing the ISD of
/// skipped layers with the predictor's estimate anchored at `skip_start`.
/// Returns outcomes indexed `[sample][layer]`.
pub fn run_model(
    exec: Exec,
    trace: &ActivationTrace,
    base: &NormConfig,
    predictor: Option<&IsdPredictor>,
) -> Result<Vec<Vec<LayerOutcome>>> {
    if base.n() != trace.embedding_dim() {
        return Err(Error::DimensionMismatch(format!(
            "config has N = {}, trace embedding_dim = {}",
            base.n(),
            trace.embedding_dim()
        )));
    }
    if let Some(p) = predictor {
        p.validate(Some(trace.layer_count()))?;
    }
    let compute = base.clone().with_mode(IsdMode::Compute);
    let predicted = base.clone().with_mode(IsdMode::Predicted);
    let samples: Vec<usize> = (0..trace.sample_count()).collect();
    exec::try_map(exec, &samples, |&s| {
        let mut out: Vec<LayerOutcome> = Vec::with_capacity(trace.layer_count());
        for l in 0..trace.layer_count() {
            let z = trace.vector_f64(s, l);
            let o = match predictor {
                Some(p) if p.is_skipped(l) => {
                    let live = out[p.skip_start].isd;
                    run_layer(&z, &predicted, Some(p.predict(p.anchor_isd(live), l)?))
                }
                _ => run_layer(&z, &compute, None),
            }
            .map_err(|e| match e {
                Error::ZeroVariance => Error::ZeroVarianceAt { sample: s, layer: l },
                e => e,
            })?;
            out.push(o);
        }
        Ok(out)
    })
}

/// Elementwise error of `approx` against `reference`, relative to
/// `max(|ref_i|, rms(ref))` so that near-zero outputs are measured against
/// the vector's scale. Returns `(max, mean)`.
pub fn relative_errors(approx: &[f64], reference: &[f64]) -> (f64, f64) {
    assert_eq!(approx.len(), reference.len());
    let rms = (reference.iter().map(|r| r * r).sum::<f64>() / reference.len() as f64).sqrt();
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for (a, r) in approx.iter().zip(reference) {
        let denom = r.abs().max(rms);
        let e = if denom > 0.0 { (a - r).abs() / denom } else { (a - r).abs() };
        max = max.max(e);
        sum += e;
    }
    (max, sum / approx.len() as f64)
}
