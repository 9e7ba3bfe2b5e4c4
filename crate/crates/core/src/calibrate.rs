//! ISD-skip calibration: find the layer window where log-ISD falls on a
//! line, fit its slope, and predict ISDs inside it from the window start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correlations this close are treated as ties (smallest start wins).
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Default correlation gate for accepting a predictor.
pub const DEFAULT_THRESHOLD: f64 = -0.95;

/// Pearson correlation coefficient of two equal-length sequences.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson over {} and {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateInput("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `[sample][layer]` table of natural-log ISDs.
#[derive(Debug, Clone, PartialEq)]
pub struct IsdTable {
    values: Vec<Vec<f64>>,
}

impl IsdTable {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let layers = values.first().map_or(0, Vec::len);
        if values.is_empty() {
            return Err(Error::DimensionMismatch("ISD table needs at least one sample".into()));
        }
        if layers < 2 {
            return Err(Error::DimensionMismatch(format!(
                "ISD table needs at least two layers, got {layers}"
            )));
        }
        for (s, row) in values.iter().enumerate() {
            if row.len() != layers {
                return Err(Error::DimensionMismatch(format!(
                    "sample {s} has {} layers, expected {layers}",
                    row.len()
                )));
            }
            if let Some(l) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::DegenerateInput(format!(
                    "non-finite log-ISD at sample {s}, layer {l}"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn layer_count(&self) -> usize {
        self.values[0].len()
    }

    pub fn sample_count(&self) -> usize {
        self.values.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn get(&self, sample: usize, layer: usize) -> f64 {
        self.values[sample][layer]
    }

    /// Mean log-ISD of each layer across samples.
    pub fn layer_means(&self) -> Vec<f64> {
        let s = self.sample_count() as f64;
        (0..self.layer_count())
            .map(|l| self.values.iter().map(|row| row[l]).sum::<f64>() / s)
            .collect()
    }

    /// Appends the samples of `other`.
    pub fn append(&mut self, other: IsdTable) -> Result<()> {
        if other.layer_count() != self.layer_count() {
            return Err(Error::DimensionMismatch(format!(
                "tables have {} and {} layers",
                self.layer_count(),
                other.layer_count()
            )));
        }
        self.values.extend(other.values);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub min_gap: usize,
    /// Also consider windows wider than `min_gap`.
    pub wide: bool,
}

impl ScanOptions {
    pub fn exact(min_gap: usize) -> Self {
        Self { min_gap, wide: false }
    }
}

/// Selected window `[start, end]` (inclusive layer indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    pub start: usize,
    pub end: usize,
    pub min_cor: f64,
}

/// Scans windows `[i, i + M]` for the most negative log-ISD/layer correlation.
pub fn scan_skip_range(table: &IsdTable, min_gap: usize) -> Result<ScanResult> {
    scan_skip_range_with(table, ScanOptions::exact(min_gap))
}

pub fn scan_skip_range_with(table: &IsdTable, opts: ScanOptions) -> Result<ScanResult> {
    scan_means(&table.layer_means(), opts)
}

fn scan_means(means: &[f64], opts: ScanOptions) -> Result<ScanResult> {
    let m = opts.min_gap;
    if m < 2 {
        return Err(Error::config("min_gap", format!("must be at least 2, got {m}")));
    }
    let layers = means.len();
    if layers <= m {
        return Err(Error::NoValidRange(format!(
            "{layers} layers cannot hold a window with gap {m}"
        )));
    }
    let mut best: Option<ScanResult> = None;
    for i in 0..layers - m {
        let last = if opts.wide { layers - 1 } else { i + m };
        for j in i + m..=last {
            let xs: Vec<f64> = (i..=j).map(|k| k as f64).collect();
            let r = match pearson(&xs, &means[i..=j]) {
                Ok(r) => r,
                Err(Error::DegenerateInput(_)) => continue,
                Err(e) => return Err(e),
            };
            if best.is_none_or(|b| r < b.min_cor - TIE_TOLERANCE) {
                best = Some(ScanResult { start: i, end: j, min_cor: r });
            }
        }
    }
    best.ok_or_else(|| Error::NoValidRange("every window has constant log-ISD".into()))
}

/// Least-squares slope with a flag for constant windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub slope: f64,
    pub degenerate: bool,
}

/// Least-squares slope of `window` against offsets `0, 1, 2, ...`.
pub fn cal_decay(window: &[f64]) -> Result<DecayFit> {
    if window.len() < 2 {
        return Err(Error::DegenerateInput("decay window needs two layers".into()));
    }
    let n = window.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = window.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, y) in window.iter().enumerate() {
        let dx = k as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    let degenerate = window.iter().all(|&y| y == window[0]);
    let slope = if degenerate { 0.0 } else { sxy / sxx };
    Ok(DecayFit { slope, degenerate })
}

/// Where the anchor ISD at the window start comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Measured per input at `skip_start`.
    #[default]
    Live,
    /// Calibration-time mean at `skip_start`.
    CalibrationMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsdPredictor {
    pub skip_start: usize,
    pub skip_end: usize,
    pub decay: f64,
    #[serde(default)]
    pub anchor: AnchorPolicy,
    /// Mean log-ISD at `skip_start` over the calibration set.
    pub anchor_log_isd: f64,
}

impl IsdPredictor {
    pub fn validate(&self, layer_count: Option<usize>) -> Result<()> {
        if self.skip_start >= self.skip_end {
            return Err(Error::config(
                "skip_end",
                format!("must exceed skip_start ({} >= {})", self.skip_start, self.skip_end),
            ));
        }
        if let Some(l) = layer_count {
            if self.skip_end >= l {
                return Err(Error::config(
                    "skip_end",
                    format!("{} is beyond the last layer {}", self.skip_end, l - 1),
                ));
            }
        }
        if !self.decay.is_finite() {
            return Err(Error::config("decay", "must be finite"));
        }
        if !self.anchor_log_isd.is_finite() {
            return Err(Error::config("anchor_log_isd", "must be finite"));
        }
        Ok(())
    }

    /// Layers whose ISD is predicted rather than measured.
    pub fn is_skipped(&self, layer: usize) -> bool {
        layer > self.skip_start && layer <= self.skip_end
    }

    /// ISD of layer `k` given the ISD measured at `skip_start`.
    pub fn predict(&self, isd_at_start: f64, k: usize) -> Result<f64> {
        predict_isd(self, isd_at_start, k)
    }

    /// Anchor used for an input whose own ISD at `skip_start` is `live`.
    pub fn anchor_isd(&self, live: f64) -> f64 {
        match self.anchor {
            AnchorPolicy::Live => live,
            AnchorPolicy::CalibrationMean => libm::exp(self.anchor_log_isd),
        }
    }
}

/// `exp(ln(isd_at_start) + decay * (k - skip_start))`.
pub fn predict_isd(p: &IsdPredictor, isd_at_start: f64, k: usize) -> Result<f64> {
    if k < p.skip_start || k > p.skip_end {
        return Err(Error::OutOfRange {
            k,
            start: p.skip_start,
            end: p.skip_end,
        });
    }
    if !(isd_at_start.is_finite() && isd_at_start > 0.0) {
        return Err(Error::InvalidIsd(isd_at_start));
    }
    if k == p.skip_start {
        return Ok(isd_at_start);
    }
    let offset = (k - p.skip_start) as f64;
    Ok(libm::exp(libm::log(isd_at_start) + p.decay * offset))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub scan: ScanOptions,
    pub threshold: f64,
    pub anchor: AnchorPolicy,
}

impl CalibrationOptions {
    pub fn new(min_gap: usize) -> Self {
        Self {
            scan: ScanOptions::exact(min_gap),
            threshold: DEFAULT_THRESHOLD,
            anchor: AnchorPolicy::Live,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub predictor: IsdPredictor,
    pub min_cor: f64,
    pub decay_degenerate: bool,
    /// `min_cor <= threshold`.
    pub accepted: bool,
    pub layer_means: Vec<f64>,
}

/// Scan, fit and build a predictor from a table of log-ISDs.
pub fn calibrate_table(table: &IsdTable, opts: &CalibrationOptions) -> Result<Calibration> {
    let means = table.layer_means();
    let scan = scan_means(&means, opts.scan)?;
    let fit = cal_decay(&means[scan.start..=scan.end])?;
    let predictor = IsdPredictor {
        skip_start: scan.start,
        skip_end: scan.end,
        decay: fit.slope,
        anchor: opts.anchor,
        anchor_log_isd: means[scan.start],
    };
    Ok(Calibration {
        predictor,
        min_cor: scan.min_cor,
        decay_degenerate: fit.degenerate,
        accepted: scan.min_cor <= opts.threshold,
        layer_means: means,
    })
}
