//! The arithmetic kernel shared by the normalization library and the
//! accelerator model.
//!
//! Inputs enter through FP2FX (or INT8 dequantization) into a fixed-point
//! spec `Q(F)`. Statistics accumulate exactly in `i128`: per-element
//! `z_i^2 / N` terms are kept at `Q(2F)` and the running sums cannot overflow
//! for any spec of at most 64 bits and `N < 2^31`, well beyond the
//! `total_bits + ceil(log2 N)` guard width. Integer sums are associative, so
//! any adder-tree shape gives the same bits as a sequential loop.
//!
//! The `Fp64` format bypasses all of this and runs a double-precision
//! one-pass computation with pairwise summation; it exists for oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invsqrt::{invsqrt_initial, iters_for_precision, newton_fixed, InvSqrtConfig};
use crate::numerics::{
    dequantize_int8, fixed_to_fp, fp_to_fixed, mul_shift_round, quantize_int8, scaled_to_f64,
    scaled_to_float, shift_round, FixedPointSpec, FloatWidth, NumericFormat, QuantParams,
    Rounding,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    LayerNorm,
    RmsNorm,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "layernorm" => Ok(NormKind::LayerNorm),
            "rmsnorm" => Ok(NormKind::RmsNorm),
            _ => Err(Error::config("kind", format!("unknown norm kind `{s}`"))),
        }
    }
}

/// Numeric knobs of the datapath. `None` fields take format-dependent
/// defaults when resolved by [`Datapath::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Precision {
    /// Statistics and normalization width.
    pub fixed: Option<FixedPointSpec>,
    /// Width of the Newton datapath in the inverter.
    pub newton: Option<FixedPointSpec>,
    pub newton_iters: Option<u32>,
    pub inverter_width: FloatWidth,
    pub sigma: f64,
    pub magic: Option<u32>,
    pub rounding: Rounding,
    /// INT8 quantization; `None` means symmetric per vector.
    pub quant: Option<QuantParams>,
    /// Optional variance stabilizer.
    pub eps: f64,
    /// Compute the mean over all N elements even when subsampling.
    pub full_mean: bool,
}

impl Default for Precision {
    fn default() -> Self {
        Self {
            fixed: None,
            newton: None,
            newton_iters: None,
            inverter_width: FloatWidth::Fp32,
            sigma: crate::invsqrt::DEFAULT_SIGMA,
            magic: None,
            rounding: Rounding::NearestEven,
            quant: None,
            eps: 0.0,
            full_mean: false,
        }
    }
}

/// Guard bits added to the statistics width for the Newton datapath.
pub const NEWTON_GUARD_BITS: u32 = 8;

/// Datapath lanes after ingress.
#[derive(Debug, Clone, PartialEq)]
pub enum Lanes {
    Float(Vec<f64>),
    /// Raw values at `Q(F)`.
    Fixed(Vec<i128>),
}

impl Lanes {
    pub fn len(&self) -> usize {
        match self {
            Lanes::Float(v) => v.len(),
            Lanes::Fixed(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Precomputed `1/N`. Powers of two become a right shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reciprocal {
    pub n: usize,
    shift: Option<u32>,
    /// round(2^64 / n)
    inv: i128,
}

const RECIP_BITS: u32 = 64;

impl Reciprocal {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "reciprocal of zero length");
        let shift = n.is_power_of_two().then(|| n.trailing_zeros());
        let inv = ((1i128 << RECIP_BITS) + (n as i128) / 2) / n as i128;
        Self { n, shift, inv }
    }

    pub fn is_shift(&self) -> bool {
        self.shift.is_some()
    }

    /// `round(v / n)`.
    pub fn apply(&self, v: i128, rounding: Rounding) -> i128 {
        match self.shift {
            Some(s) => shift_round(v, s, rounding),
            None => mul_shift_round(v, self.inv, RECIP_BITS, rounding)
                .expect("quotient is no larger than the dividend"),
        }
    }
}

/// Statistics in datapath representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawStats {
    Float { mean: f64, variance: f64 },
    /// `mean` at `Q(F)`, `variance` at `Q(2F)`.
    Fixed { mean: i128, variance: i128 },
}

/// Statistics plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsOutcome {
    pub raw: RawStats,
    /// One-pass cancellation produced a negative variance that was clamped.
    pub clamped: bool,
    pub count: usize,
}

/// ISD in datapath representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawIsd {
    Float(f64),
    /// At the Newton spec.
    Fixed(i128),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsdOutcome {
    pub raw: RawIsd,
    pub saturated: bool,
}

/// Affine parameters in datapath representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Affine {
    Float { alpha: Vec<f64>, beta: Vec<f64> },
    Fixed { alpha: Vec<i128>, beta: Vec<i128> },
}

/// Normalized output in the format the datapath emits.
#[derive(Debug, Clone, PartialEq)]
pub enum NormOutput {
    /// Values exactly representable in `width` (or f64 for the reference
    /// backing).
    Float {
        width: Option<FloatWidth>,
        values: Vec<f64>,
    },
    /// Fixed-point outputs skip FX2FP.
    Fixed {
        spec: FixedPointSpec,
        raw: Vec<i128>,
    },
}

impl NormOutput {
    pub fn len(&self) -> usize {
        match self {
            NormOutput::Float { values, .. } => values.len(),
            NormOutput::Fixed { raw, .. } => raw.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            NormOutput::Float { values, .. } => values.clone(),
            NormOutput::Fixed { spec, raw } => raw
                .iter()
                .map(|&r| scaled_to_f64(r, spec.frac_bits))
                .collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_identical(&self, other: &NormOutput) -> bool {
        match (self, other) {
            (
                NormOutput::Float { width: a, values: x },
                NormOutput::Float { width: b, values: y },
            ) => {
                a == b
                    && x.len() == y.len()
                    && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
            }
            (
                NormOutput::Fixed { spec: a, raw: x },
                NormOutput::Fixed { spec: b, raw: y },
            ) => a == b && x == y,
            _ => false,
        }
    }

    /// Little-endian byte image, used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            NormOutput::Float { values, .. } => {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }
            NormOutput::Fixed { raw, .. } => raw.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

/// A resolved datapath: format, widths, inverter and rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct Datapath {
    pub format: NumericFormat,
    pub kind: NormKind,
    /// `None` for the `Fp64` reference backing.
    pub fixed: Option<FixedPointSpec>,
    pub newton: FixedPointSpec,
    pub inverter: InvSqrtConfig,
    pub rounding: Rounding,
    pub quant: Option<QuantParams>,
    pub eps: f64,
}

impl Datapath {
    pub fn new(format: NumericFormat, kind: NormKind, precision: &Precision) -> Result<Self> {
        let fixed = match format {
            NumericFormat::Fp64 => None,
            NumericFormat::FixedPoint(spec) => Some(spec),
            _ => Some(precision.fixed.unwrap_or_else(|| {
                format.default_fixed_spec().expect("hardware format")
            })),
        };
        if let Some(spec) = fixed {
            spec.validate()?;
            if !spec.signed {
                return Err(Error::config(
                    "fixed.signed",
                    "the statistics datapath needs a signed spec",
                ));
            }
        }
        let newton = match precision.newton {
            Some(spec) => spec,
            None => fixed
                .unwrap_or(FixedPointSpec::Q32_32)
                .widened(NEWTON_GUARD_BITS),
        };
        newton.validate()?;
        if newton.frac_bits < 2 || newton.int_bits() < 3 {
            return Err(Error::config(
                "newton",
                "Newton spec needs at least 2 integer and 2 fraction bits",
            ));
        }
        let iters = precision
            .newton_iters
            .unwrap_or_else(|| iters_for_precision(format.unit_roundoff()));
        let mut inverter = InvSqrtConfig::new(precision.inverter_width, precision.sigma, iters)?;
        if let Some(magic) = precision.magic {
            inverter.magic = magic;
        }
        if !(precision.eps.is_finite() && precision.eps >= 0.0) {
            return Err(Error::config("eps", "must be finite and >= 0"));
        }
        Ok(Self {
            format,
            kind,
            fixed,
            newton,
            inverter,
            rounding: precision.rounding,
            quant: precision.quant,
            eps: precision.eps,
        })
    }

    fn spec(&self) -> FixedPointSpec {
        self.fixed.expect("fixed datapath")
    }

    /// Converts a vector into datapath lanes (FP2FX, INT8 dequantization, or
    /// plain f64 for the reference backing). Returns the lanes and whether
    /// any element saturated.
    pub fn ingress(&self, z: &[f64]) -> Result<(Lanes, bool)> {
        if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite input {bad}")));
        }
        let to_fixed = |vals: &mut dyn Iterator<Item = f64>| -> (Vec<i128>, bool) {
            let spec = self.spec();
            let mut sat = false;
            let raw = vals
                .map(|v| {
                    let f = fp_to_fixed(v, spec, self.rounding);
                    sat |= f.saturated;
                    f.raw
                })
                .collect();
            (raw, sat)
        };
        let (raw, sat) = match self.format {
            NumericFormat::Fp64 => return Ok((Lanes::Float(z.to_vec()), false)),
            NumericFormat::Fp32 => to_fixed(&mut z.iter().map(|&v| FloatWidth::Fp32.round(v))),
            NumericFormat::Fp16 => to_fixed(&mut z.iter().map(|&v| FloatWidth::Fp16.round(v))),
            NumericFormat::Int8 => {
                let params = self.quant.unwrap_or_else(|| QuantParams::symmetric(z));
                let deq = dequantize_int8(&quantize_int8(z, params), params);
                to_fixed(&mut deq.into_iter())
            }
            NumericFormat::FixedPoint(_) => to_fixed(&mut z.iter().copied()),
        };
        Ok((Lanes::Fixed(raw), sat))
    }

    /// Per-element `z^2 / N` at `Q(2F)`.
    pub fn square_term(&self, z_raw: i128, recip: &Reciprocal) -> i128 {
        let sq = z_raw.checked_mul(z_raw).unwrap_or(i128::MAX);
        recip.apply(sq, self.rounding)
    }

    /// Mean from the lane sum and variance `E(z^2) - E(z)^2`, clamped at zero.
    pub fn finish_fixed(
        &self,
        sum: i128,
        sum_sq_terms: i128,
        recip: &Reciprocal,
    ) -> StatsOutcome {
        let spec = self.spec();
        let mean = match self.kind {
            NormKind::LayerNorm => recip.apply(sum, self.rounding),
            NormKind::RmsNorm => 0,
        };
        let mut variance = sum_sq_terms - mean * mean;
        // Rounding of the mean and of each square term bounds the cancellation noise.
        let floor = match self.kind {
            NormKind::LayerNorm => mean.abs() + recip.n as i128,
            NormKind::RmsNorm => 0,
        };
        let clamped = variance < 0 || (variance != 0 && variance <= floor);
        if clamped {
            variance = 0;
        }
        if self.eps > 0.0 {
            let f2 = 2 * spec.frac_bits;
            variance += (self.eps * crate::numerics::pow2(f2 as i32)).round_ties_even() as i128;
        }
        StatsOutcome {
            raw: RawStats::Fixed { mean, variance },
            clamped,
            count: recip.n,
        }
    }

    /// Mean only, at `Q(F)`.
    pub fn mean_fixed(&self, sum: i128, recip: &Reciprocal) -> i128 {
        match self.kind {
            NormKind::LayerNorm => recip.apply(sum, self.rounding),
            NormKind::RmsNorm => 0,
        }
    }

    /// One-pass statistics over `lanes[..count]`.
    pub fn stats(&self, lanes: &Lanes, count: usize) -> Result<StatsOutcome> {
        if count == 0 || count > lanes.len() {
            return Err(Error::DimensionMismatch(format!(
                "statistics over {count} of {} elements",
                lanes.len()
            )));
        }
        match lanes {
            Lanes::Float(z) => Ok(self.stats_float(&z[..count])),
            Lanes::Fixed(z) => {
                let recip = Reciprocal::new(count);
                let z = &z[..count];
                let sum: i128 = z.iter().sum();
                let sum_sq: i128 = z.iter().map(|&v| self.square_term(v, &recip)).sum();
                Ok(self.finish_fixed(sum, sum_sq, &recip))
            }
        }
    }

    fn stats_float(&self, z: &[f64]) -> StatsOutcome {
        let inv_n = 1.0 / z.len() as f64;
        let squares: Vec<f64> = z.iter().map(|v| v * v * inv_n).collect();
        let mean = match self.kind {
            NormKind::LayerNorm => pairwise_sum(z) * inv_n,
            NormKind::RmsNorm => 0.0,
        };
        let mean_sq = pairwise_sum(&squares);
        let mut variance = mean_sq - mean * mean;
        // Below the rounding noise of the subtraction the result carries no signal.
        let clamped = variance <= 4.0 * f64::EPSILON * mean_sq && variance != 0.0 || variance < 0.0;
        if clamped {
            variance = 0.0;
        }
        StatsOutcome {
            raw: RawStats::Float {
                mean,
                variance: variance + self.eps,
            },
            clamped,
            count: z.len(),
        }
    }

    /// The mean used by the normalization unit when only the mean is needed.
    pub fn mean_only(&self, lanes: &Lanes, count: usize) -> Result<RawStats> {
        Ok(self.stats(lanes, count)?.raw)
    }

    /// Square root inverter on a datapath variance.
    pub fn isd(&self, stats: &RawStats) -> Result<IsdOutcome> {
        match *stats {
            RawStats::Float { variance, .. } => {
                if variance <= 0.0 {
                    return Err(Error::ZeroVariance);
                }
                Ok(IsdOutcome {
                    raw: RawIsd::Float(1.0 / variance.sqrt()),
                    saturated: false,
                })
            }
            RawStats::Fixed { variance, .. } => {
                if variance <= 0 {
                    return Err(Error::ZeroVariance);
                }
                let f2 = 2 * self.spec().frac_bits;
                // FX2FP
                let x = scaled_to_float(variance, f2, self.inverter.width);
                let y0 = invsqrt_initial(x, &self.inverter)?;
                let y0 = fp_to_fixed(y0, self.newton, self.rounding);
                let fn_ = self.newton.frac_bits as i64;
                // x/2 at the Newton spec
                let shift = f2 as i64 + 1 - fn_;
                let half_x = if shift >= 0 {
                    shift_round(variance, shift as u32, self.rounding)
                } else {
                    variance.checked_shl((-shift) as u32).unwrap_or(i128::MAX)
                };
                let (half_x, hx_sat) = self.newton.saturate(half_x);
                let out = newton_fixed(
                    y0.raw,
                    half_x,
                    self.newton,
                    self.inverter.newton_iters,
                    self.rounding,
                );
                Ok(IsdOutcome {
                    raw: RawIsd::Fixed(out.raw),
                    saturated: out.saturated || y0.saturated || hx_sat,
                })
            }
        }
    }

    /// Brings an externally predicted ISD into datapath representation.
    pub fn isd_from_value(&self, isd: f64) -> Result<IsdOutcome> {
        if !(isd.is_finite() && isd > 0.0) {
            return Err(Error::InvalidIsd(isd));
        }
        Ok(match self.fixed {
            None => IsdOutcome {
                raw: RawIsd::Float(isd),
                saturated: false,
            },
            Some(_) => {
                let v = fp_to_fixed(isd, self.newton, self.rounding);
                if v.raw <= 0 {
                    return Err(Error::InvalidIsd(isd));
                }
                IsdOutcome {
                    raw: RawIsd::Fixed(v.raw),
                    saturated: v.saturated,
                }
            }
        })
    }

    /// Decoded ISD value.
    pub fn isd_value(&self, isd: &RawIsd) -> f64 {
        match *isd {
            RawIsd::Float(v) => v,
            RawIsd::Fixed(raw) => scaled_to_f64(raw, self.newton.frac_bits),
        }
    }

    /// Decoded mean and variance.
    pub fn stats_values(&self, stats: &RawStats) -> (f64, f64) {
        match *stats {
            RawStats::Float { mean, variance } => (mean, variance),
            RawStats::Fixed { mean, variance } => {
                let f = self.spec().frac_bits;
                (scaled_to_f64(mean, f), scaled_to_f64(variance, 2 * f))
            }
        }
    }

    pub fn affine(&self, alpha: &[f64], beta: &[f64]) -> Result<Affine> {
        if alpha.len() != beta.len() {
            return Err(Error::DimensionMismatch(format!(
                "alpha has {} entries, beta {}",
                alpha.len(),
                beta.len()
            )));
        }
        Ok(match self.fixed {
            None => Affine::Float {
                alpha: alpha.to_vec(),
                beta: beta.to_vec(),
            },
            Some(spec) => {
                let q = |v: &[f64]| {
                    v.iter()
                        .map(|&x| fp_to_fixed(x, spec, self.rounding).raw)
                        .collect()
                };
                Affine::Fixed {
                    alpha: q(alpha),
                    beta: q(beta),
                }
            }
        })
    }

    /// `alpha * (z - mean) * isd + beta` for one fixed-point lane.
    pub fn normalize_fixed_lane(
        &self,
        z: i128,
        mean: i128,
        isd: i128,
        alpha: i128,
        beta: i128,
    ) -> (i128, bool) {
        let spec = self.spec();
        let r = self.rounding;
        let (d, s1) = spec.saturate(z - mean);
        let (p, s2) = spec.saturate(
            mul_shift_round(d, isd, self.newton.frac_bits, r).unwrap_or(i128::MAX),
        );
        let (a, s3) =
            spec.saturate(mul_shift_round(p, alpha, spec.frac_bits, r).unwrap_or(i128::MAX));
        let (out, s4) = spec.saturate(a + beta);
        (out, s1 || s2 || s3 || s4)
    }

    /// Normalizes `lanes[range]`, returning raw lane results and a saturation
    /// count. The simulator calls this once per `p_n`-wide chunk.
    pub fn normalize_range(
        &self,
        lanes: &Lanes,
        range: std::ops::Range<usize>,
        stats: &RawStats,
        isd: &RawIsd,
        affine: &Affine,
    ) -> (LaneValues, usize) {
        match (lanes, stats, isd, affine) {
            (Lanes::Float(z), RawStats::Float { mean, .. }, RawIsd::Float(isd), Affine::Float { alpha, beta }) => {
                let vals = range
                    .map(|i| alpha[i] * (z[i] - mean) * isd + beta[i])
                    .collect();
                (LaneValues::Float(vals), 0)
            }
            (Lanes::Fixed(z), RawStats::Fixed { mean, .. }, RawIsd::Fixed(isd), Affine::Fixed { alpha, beta }) => {
                let mut sat = 0;
                let vals = range
                    .map(|i| {
                        let (v, s) = self.normalize_fixed_lane(z[i], *mean, *isd, alpha[i], beta[i]);
                        sat += s as usize;
                        v
                    })
                    .collect();
                (LaneValues::Fixed(vals), sat)
            }
            _ => panic!("mixed float/fixed datapath operands"),
        }
    }

    /// Converts raw normalized lanes into the output format. Fixed-point and
    /// INT8 datapaths keep their outputs in fixed point.
    pub fn egress(&self, values: LaneValues) -> NormOutput {
        match values {
            LaneValues::Float(values) => NormOutput::Float {
                width: None,
                values,
            },
            LaneValues::Fixed(raw) => {
                let spec = self.spec();
                match self.format.float_width() {
                    Some(width) => NormOutput::Float {
                        width: Some(width),
                        values: raw.iter().map(|&r| fixed_to_fp(r, spec, width)).collect(),
                    },
                    None => NormOutput::Fixed { spec, raw },
                }
            }
        }
    }
}

/// Raw normalization results before egress.
#[derive(Debug, Clone, PartialEq)]
pub enum LaneValues {
    Float(Vec<f64>),
    Fixed(Vec<i128>),
}

impl LaneValues {
    pub fn extend(&mut self, other: LaneValues) {
        match (self, other) {
            (LaneValues::Float(a), LaneValues::Float(b)) => a.extend(b),
            (LaneValues::Fixed(a), LaneValues::Fixed(b)) => a.extend(b),
            _ => panic!("mixed lane kinds"),
        }
    }
}

/// Pairwise (tree) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n.div_ceil(2));
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
