//! Numeric formats and bit-exact conversions used by every datapath.
//!
//! Fixed-point values are carried as raw `i128` integers together with a
//! [`FixedPointSpec`]; the value of `raw` is `raw * 2^-frac_bits`. Products are
//! formed at full 256-bit width and rounded once, so results never depend on
//! evaluation order.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounding applied when bits are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    NearestEven,
    /// Toward zero.
    Truncate,
}

/// Binary layout of a fixed-point number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointSpec {
    pub total_bits: u32,
    pub frac_bits: u32,
    #[serde(default = "default_signed")]
    pub signed: bool,
}

fn default_signed() -> bool {
    true
}

impl FixedPointSpec {
    pub fn new(total_bits: u32, frac_bits: u32, signed: bool) -> Result<Self> {
        let spec = Self {
            total_bits,
            frac_bits,
            signed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Signed Q16.16, the default intermediate for FP16 and INT8 inputs.
    pub const Q16_16: Self = Self {
        total_bits: 32,
        frac_bits: 16,
        signed: true,
    };

    /// Signed Q32.32, the default intermediate for FP32 inputs.
    pub const Q32_32: Self = Self {
        total_bits: 64,
        frac_bits: 32,
        signed: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.frac_bits == 0 || self.frac_bits >= self.total_bits || self.total_bits > 64 {
            return Err(Error::config(
                "fixed",
                format!(
                    "need 0 < frac_bits < total_bits <= 64, got total_bits={} frac_bits={}",
                    self.total_bits, self.frac_bits
                ),
            ));
        }
        Ok(())
    }

    pub fn int_bits(&self) -> u32 {
        self.total_bits - self.frac_bits
    }

    pub fn min_raw(&self) -> i128 {
        if self.signed {
            -(1i128 << (self.total_bits - 1))
        } else {
            0
        }
    }

    pub fn max_raw(&self) -> i128 {
        if self.signed {
            (1i128 << (self.total_bits - 1)) - 1
        } else {
            (1i128 << self.total_bits) - 1
        }
    }

    /// Value of one unit in the last place.
    pub fn resolution(&self) -> f64 {
        pow2(-(self.frac_bits as i32))
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.resolution()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.resolution()
    }

    /// Same spec with `guard` extra bits on both the integer and fraction side,
    /// capped at 64 total bits.
    pub fn widened(&self, guard: u32) -> Self {
        let total_bits = (self.total_bits + guard).min(64);
        let frac_bits = (self.frac_bits + guard).min(total_bits - 2);
        Self {
            total_bits,
            frac_bits,
            signed: self.signed,
        }
    }

    /// Clamps `raw` into range, reporting whether it had to.
    pub fn saturate(&self, raw: i128) -> (i128, bool) {
        if raw > self.max_raw() {
            (self.max_raw(), true)
        } else if raw < self.min_raw() {
            (self.min_raw(), true)
        } else {
            (raw, false)
        }
    }

    /// Raw representation of 1.5, the Newton-step constant.
    pub fn one_and_half(&self) -> i128 {
        3i128 << (self.frac_bits - 1)
    }
}

impl fmt::Display for FixedPointSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.signed { "Q" } else { "UQ" };
        write!(f, "{prefix}{}.{}", self.int_bits(), self.frac_bits)
    }
}

/// Floating-point widths supported by the converters and the inverter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    #[default]
    Fp32,
    Fp16,
}

impl FloatWidth {
    /// Exponent bias Q.
    pub fn bias(self) -> u32 {
        match self {
            FloatWidth::Fp32 => 127,
            FloatWidth::Fp16 => 15,
        }
    }

    /// Mantissa field length L in bits.
    pub fn mantissa_len(self) -> u32 {
        match self {
            FloatWidth::Fp32 => 23,
            FloatWidth::Fp16 => 10,
        }
    }

    pub fn exponent_len(self) -> u32 {
        match self {
            FloatWidth::Fp32 => 8,
            FloatWidth::Fp16 => 5,
        }
    }

    /// Unit roundoff, 2^-(L+1).
    pub fn unit_roundoff(self) -> f64 {
        pow2(-(self.mantissa_len() as i32 + 1))
    }

    /// Rounds `x` to this width (nearest-even), returned widened to f64.
    pub fn round(self, x: f64) -> f64 {
        match self {
            FloatWidth::Fp32 => x as f32 as f64,
            FloatWidth::Fp16 => f16::from_f64(x).to_f64(),
        }
    }

    /// Bit pattern of `x` rounded to this width.
    pub fn to_bits(self, x: f64) -> u32 {
        match self {
            FloatWidth::Fp32 => (x as f32).to_bits(),
            FloatWidth::Fp16 => f16::from_f64(x).to_bits() as u32,
        }
    }

    pub fn from_bits(self, bits: u32) -> f64 {
        match self {
            FloatWidth::Fp32 => f32::from_bits(bits) as f64,
            FloatWidth::Fp16 => f16::from_bits(bits as u16).to_f64(),
        }
    }

    /// Smallest positive normal value.
    pub fn min_positive_normal(self) -> f64 {
        pow2(1 - self.bias() as i32)
    }
}

/// Input/output representation of a datapath.
///
/// `Fp64` is not a hardware format; it selects the double-precision
/// reference backing used by oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumericFormat {
    Fp64,
    Fp32,
    Fp16,
    Int8,
    FixedPoint(FixedPointSpec),
}

impl NumericFormat {
    /// Fixed-point intermediate used when this format enters the datapath.
    pub fn default_fixed_spec(&self) -> Option<FixedPointSpec> {
        match self {
            NumericFormat::Fp64 => None,
            NumericFormat::Fp32 => Some(FixedPointSpec::Q32_32),
            NumericFormat::Fp16 | NumericFormat::Int8 => Some(FixedPointSpec::Q16_16),
            NumericFormat::FixedPoint(spec) => Some(*spec),
        }
    }

    /// Floating-point width of inputs and outputs, if any.
    pub fn float_width(&self) -> Option<FloatWidth> {
        match self {
            NumericFormat::Fp32 => Some(FloatWidth::Fp32),
            NumericFormat::Fp16 => Some(FloatWidth::Fp16),
            _ => None,
        }
    }

    /// Relative precision of the format's outputs.
    pub fn unit_roundoff(&self) -> f64 {
        match self {
            NumericFormat::Fp64 => f64::EPSILON / 2.0,
            NumericFormat::Fp32 => FloatWidth::Fp32.unit_roundoff(),
            NumericFormat::Fp16 => FloatWidth::Fp16.unit_roundoff(),
            NumericFormat::Int8 => pow2(-8),
            NumericFormat::FixedPoint(spec) => pow2(-(spec.frac_bits as i32) - 1),
        }
    }

    pub fn is_hardware(&self) -> bool {
        !matches!(self, NumericFormat::Fp64)
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericFormat::Fp64 => f.write_str("fp64"),
            NumericFormat::Fp32 => f.write_str("fp32"),
            NumericFormat::Fp16 => f.write_str("fp16"),
            NumericFormat::Int8 => f.write_str("int8"),
            NumericFormat::FixedPoint(spec) => write!(f, "{spec}"),
        }
    }
}

impl FromStr for NumericFormat {
    type Err = Error;

    /// Accepts `fp64`, `fp32`, `fp16`, `int8`, or `Q<int>.<frac>` / `UQ<int>.<frac>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "fp64" => return Ok(NumericFormat::Fp64),
            "fp32" => return Ok(NumericFormat::Fp32),
            "fp16" => return Ok(NumericFormat::Fp16),
            "int8" => return Ok(NumericFormat::Int8),
            _ => {}
        }
        let (signed, rest) = if let Some(r) = lower.strip_prefix("uq") {
            (false, r)
        } else if let Some(r) = lower.strip_prefix('q') {
            (true, r)
        } else {
            return Err(Error::config("format", format!("unknown format `{s}`")));
        };
        let (int, frac) = rest
            .split_once('.')
            .ok_or_else(|| Error::config("format", format!("expected Q<int>.<frac>, got `{s}`")))?;
        let parse = |v: &str| {
            v.parse::<u32>()
                .map_err(|_| Error::config("format", format!("bad bit count in `{s}`")))
        };
        let (int, frac) = (parse(int)?, parse(frac)?);
        Ok(NumericFormat::FixedPoint(FixedPointSpec::new(
            int + frac,
            frac,
            signed,
        )?))
    }
}

impl Serialize for NumericFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NumericFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Result of a float to fixed conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedValue {
    pub raw: i128,
    pub saturated: bool,
}

/// Converts `x` to fixed point (FP2FX). Out-of-range values saturate.
pub fn fp_to_fixed(x: f64, spec: FixedPointSpec, rounding: Rounding) -> FixedValue {
    if x.is_nan() {
        return FixedValue {
            raw: 0,
            saturated: true,
        };
    }
    // exact: scaling by a power of two
    let scaled = x * pow2(spec.frac_bits as i32);
    let rounded = match rounding {
        Rounding::NearestEven => scaled.round_ties_even(),
        Rounding::Truncate => scaled.trunc(),
    };
    let raw = if rounded.abs() >= pow2(126) {
        if rounded > 0.0 {
            i128::MAX
        } else {
            i128::MIN
        }
    } else {
        rounded as i128
    };
    let (raw, saturated) = spec.saturate(raw);
    FixedValue { raw, saturated }
}

/// Converts a raw fixed-point value to the nearest value of `target` (FX2FP).
pub fn fixed_to_fp(raw: i128, spec: FixedPointSpec, target: FloatWidth) -> f64 {
    scaled_to_float(raw, spec.frac_bits, target)
}

/// `raw * 2^-frac` correctly rounded to `target`.
pub(crate) fn scaled_to_float(raw: i128, frac: u32, target: FloatWidth) -> f64 {
    let odd = round_to_odd(raw, frac);
    match target {
        FloatWidth::Fp32 => odd as f32 as f64,
        FloatWidth::Fp16 => f16::from_f64(odd).to_f64(),
    }
}

/// `raw * 2^-frac` correctly rounded to f64.
pub fn scaled_to_f64(raw: i128, frac: u32) -> f64 {
    (raw as f64) * pow2(-(frac as i32))
}

/// `raw * 2^-frac` rounded to 53 bits with round-to-odd. A second rounding to
/// any narrower binary format is then correctly rounded.
fn round_to_odd(raw: i128, frac: u32) -> f64 {
    let mag = raw.unsigned_abs();
    let bits = 128 - mag.leading_zeros();
    let (q, shift) = if bits <= 53 {
        (mag, 0)
    } else {
        let s = bits - 53;
        let mut q = mag >> s;
        if mag & ((1u128 << s) - 1) != 0 {
            q |= 1;
        }
        (q, s)
    };
    let v = (q as f64) * pow2(shift as i32 - frac as i32);
    if raw < 0 {
        -v
    } else {
        v
    }
}

/// Exact power of two for exponents in the normal f64 range.
pub fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// `round(a * b / 2^shift)` computed at 256-bit width.
///
/// Returns `None` when the result does not fit in an `i128`.
pub fn mul_shift_round(a: i128, b: i128, shift: u32, rounding: Rounding) -> Option<i128> {
    let negative = (a < 0) != (b < 0);
    let (hi, lo) = mul_u128(a.unsigned_abs(), b.unsigned_abs());
    let mag = shr_round_u256(hi, lo, shift, rounding)?;
    apply_sign(mag, negative)
}

/// `round(a / 2^shift)`.
pub fn shift_round(a: i128, shift: u32, rounding: Rounding) -> i128 {
    let mag = shr_round_u256(0, a.unsigned_abs(), shift, rounding)
        .expect("right shift cannot grow magnitude");
    apply_sign(mag, a < 0).expect("right shift cannot grow magnitude")
}

fn apply_sign(mag: u128, negative: bool) -> Option<i128> {
    if negative {
        if mag <= i128::MAX as u128 + 1 {
            Some((mag as i128).wrapping_neg())
        } else {
            None
        }
    } else if mag <= i128::MAX as u128 {
        Some(mag as i128)
    } else {
        None
    }
}

fn mul_u128(a: u128, b: u128) -> (u128, u128) {
    const MASK: u128 = u64::MAX as u128;
    let (a1, a0) = (a >> 64, a & MASK);
    let (b1, b0) = (b >> 64, b & MASK);
    let p00 = a0 * b0;
    let p01 = a0 * b1;
    let p10 = a1 * b0;
    let p11 = a1 * b1;
    let mid = (p00 >> 64) + (p01 & MASK) + (p10 & MASK);
    let lo = (p00 & MASK) | (mid << 64);
    let hi = p11 + (p01 >> 64) + (p10 >> 64) + (mid >> 64);
    (hi, lo)
}

fn shr_round_u256(hi: u128, lo: u128, shift: u32, rounding: Rounding) -> Option<u128> {
    if shift == 0 {
        return (hi == 0).then_some(lo);
    }
    if shift >= 256 {
        return Some(0);
    }
    let bit = |k: u32| -> bool {
        if k < 128 {
            (lo >> k) & 1 == 1
        } else {
            (hi >> (k - 128)) & 1 == 1
        }
    };
    let any_below = |k: u32| -> bool {
        if k == 0 {
            false
        } else if k < 128 {
            lo & ((1u128 << k) - 1) != 0
        } else if k == 128 {
            lo != 0
        } else {
            lo != 0 || hi & ((1u128 << (k - 128)) - 1) != 0
        }
    };
    let (mut q_hi, mut q_lo) = if shift < 128 {
        (hi >> shift, (lo >> shift) | (hi << (128 - shift)))
    } else {
        (0, hi >> (shift - 128))
    };
    if rounding == Rounding::NearestEven {
        let half = bit(shift - 1);
        let sticky = any_below(shift - 1);
        if half && (sticky || q_lo & 1 == 1) {
            let (v, carry) = q_lo.overflowing_add(1);
            q_lo = v;
            if carry {
                q_hi += 1;
            }
        }
    }
    (q_hi == 0).then_some(q_lo)
}

/// Sign, exponent and mantissa fields of a binary float.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatBits {
    pub sign: u8,
    /// Biased exponent field E_x.
    pub exponent_field: u32,
    /// Mantissa field M_x.
    pub mantissa_field: u32,
    /// Exponent bias Q.
    pub exponent_bias: u32,
    /// Mantissa length L.
    pub mantissa_len: u32,
}

impl FloatBits {
    pub fn width(&self) -> FloatWidth {
        if self.mantissa_len == 10 {
            FloatWidth::Fp16
        } else {
            FloatWidth::Fp32
        }
    }

    /// Bit pattern `sign | E_x | M_x`.
    pub fn to_bits(&self) -> u32 {
        let w = self.width();
        ((self.sign as u32) << (w.exponent_len() + w.mantissa_len()))
            | (self.exponent_field << w.mantissa_len())
            | self.mantissa_field
    }

    /// The low bits `M_x + 2^L E_x` used by the inverter.
    pub fn magnitude_bits(&self) -> u32 {
        (self.exponent_field << self.mantissa_len) | self.mantissa_field
    }
}

/// Splits `x`, rounded to `width`, into its fields. NaN and infinities are
/// rejected because the inverter has no meaningful answer for them.
pub fn float_decompose(x: f64, width: FloatWidth) -> Result<FloatBits> {
    float_decompose_bits(width.to_bits(x), width)
}

/// Splits a raw bit pattern of `width`.
pub fn float_decompose_bits(bits: u32, width: FloatWidth) -> Result<FloatBits> {
    let l = width.mantissa_len();
    let e_len = width.exponent_len();
    let exp_mask = (1u32 << e_len) - 1;
    let exponent_field = (bits >> l) & exp_mask;
    let mantissa_field = bits & ((1u32 << l) - 1);
    if exponent_field == exp_mask {
        return Err(Error::Domain(format!(
            "non-finite value (bits {bits:#x}) cannot enter the inverter"
        )));
    }
    Ok(FloatBits {
        sign: ((bits >> (l + e_len)) & 1) as u8,
        exponent_field,
        mantissa_field,
        exponent_bias: width.bias(),
        mantissa_len: l,
    })
}

/// Reassembles the fields into the value they encode.
pub fn float_reassemble(b: &FloatBits) -> f64 {
    b.width().from_bits(b.to_bits())
}

/// Affine INT8 quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    #[serde(default)]
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config("quant.scale", "must be finite and > 0"));
        }
        if !(i8::MIN as i32..=i8::MAX as i32).contains(&zero_point) {
            return Err(Error::config("quant.zero_point", "must fit in INT8"));
        }
        Ok(Self { scale, zero_point })
    }

    /// Symmetric per-tensor scale `max|x| / 127`, zero point 0.
    pub fn symmetric(xs: &[f64]) -> Self {
        let max_abs = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        Self {
            scale,
            zero_point: 0,
        }
    }
}

/// `clamp(round(x / scale) + zero_point)` into INT8.
pub fn quantize_int8(xs: &[f64], params: QuantParams) -> Vec<i8> {
    xs.iter()
        .map(|&x| {
            let q = (x / params.scale).round_ties_even() + params.zero_point as f64;
            q.clamp(i8::MIN as f64, i8::MAX as f64) as i8
        })
        .collect()
}

pub fn dequantize_int8(qs: &[i8], params: QuantParams) -> Vec<f64> {
    qs.iter()
        .map(|&q| (q as i32 - params.zero_point) as f64 * params.scale)
        .collect()
}
