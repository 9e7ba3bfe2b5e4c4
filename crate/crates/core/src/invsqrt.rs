//! Square root inverter: magic-constant initial guess plus Newton refinement.
//!
//! Viewing the bit pattern of a positive float as `M_x + 2^L E_x` gives a
//! scaled, biased approximation of `log2(x)`. Halving and negating it in the
//! integer domain and adding `1.5 * 2^L * (Q - sigma)` yields the bit pattern
//! of an approximation to `1/sqrt(x)`. Each Newton step
//! `y <- y * (1.5 - (x/2) * y^2)` then roughly squares the relative error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    fp_to_fixed, mul_shift_round, FixedPointSpec, FixedValue, FloatWidth, Rounding,
};

/// Log-approximation correction sigma. Reproduces `0x5f3759df` for FP32.
pub const DEFAULT_SIGMA: f64 = 0.0450466;

/// The FP32 magic constant.
pub const FP32_MAGIC: u32 = 0x5f37_59df;

/// Worst-case relative error of the FP32 initial guess.
pub const INITIAL_GUESS_BOUND: f64 = 0.035;

/// Worst-case relative error after one Newton step.
pub const ONE_STEP_BOUND: f64 = 0.002;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvSqrtConfig {
    pub width: FloatWidth,
    pub sigma: f64,
    pub newton_iters: u32,
    pub magic: u32,
}

impl Default for InvSqrtConfig {
    fn default() -> Self {
        Self::new(FloatWidth::Fp32, DEFAULT_SIGMA, 1).expect("default sigma is valid")
    }
}

impl InvSqrtConfig {
    /// Builds a config whose magic constant is derived from `sigma`.
    pub fn new(width: FloatWidth, sigma: f64, newton_iters: u32) -> Result<Self> {
        Ok(Self {
            width,
            sigma,
            newton_iters,
            magic: magic_constant(width, sigma)?,
        })
    }

    pub fn with_iters(mut self, newton_iters: u32) -> Self {
        self.newton_iters = newton_iters;
        self
    }
}

/// `round(1.5 * 2^L * (Q - sigma))` for the given width.
pub fn magic_constant(width: FloatWidth, sigma: f64) -> Result<u32> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("sigma {sigma} outside [0, 1]")));
    }
    let scale = 1.5 * (1u64 << width.mantissa_len()) as f64;
    Ok((scale * (width.bias() as f64 - sigma)).round_ties_even() as u32)
}

fn check_domain(x: f64, width: FloatWidth) -> Result<u32> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Domain(format!("inverse sqrt of {x}")));
    }
    let rounded = width.round(x);
    if !rounded.is_finite() || rounded < width.min_positive_normal() {
        return Err(Error::Domain(format!(
            "{x} is not a positive normal {width:?} value"
        )));
    }
    Ok(width.to_bits(rounded))
}

/// Initial approximation: bits(y0) = magic - (bits(x) >> 1).
pub fn invsqrt_initial(x: f64, cfg: &InvSqrtConfig) -> Result<f64> {
    let bits = check_domain(x, cfg.width)?;
    Ok(cfg.width.from_bits(cfg.magic.wrapping_sub(bits >> 1)))
}

/// `iters` Newton steps in single precision, with `x/2` formed once.
pub fn newton_refine(y0: f64, x: f64, iters: u32) -> f64 {
    let half_x = 0.5f32 * x as f32;
    let mut y = y0 as f32;
    for _ in 0..iters {
        y = y * (1.5f32 - half_x * y * y);
    }
    y as f64
}

/// Approximate `1/sqrt(x)` in the configured width.
pub fn invsqrt(x: f64, cfg: &InvSqrtConfig) -> Result<f64> {
    let y0 = invsqrt_initial(x, cfg)?;
    let x = cfg.width.round(x);
    Ok(cfg.width.round(newton_refine(y0, x, cfg.newton_iters)))
}

/// Newton refinement carried out on fixed-point operands.
///
/// Per step: `y^2`, `(x/2) * y^2`, `1.5 - that`, `y * (...)`: three multiplies
/// and one subtract, each product rounded back to `spec`.
pub fn newton_fixed(
    y0_raw: i128,
    half_x_raw: i128,
    spec: FixedPointSpec,
    iters: u32,
    rounding: Rounding,
) -> FixedValue {
    let f = spec.frac_bits;
    let mut saturated = false;
    let mut sat = |v: Option<i128>| -> i128 {
        let (r, s) = spec.saturate(v.unwrap_or(i128::MAX));
        saturated |= s;
        r
    };
    let mut y = y0_raw;
    for _ in 0..iters {
        let y2 = sat(mul_shift_round(y, y, f, rounding));
        let t = sat(mul_shift_round(half_x_raw, y2, f, rounding));
        let d = sat(Some(spec.one_and_half() - t));
        y = sat(mul_shift_round(y, d, f, rounding));
    }
    FixedValue { raw: y, saturated }
}

/// Initial guess in floating point, then Newton in fixed point per `spec`.
pub fn invsqrt_fixed_output(
    x: f64,
    cfg: &InvSqrtConfig,
    spec: FixedPointSpec,
) -> Result<FixedValue> {
    let y0 = invsqrt_initial(x, cfg)?;
    let y0 = fp_to_fixed(y0, spec, Rounding::NearestEven);
    let half_x = fp_to_fixed(cfg.width.round(x) * 0.5, spec, Rounding::NearestEven);
    let out = newton_fixed(
        y0.raw,
        half_x.raw,
        spec,
        cfg.newton_iters,
        Rounding::NearestEven,
    );
    Ok(FixedValue {
        raw: out.raw,
        saturated: out.saturated || y0.saturated || half_x.saturated,
    })
}

/// Worst-case relative error bound after `iters` exact-arithmetic Newton steps,
/// starting from the initial-guess bound. With `y = (1 - e)/sqrt(x)` one step
/// gives `e' = 1.5 e^2 - 0.5 e^3`.
pub fn newton_error_bound(iters: u32) -> f64 {
    match iters {
        0 => INITIAL_GUESS_BOUND,
        1 => ONE_STEP_BOUND,
        _ => {
            let e = newton_error_bound(iters - 1);
            1.5 * e * e + 0.5 * e * e * e
        }
    }
}

/// Error envelope including the arithmetic floor of `width`.
pub fn envelope(width: FloatWidth, iters: u32) -> f64 {
    newton_error_bound(iters).max(4.0 * width.unit_roundoff())
}

/// Fewest Newton steps whose bound reaches `target` relative error (max 4).
pub fn iters_for_precision(target: f64) -> u32 {
    (0..4).find(|&k| newton_error_bound(k) <= target).unwrap_or(4)
}
