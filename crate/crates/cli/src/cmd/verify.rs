use anyhow::Result;
use haan_core::datapath::NormKind;
use haan_core::exec::Exec;
use haan_core::invsqrt::{self, InvSqrtConfig, DEFAULT_SIGMA, FP32_MAGIC};
use haan_core::norm::{onepass_stats, onepass_stats_kind, subsampled_isd};
use haan_core::numerics::{fixed_to_fp, fp_to_fixed, FloatWidth, NumericFormat, Rounding};
use haan_core::trace::{generate_synthetic, ActivationTrace, SyntheticTraceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::docs::{self, VerifyDocument};
use crate::{exit, VerifyArgs};

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

pub fn run(args: &VerifyArgs, seed: u64) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            docs::must_exist(path)?;
            docs::load::<VerifyDocument>(path)?
        }
        None => VerifyDocument::default(),
    };
    cfg.fixed_spec.validate()?;
    let inv = InvSqrtConfig::new(FloatWidth::Fp32, cfg.sigma, cfg.newton_iters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let checks = vec![
        magic_pin()?,
        envelope(&inv, cfg.samples, &mut rng)?,
        onepass(cfg.vectors, &mut rng)?,
        fixed_round_trip(&cfg, &mut rng),
        trace_round_trip(seed)?,
        subsample_consistency(&mut rng)?,
    ];
    let failed = checks.iter().filter(|c| !c.pass).count();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(exit::numeric(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn magic_pin() -> Result<Check> {
    let m = invsqrt::magic_constant(FloatWidth::Fp32, DEFAULT_SIGMA)?;
    Ok(Check {
        name: "magic_constant",
        pass: m == FP32_MAGIC,
        detail: format!("sigma={DEFAULT_SIGMA} -> {m:#010x}, expected {FP32_MAGIC:#010x}"),
    })
}

fn envelope(cfg: &InvSqrtConfig, samples: usize, rng: &mut ChaCha8Rng) -> Result<Check> {
    let bound = invsqrt::newton_error_bound(cfg.newton_iters);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = FloatWidth::Fp32.round(2f64.powf(rng.gen_range(-120.0..120.0)));
        let y = invsqrt::invsqrt(x, cfg)?;
        worst = worst.max((y * x.sqrt() - 1.0).abs());
    }
    Ok(Check {
        name: "invsqrt_envelope",
        pass: worst <= bound,
        detail: format!(
            "{} iteration(s), max relative error {worst:.3e} over {samples} samples, bound {bound:.3e}",
            cfg.newton_iters
        ),
    })
}

fn onepass(vectors: usize, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for i in 0..vectors {
        let n = [16, 257, 4096][i % 3];
        let shift = rng.gen_range(-10.0..10.0);
        let z: Vec<f64> = (0..n).map(|_| shift + rng.gen_range(-1.0..1.0)).collect();
        let mean = z.iter().sum::<f64>() / n as f64;
        let two = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let one = onepass_stats(&z, NumericFormat::Fp64)?.variance;
        worst = worst.max((one - two).abs() / two);
    }
    Ok(Check {
        name: "onepass_variance",
        pass: worst <= 1e-9,
        detail: format!("max relative difference {worst:.3e} over {vectors} vectors"),
    })
}

fn fixed_round_trip(cfg: &VerifyDocument, rng: &mut ChaCha8Rng) -> Check {
    let spec = cfg.fixed_spec;
    let res = spec.resolution();
    let mut worst = 0.0f64;
    for _ in 0..cfg.samples.min(10_000) {
        let x = rng.gen_range(spec.min_value()..spec.max_value());
        let back = fixed_to_fp(fp_to_fixed(x, spec, Rounding::NearestEven).raw, spec, FloatWidth::Fp32);
        // Error budget: half a fixed-point step plus FP32 rounding of the result.
        let budget = res / 2.0 + FloatWidth::Fp32.unit_roundoff() * x.abs().max(res);
        worst = worst.max((back - x).abs() / budget);
    }
    Check {
        name: "fixed_round_trip",
        pass: worst <= 1.0,
        detail: format!("{spec}: worst error {worst:.3} of budget"),
    }
}

fn trace_round_trip(seed: u64) -> Result<Check> {
    let spec = SyntheticTraceSpec::log_linear_tail(6, 16, 2, (2, 5, -0.1));
    let t = generate_synthetic(&spec, seed, Exec::Sequential)?;
    let mut buf = Vec::new();
    t.write_to(&mut buf)?;
    let back = ActivationTrace::read_from(&buf[..])?;
    Ok(Check {
        name: "trace_round_trip",
        pass: back == t,
        detail: format!("{} bytes", buf.len()),
    })
}

fn subsample_consistency(rng: &mut ChaCha8Rng) -> Result<Check> {
    let z: Vec<f64> = (0..300).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut pass = true;
    for fmt in [NumericFormat::Fp64, NumericFormat::Fp32, NumericFormat::Fp16, NumericFormat::Int8] {
        for kind in [NormKind::LayerNorm, NormKind::RmsNorm] {
            let full = onepass_stats_kind(&z, fmt, kind)?.isd;
            let sub = subsampled_isd(&z, z.len(), fmt, kind)?;
            pass &= full.to_bits() == sub.to_bits();
        }
    }
    Ok(Check {
        name: "subsample_consistency",
        pass,
        detail: "n_sub = N matches full statistics bit for bit".into(),
    })
}
