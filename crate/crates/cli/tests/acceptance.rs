//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria whose literal statement cannot hold are listed in
//! `EXPECTED_FAILURES` with the reason; they still run and print FAIL, and
//! the suite errors if one of them unexpectedly passes.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use haan_core::calibrate::{calibrate_table, CalibrationOptions};
use haan_core::datapath::NormKind;
use haan_core::exec::{self, Exec};
use haan_core::invsqrt::{invsqrt, invsqrt_initial, magic_constant, InvSqrtConfig};
use haan_core::norm::{onepass_stats, reference_isd, reference_norm, relative_errors, run_layer, subsampled_isd, IsdMode};
use haan_core::numerics::{FixedPointSpec, FloatWidth, NumericFormat};
use haan_core::sim::{replay_total, schedule, sim_layer, AccelConfig, LayerSpec};
use haan_core::trace::{extract_isd_table, generate_synthetic, SyntheticTraceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const EXPECTED_FAILURES: &[(u32, &str)] = &[(
    1,
    "1.5 * 2^23 * (127 - 0.450465) rounds to 0x5ee982bf; 0x5f3759df is produced by sigma = 0.0450466",
)];

fn log_uniform_fp32(rng: &mut impl Rng) -> f64 {
    // Positive normal FP32 spans 2^-126 .. 2^128.
    let e: f64 = rng.gen_range(-126.0..128.0);
    let x = FloatWidth::Fp32.round(2f64.powf(e));
    x.clamp(FloatWidth::Fp32.min_positive_normal(), f32::MAX as f64)
}

/// Magic-constant pin, as literally stated.
fn criterion_1() -> Outcome {
    let m = magic_constant(FloatWidth::Fp32, 0.450465).unwrap();
    // Independent oracle for what the formula yields.
    let oracle = (1.5 * 8388608.0 * (127.0 - 0.450465f64)).round() as u32;
    outcome(
        m == 0x5f3759df,
        format!("magic_constant(FP32, 0.450465) = {m:#010x} (direct arithmetic {oracle:#010x}), required 0x5f3759df"),
    )
}

/// Initial guess within 3.5%, one Newton step within 0.2%, 10^6 samples.
fn criterion_2() -> Outcome {
    let cfg = InvSqrtConfig::default();
    assert_eq!(cfg.newton_iters, 1);
    let chunks = 64;
    let per_chunk = 1_000_000 / chunks;
    let worst = exec::map_range(Exec::Parallel, chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE + c as u64);
        let (mut e0, mut e1) = (0.0f64, 0.0f64);
        for _ in 0..per_chunk {
            let x = log_uniform_fp32(&mut rng);
            let exact = 1.0 / x.sqrt();
            e0 = e0.max((invsqrt_initial(x, &cfg).unwrap() / exact - 1.0).abs());
            e1 = e1.max((invsqrt(x, &cfg).unwrap() / exact - 1.0).abs());
        }
        (e0, e1)
    });
    let e0 = worst.iter().map(|w| w.0).fold(0.0, f64::max);
    let e1 = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    outcome(
        e0 <= 0.035 && e1 <= 0.002,
        format!("max initial error {e0:.5}, after one step {e1:.6} over {} samples", chunks * per_chunk),
    )
}

/// One-pass vs two-pass variance within 1e-9 relative, 10^4 vectors.
fn criterion_3() -> Outcome {
    let worst = exec::map_range(Exec::Parallel, 10_000, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x3 << 32 | i as u64);
        let n = [16, 257, 4096][i % 3];
        let mean = rng.gen_range(-5.0..5.0);
        let sd = rng.gen_range(0.1..10.0);
        let d = Normal::new(mean, sd).unwrap();
        let z: Vec<f64> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let m = z.iter().sum::<f64>() / n as f64;
        let two = z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let one = onepass_stats(&z, NumericFormat::Fp64).unwrap().variance;
        (one - two).abs() / two
    })
    .into_iter()
    .fold(0.0, f64::max);
    outcome(worst <= 1e-9, format!("max relative difference {worst:.3e}"))
}

/// Planted window recovery, exact and with 0.02 log-ISD jitter.
fn criterion_4() -> Outcome {
    let spec = |noise: f64| {
        let mut s = SyntheticTraceSpec::log_linear_tail(64, 512, 16, (40, 60, -0.1));
        s.exact_moments = true;
        s.noise_sigma = noise;
        s
    };
    let calibrate = |noise: f64| {
        let t = generate_synthetic(&spec(noise), 4, Exec::Parallel).unwrap();
        let table = extract_isd_table(&t, NormKind::LayerNorm, Exec::Parallel).unwrap();
        calibrate_table(&table, &CalibrationOptions::new(10)).unwrap()
    };
    let exact = calibrate(0.0);
    let p = exact.predictor;
    let inside = p.skip_start >= 40 && p.skip_end <= 60;
    let cor_ok = (exact.min_cor + 1.0).abs() <= 1e-9;
    let slope_ok = (p.decay + 0.1).abs() <= 1e-6;
    let noisy = calibrate(0.02);
    let noisy_ok = ((noisy.predictor.decay + 0.1) / 0.1).abs() <= 0.10;
    outcome(
        inside && cor_ok && slope_ok && noisy_ok,
        format!(
            "window [{}, {}], r = {:.12}, slope {:.9}; noisy slope {:.5} (window [{}, {}])",
            p.skip_start,
            p.skip_end,
            exact.min_cor,
            p.decay,
            noisy.predictor.decay,
            noisy.predictor.skip_start,
            noisy.predictor.skip_end
        ),
    )
}

/// n_sub = 256 of N = 4096: ISD within 15% in at least 99% of 10^4 trials.
fn criterion_5() -> Outcome {
    let trials = 10_000;
    let errors = exec::map_range(Exec::Parallel, trials, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5 << 32 | i as u64);
        let sd = rng.gen_range(0.05..20.0);
        let z: Vec<f64> = (0..4096)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                sd * g
            })
            .collect();
        let full = reference_isd(&z, NormKind::LayerNorm).unwrap();
        let sub = subsampled_isd(&z, 256, NumericFormat::Fp64, NormKind::LayerNorm).unwrap();
        (sub / full - 1.0).abs()
    });
    let within = errors.iter().filter(|&&e| e <= 0.15).count();
    let mean = errors.iter().sum::<f64>() / trials as f64;
    outcome(
        within * 100 >= trials * 99,
        format!("{within}/{trials} trials within 15%, mean error {:.4}", mean),
    )
}

fn ceil_div(a: usize, b: usize) -> u64 {
    a.div_ceil(b) as u64
}

fn log2_ceil(p: usize) -> u64 {
    let mut d = 0;
    while (1usize << d) < p {
        d += 1;
    }
    d
}

/// Event-driven totals equal the closed form over >= 200 combinations.
fn criterion_6() -> Outcome {
    let mut combos = Vec::new();
    for n in [64usize, 100, 512, 1000, 4096] {
        for p_d in [8usize, 32, 128] {
            for p_n in [16usize, 128] {
                for n_sub in [n, n / 2, n / 4 + 1] {
                    for batch in [1usize, 3, 7] {
                        combos.push((n, p_d, p_n, n_sub, batch));
                    }
                }
            }
        }
    }
    let failures: Vec<String> = exec::map(Exec::Parallel, &combos, |&(n, p_d, p_n, n_sub, batch)| {
        let mut rng = ChaCha8Rng::seed_from_u64((n * 31 + p_d * 7 + p_n + n_sub * 131 + batch) as u64);
        let vs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let accel = AccelConfig {
            p_d,
            p_n,
            format: NumericFormat::Fp16,
            n_sub: Some(n_sub),
            ..AccelConfig::default()
        };
        let layer = LayerSpec::identity(NormKind::LayerNorm, n, IsdMode::Compute);
        let r = sim_layer(&vs, &layer, &accel, None).unwrap();
        let stats = ceil_div(n_sub, p_d) + log2_ceil(p_d) + 3;
        let norm = ceil_div(n, p_n) + 2;
        let stages = [stats, 6, norm];
        let closed = stages.iter().sum::<u64>() + (batch as u64 - 1) * stages.iter().max().unwrap();
        let (_, events, total) = schedule(
            accel.stage_cycles(n, NormKind::LayerNorm, IsdMode::Compute).unwrap(),
            IsdMode::Compute,
            1,
            batch,
            0,
            0,
        );
        let t = &r.timing;
        let ok = r.total_cycles == closed
            && total == closed
            && replay_total(&events) == closed
            && (t.stats_cycles, t.invsqrt_cycles, t.norm_cycles) == (stats, 6, norm);
        (!ok).then(|| format!("N={n} p_d={p_d} p_n={p_n} n_sub={n_sub} batch={batch}: {} vs {closed}", r.total_cycles))
    })
    .into_iter()
    .flatten()
    .collect();

    let mut halving_ok = true;
    for n in [64usize, 1000, 4096] {
        for p_d in [8usize, 32, 128] {
            let full = AccelConfig { p_d, n_sub: Some(n), ..AccelConfig::default() };
            let half = AccelConfig { n_sub: Some(n / 2), ..full.clone() };
            let cf = full.stage_cycles(n, NormKind::LayerNorm, IsdMode::Compute).unwrap().stats;
            let ch = half.stage_cycles(n, NormKind::LayerNorm, IsdMode::Compute).unwrap().stats;
            halving_ok &= cf - ch == ceil_div(n, p_d) - ceil_div(n / 2, p_d);
        }
    }
    outcome(
        failures.is_empty() && halving_ok && combos.len() >= 200,
        if failures.is_empty() {
            format!("{} combinations agree; n_sub halving saves exactly the predicted passes: {halving_ok}", combos.len())
        } else {
            format!("{} mismatches, first: {}", failures.len(), failures[0])
        },
    )
}

/// Simulator bit-identical to the library; FP32 full-length within 1e-5.
fn criterion_7() -> Outcome {
    let formats = [
        NumericFormat::Fp32,
        NumericFormat::Fp16,
        NumericFormat::Int8,
        NumericFormat::FixedPoint(FixedPointSpec::Q16_16),
        NumericFormat::Fp64,
    ];
    let layers: Vec<u64> = (0..100).collect();
    let results = exec::map(Exec::Parallel, &layers, |&seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7 << 32 | seed);
        let n = rng.gen_range(64..=768);
        let kind = if seed % 2 == 0 { NormKind::LayerNorm } else { NormKind::RmsNorm };
        let offset = rng.gen_range(-2.0..2.0);
        let scale = rng.gen_range(0.1..4.0);
        let batch: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| offset + scale * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let alpha: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let predicted: Vec<f64> = batch.iter().map(|z| reference_isd(z, kind).unwrap() * 1.01).collect();
        let mut mismatches = 0usize;
        let mut configs = 0usize;
        let mut fp32_err = 0.0f64;
        for fmt in formats {
            for n_sub in [n, n / 2, n / 3 + 1] {
                for mode in [IsdMode::Compute, IsdMode::Predicted] {
                    configs += 1;
                    let accel = AccelConfig { p_d: 32, p_n: 64, format: fmt, n_sub: Some(n_sub), ..AccelConfig::default() };
                    let layer = LayerSpec { kind, alpha: alpha.clone(), beta: beta.clone(), mode };
                    let report = sim_layer(&batch, &layer, &accel, Some(&predicted)).unwrap();
                    let cfg = accel.norm_config(&layer).unwrap();
                    for (i, z) in batch.iter().enumerate() {
                        let lib = run_layer(z, &cfg, Some(predicted[i])).unwrap();
                        if !lib.output.bit_identical(&report.outputs[i]) {
                            mismatches += 1;
                        }
                        if fmt == NumericFormat::Fp32 && n_sub == n && mode == IsdMode::Compute {
                            let reference = reference_norm(z, &cfg).unwrap();
                            fp32_err = fp32_err.max(relative_errors(&report.outputs[i].to_f64(), &reference).0);
                        }
                    }
                }
            }
        }
        (mismatches, configs, fp32_err)
    });
    let mismatches: usize = results.iter().map(|r| r.0).sum();
    let configs = results[0].1;
    let fp32 = results.iter().map(|r| r.2).fold(0.0, f64::max);
    outcome(
        mismatches == 0 && fp32 <= 1e-5,
        format!("{configs} configurations x 100 layers, {mismatches} mismatching vectors; FP32 max relative error {fp32:.3e}"),
    )
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn haan(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_haan"))
        .args(args)
        .current_dir(dir)
        .env_remove("HAAN_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("haan {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let fx = fixtures();
    let trace = fx.join("synthetic.haantrc");
    let trace = trace.to_str().unwrap();
    let sim = fx.join("sim.toml");
    haan(&["calibrate", trace, "--min-gap", "10", "--out", "predictor.toml", "--table", "isd.csv"], dir)?;
    haan(&["norm", trace, "--format", "fp16", "--nsub", "128", "--predictor", "predictor.toml", "--report", "norm.csv"], dir)?;
    haan(
        &["sim", trace, "--config", sim.to_str().unwrap(), "--predictor", "predictor.toml", "--report", "sim.toml", "--events", "events.csv"],
        dir,
    )?;
    haan(&["gen-trace", "--spec", fx.join("synthetic.toml").to_str().unwrap(), "--seed", "7", "--out", "regen.haantrc"], dir)?;
    ["predictor.toml", "isd.csv", "norm.csv", "sim.toml", "events.csv", "regen.haantrc"]
        .iter()
        .map(|f| {
            std::fs::read(dir.join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| format!("{f}: {e}"))
        })
        .collect()
}

/// calibrate -> norm -> sim twice on the shipped fixture, byte-compared.
fn criterion_8() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path| pipeline(d);
    match (run(a.path()), run(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&str> = x
                .iter()
                .zip(&y)
                .filter(|(p, q)| p.1 != q.1)
                .map(|(p, _)| p.0.as_str())
                .collect();
            let shipped = std::fs::read(fixtures().join("synthetic.haantrc")).unwrap();
            let regen = &x.iter().find(|f| f.0 == "regen.haantrc").unwrap().1;
            let same_fixture = &shipped == regen;
            outcome(
                differing.is_empty() && same_fixture,
                format!(
                    "{} artifacts compared, differing: {:?}; regenerated fixture matches shipped bytes: {same_fixture}",
                    x.len(),
                    differing
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "magic-constant pin", criterion_1),
        (2, "fast inverse-sqrt envelope", criterion_2),
        (3, "one-pass variance equivalence", criterion_3),
        (4, "planted-range recovery", criterion_4),
        (5, "subsampled ISD accuracy", criterion_5),
        (6, "simulator cycle model", criterion_6),
        (7, "simulator/library fidelity", criterion_7),
        (8, "end-to-end CLI determinism", criterion_8),
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut unexpected = 0;
    for (id, name, f) in criteria {
        if filter.is_some_and(|k| k != id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        let expected = EXPECTED_FAILURES.iter().find(|(k, _)| *k == id).map(|(_, why)| *why);
        let tag = match (result.pass, expected) {
            (true, None) => "PASS",
            (false, None) => {
                unexpected += 1;
                "FAIL"
            }
            (false, Some(_)) => "FAIL (expected)",
            (true, Some(_)) => {
                unexpected += 1;
                "PASS (unexpected; remove from EXPECTED_FAILURES)"
            }
        };
        println!(
            "[{tag}] criterion {id}: {name}: {} ({:.1}s)",
            result.detail,
            start.elapsed().as_secs_f64()
        );
        if let (false, Some(why)) = (result.pass, expected) {
            println!("        reason: {why}");
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criterion result(s) differ from expectations");
        std::process::exit(1);
    }
}
