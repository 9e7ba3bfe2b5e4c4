use anyhow::{Context, Result};
use haan_core::exec::Exec;
use haan_core::trace::{generate_synthetic, SyntheticTraceSpec};

use crate::docs;
use crate::report::digest_files;
use crate::{exit, GenTraceArgs};

fn parse_tail(s: &str) -> Result<(usize, usize, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || exit::usage(format!("--tail expects start,end,slope, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

pub fn run(args: &GenTraceArgs, seed: u64) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            docs::must_exist(path)?;
            docs::load::<SyntheticTraceSpec>(path)?
        }
        None => {
            let mut s = SyntheticTraceSpec::log_linear_tail(
                args.layers,
                args.dim,
                args.samples,
                parse_tail(&args.tail)?,
            );
            s.noise_sigma = args.noise;
            s.exact_moments = args.exact;
            s.model_id = args.model_id.clone();
            s
        }
    };
    let trace = generate_synthetic(&spec, seed, Exec::Parallel)?;
    trace
        .write_file(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} ({} samples x {} layers x {}) sha256={}",
        args.out.display(),
        trace.sample_count(),
        trace.layer_count(),
        trace.embedding_dim(),
        digest_files(&[&args.out])?
    );
    Ok(())
}
