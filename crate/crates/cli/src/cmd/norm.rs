use anyhow::Result;
use haan_core::exec::{self, Exec};
use haan_core::norm::{reference_isd, reference_norm, relative_errors, run_model, NormConfig};

use crate::report::{csv_writer, real};
use crate::NormArgs;

pub const HEADER: [&str; 9] = [
    "layer",
    "label",
    "mode",
    "max_rel_err",
    "mean_rel_err",
    "isd_max_rel_err",
    "isd_mean_rel_err",
    "saturations",
    "variance_clamps",
];

pub fn run(args: &NormArgs) -> Result<()> {
    let trace = super::load_trace(&args.trace)?;
    let (doc, kind) = super::predictor_and_kind(args.predictor.as_deref(), args.kind)?;
    let predictor = doc.as_ref().map(|d| d.predictor());
    let n = trace.embedding_dim();
    let mut cfg = NormConfig::new(kind, n)
        .with_format(args.format)
        .with_n_sub(args.nsub.unwrap_or(n));
    cfg.precision.full_mean = args.full_mean;
    cfg.precision.newton_iters = args.newton_iters.or(cfg.precision.newton_iters);
    cfg.validate()?;

    let outcomes = run_model(Exec::Parallel, &trace, &cfg, predictor.as_ref())?;
    let reference_cfg = NormConfig::new(kind, n);
    let layers: Vec<usize> = (0..trace.layer_count()).collect();
    let rows = exec::try_map(Exec::Parallel, &layers, |&l| -> haan_core::Result<Vec<String>> {
        let (mut max, mut mean_sum, mut isd_max, mut isd_sum) = (0.0f64, 0.0, 0.0f64, 0.0);
        let (mut sat, mut clamps) = (0usize, 0usize);
        for (s, per_layer) in outcomes.iter().enumerate() {
            let z = trace.vector_f64(s, l);
            let o = &per_layer[l];
            let reference = reference_norm(&z, &reference_cfg)?;
            let (m, mean) = relative_errors(&o.output.to_f64(), &reference);
            max = max.max(m);
            mean_sum += mean;
            let r = reference_isd(&z, kind)?;
            let e = (o.isd - r).abs() / r;
            isd_max = isd_max.max(e);
            isd_sum += e;
            sat += o.saturations;
            clamps += o.clamped as usize;
        }
        let samples = outcomes.len().max(1) as f64;
        let mode = match &predictor {
            Some(p) if p.is_skipped(l) => "predicted",
            _ => "compute",
        };
        Ok(vec![
            l.to_string(),
            trace.layer_labels()[l].clone(),
            mode.to_string(),
            real(max),
            real(mean_sum / samples),
            real(isd_max),
            real(isd_sum / samples),
            sat.to_string(),
            clamps.to_string(),
        ])
    })?;

    let mut w = csv_writer(&args.report)?;
    w.write_record(HEADER)?;
    let mut worst = 0.0f64;
    for row in &rows {
        worst = worst.max(row[3].parse().unwrap_or(f64::NAN));
        w.write_record(row)?;
    }
    w.flush()?;
    println!(
        "format={} n_sub={} layers={} samples={} max_rel_err={}",
        args.format,
        cfg.n_sub,
        trace.layer_count(),
        trace.sample_count(),
        real(worst)
    );
    Ok(())
}
