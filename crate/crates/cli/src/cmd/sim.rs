use std::fmt::Write as _;

use anyhow::Result;
use haan_core::calibrate::IsdPredictor;
use haan_core::norm::IsdMode;
use haan_core::sim::{audit_events, replay_total, sim_trace, AccelConfig, SimReport};
use haan_core::datapath::NormKind;
use haan_core::trace::ActivationTrace;

use crate::docs::{self, kind_name, toml_string, SimDocument};
use crate::report::{csv_writer, digest_chunks, digest_files, real, write_text};
use crate::{exit, SimArgs};

pub fn run(args: &SimArgs) -> Result<()> {
    let doc = match (&args.config, &args.preset) {
        (Some(path), None) => {
            docs::must_exist(path)?;
            SimDocument::load(path)?
        }
        (None, Some(name)) => docs::preset(name)?,
        (None, None) => SimDocument::from_str("", "defaults")?,
        (Some(_), Some(_)) => return Err(exit::usage("--config and --preset are exclusive")),
    };
    let trace = super::load_trace(&args.trace)?;
    let (pdoc, kind) = super::predictor_and_kind(args.predictor.as_deref(), Some(doc.kind))?;
    let predictor = pdoc.as_ref().map(|d| d.predictor());
    let report = simulate(&trace, kind, &doc.accel, predictor.as_ref())?;
    let digest = digest_files(&[&args.trace])?;
    write_text(&args.report, &report_toml(&report, kind, &doc.accel, &digest))?;
    if let Some(path) = &args.events {
        let mut w = csv_writer(path)?;
        w.write_record(["cycle", "unit", "sample", "layer", "event"])?;
        for e in &report.events {
            w.write_record([
                e.cycle.to_string(),
                e.unit.to_string(),
                e.sample.to_string(),
                e.layer.to_string(),
                e.kind.to_string(),
            ])?;
        }
        w.flush()?;
    }
    println!(
        "total_cycles={} layers={} samples={} seconds={}",
        report.total_cycles,
        report.layers.len(),
        report.sample_count,
        real(report.seconds())
    );
    Ok(())
}

/// Simulation plus the scheduler audit.
pub fn simulate(
    trace: &ActivationTrace,
    kind: NormKind,
    accel: &AccelConfig,
    predictor: Option<&IsdPredictor>,
) -> Result<SimReport> {
    let report = sim_trace(trace, kind, accel, predictor, true)?;
    audit_events(&report.events)?;
    if replay_total(&report.events) != report.total_cycles {
        return Err(exit::numeric("event log does not replay to the reported total"));
    }
    Ok(report)
}

pub fn report_toml(report: &SimReport, kind: NormKind, accel: &AccelConfig, trace_digest: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "schema_version = {}", docs::SCHEMA_VERSION);
    let _ = writeln!(s, "trace_digest = \"{trace_digest}\"");
    let _ = writeln!(s, "kind = \"{}\"", kind_name(kind));
    let _ = writeln!(s, "total_cycles = {}", report.total_cycles);
    let _ = writeln!(s, "clock_hz = {}", report.clock_hz);
    let _ = writeln!(s, "seconds = {}", real(report.seconds()));
    let _ = writeln!(s, "sample_count = {}", report.sample_count);
    let _ = writeln!(s, "throughput = {}", real(report.throughput));
    let _ = writeln!(s, "saturations = {}", report.saturations());
    let _ = writeln!(s, "variance_clamps = {}", report.variance_clamps());
    let _ = writeln!(s);
    let _ = writeln!(s, "[config]");
    let _ = writeln!(s, "p_d = {}", accel.p_d);
    let _ = writeln!(s, "p_n = {}", accel.p_n);
    let _ = writeln!(s, "format = {}", toml_string(&accel.format.to_string()));
    if let Some(k) = accel.n_sub {
        let _ = writeln!(s, "n_sub = {k}");
    }
    let _ = writeln!(s, "pipeline_depth = {}", accel.pipeline_depth);
    for layer in &report.layers {
        let t = &layer.timing;
        let outputs = layer.outputs.iter().map(|o| o.to_le_bytes()).collect::<Vec<_>>();
        let isds = layer.isds.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
        let _ = writeln!(s);
        let _ = writeln!(s, "[[layers]]");
        let _ = writeln!(s, "layer = {}", layer.layer);
        let mode = match layer.mode {
            IsdMode::Compute => "compute",
            IsdMode::Predicted => "predicted",
        };
        let _ = writeln!(s, "mode = \"{mode}\"");
        let _ = writeln!(s, "start_cycle = {}", layer.start_cycle);
        let _ = writeln!(s, "total_cycles = {}", layer.total_cycles);
        let _ = writeln!(s, "closed_form_cycles = {}", layer.closed_form_cycles);
        let _ = writeln!(s, "stats_cycles = {}", t.stats_cycles);
        let _ = writeln!(s, "invsqrt_cycles = {}", t.invsqrt_cycles);
        let _ = writeln!(s, "norm_cycles = {}", t.norm_cycles);
        let _ = writeln!(s, "initiation_interval = {}", t.initiation_interval);
        let _ = writeln!(s, "saturations = {}", layer.saturations);
        let _ = writeln!(s, "variance_clamps = {}", layer.variance_clamps);
        let _ = writeln!(s, "output_digest = \"{}\"", digest_chunks(outputs.iter().map(Vec::as_slice)));
        let _ = writeln!(s, "isd_digest = \"{}\"", digest_chunks([isds.as_slice()]));
    }
    s
}
