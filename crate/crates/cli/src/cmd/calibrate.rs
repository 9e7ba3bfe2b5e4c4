use anyhow::Result;
use haan_core::calibrate::{calibrate_table, CalibrationOptions, ScanOptions};
use haan_core::exec::Exec;
use haan_core::trace::extract_isd_table;

use crate::docs::PredictorDocument;
use crate::report::{csv_writer, digest_files, real, write_text};
use crate::{exit, CalibrateArgs};

pub fn run(args: &CalibrateArgs) -> Result<()> {
    let mut table = None;
    let mut model_id = String::new();
    for path in &args.traces {
        let trace = super::load_trace(path)?;
        if trace.layer_count() < 2 {
            return Err(exit::usage(format!(
                "{} has {} layer(s); calibration needs at least 2",
                path.display(),
                trace.layer_count()
            )));
        }
        let t = extract_isd_table(&trace, args.kind, Exec::Parallel)?;
        match &mut table {
            None => {
                model_id = trace.model_id().to_string();
                table = Some(t);
            }
            Some(all) => all.append(t)?,
        }
    }
    let table = table.expect("at least one trace");

    if let Some(path) = &args.table {
        let mut w = csv_writer(path)?;
        w.write_record(["sample", "layer", "log_isd"])?;
        for (s, row) in table.rows().iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                w.write_record([s.to_string(), l.to_string(), real(*v)])?;
            }
        }
        w.flush()?;
    }

    let opts = CalibrationOptions {
        scan: ScanOptions {
            min_gap: args.min_gap,
            wide: args.wide,
        },
        threshold: args.threshold,
        anchor: args.anchor.into(),
    };
    let cal = calibrate_table(&table, &opts)?;
    let p = cal.predictor;
    println!(
        "skip_start={} skip_end={} decay={} min_cor={}",
        p.skip_start,
        p.skip_end,
        real(p.decay),
        real(cal.min_cor)
    );
    if !cal.accepted {
        return Err(exit::numeric(format!(
            "best window correlation {} is above the threshold {}; predictor not written",
            real(cal.min_cor),
            real(args.threshold)
        )));
    }
    let digest = digest_files(&args.traces)?;
    let doc = PredictorDocument::new(&model_id, args.kind, &cal, args.min_gap, args.threshold, digest);
    write_text(&args.out, &doc.to_toml())
}
