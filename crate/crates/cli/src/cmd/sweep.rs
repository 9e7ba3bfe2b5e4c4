use std::collections::HashSet;

use anyhow::{Context, Result};
use haan_core::exec::{self, Exec};
use haan_core::numerics::NumericFormat;
use haan_core::sim::AccelConfig;

use crate::docs::{self, GridDocument};
use crate::report::{csv_writer, digest_files, write_text};
use crate::{exit, SweepArgs};

pub const HEADER: [&str; 14] = [
    "index",
    "p_d",
    "p_n",
    "format",
    "n_sub",
    "pipeline_depth",
    "stats_cycles",
    "invsqrt_cycles",
    "norm_cycles",
    "initiation_interval",
    "total_cycles",
    "balanced",
    "status",
    "report",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Point {
    p_d: usize,
    p_n: usize,
    format: NumericFormat,
    n_sub: Option<usize>,
    pipeline_depth: usize,
}

/// Grid points in declaration order with duplicates removed.
fn expand(grid: &GridDocument) -> Result<Vec<Point>> {
    let n_subs: Vec<Option<usize>> = match &grid.n_sub {
        None => vec![None],
        Some(v) => v.iter().copied().map(Some).collect(),
    };
    if grid.p_d.is_empty()
        || grid.p_n.is_empty()
        || grid.format.is_empty()
        || n_subs.is_empty()
        || grid.pipeline_depth.is_empty()
    {
        return Err(exit::usage("sweep grid is empty"));
    }
    let mut seen = HashSet::new();
    let mut points = Vec::new();
    for &p_d in &grid.p_d {
        for &p_n in &grid.p_n {
            for &format in &grid.format {
                for &n_sub in &n_subs {
                    for &pipeline_depth in &grid.pipeline_depth {
                        let p = Point { p_d, p_n, format, n_sub, pipeline_depth };
                        if seen.insert(p.clone()) {
                            points.push(p);
                        } else {
                            eprintln!(
                                "warning: duplicate grid point p_d={p_d} p_n={p_n} format={format} n_sub={} pipeline_depth={pipeline_depth} skipped",
                                n_sub.map_or("full".into(), |k| k.to_string())
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(points)
}

struct Outcome {
    stats: u64,
    invsqrt: u64,
    norm: u64,
    ii: u64,
    total: u64,
}

pub fn run(args: &SweepArgs) -> Result<()> {
    docs::must_exist(&args.grid)?;
    let grid: GridDocument = docs::load(&args.grid)?;
    let points = expand(&grid)?;
    let trace = super::load_trace(&args.trace)?;
    let (pdoc, kind) = super::predictor_and_kind(args.predictor.as_deref(), Some(grid.kind))?;
    let predictor = pdoc.as_ref().map(|d| d.predictor());
    let digest = digest_files(&[&args.trace])?;
    std::fs::create_dir_all(&args.out)
        .map_err(haan_core::Error::from)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let results = exec::map_range(Exec::Parallel, points.len(), |i| {
        let p = &points[i];
        let accel = AccelConfig {
            p_d: p.p_d,
            p_n: p.p_n,
            format: p.format,
            n_sub: p.n_sub,
            pipeline_depth: p.pipeline_depth,
            ..grid.base.clone()
        };
        let report = super::sim::simulate(&trace, kind, &accel, predictor.as_ref())?;
        let name = format!("point_{i:04}.toml");
        write_text(
            &args.out.join(&name),
            &super::sim::report_toml(&report, kind, &accel, &digest),
        )?;
        let first = &report.layers[0].timing;
        Ok::<_, anyhow::Error>((
            Outcome {
                stats: first.stats_cycles,
                invsqrt: first.invsqrt_cycles,
                norm: first.norm_cycles,
                ii: first.initiation_interval,
                total: report.total_cycles,
            },
            name,
        ))
    });

    let balanced = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().ok().map(|(o, _)| (i, o)))
        .min_by_key(|(i, o)| (o.ii, o.stats.abs_diff(o.norm), o.total, *i))
        .map(|(i, _)| i);

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (results[i].as_ref().map_or(u64::MAX, |(o, _)| o.total), i));

    let mut w = csv_writer(&args.out.join("summary.csv"))?;
    w.write_record(HEADER)?;
    let mut failures = 0;
    for &i in &order {
        let p = &points[i];
        let mut row = vec![
            i.to_string(),
            p.p_d.to_string(),
            p.p_n.to_string(),
            p.format.to_string(),
            p.n_sub.map_or("full".into(), |k| k.to_string()),
            p.pipeline_depth.to_string(),
        ];
        match &results[i] {
            Ok((o, name)) => row.extend([
                o.stats.to_string(),
                o.invsqrt.to_string(),
                o.norm.to_string(),
                o.ii.to_string(),
                o.total.to_string(),
                (balanced == Some(i)).to_string(),
                "ok".into(),
                name.clone(),
            ]),
            Err(e) => {
                failures += 1;
                eprintln!("warning: grid point {i} failed: {e:#}");
                row.extend(["", "", "", "", "", "false"].map(String::from));
                row.push(format!("error: {e:#}"));
                row.push(String::new());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    match balanced {
        Some(i) => {
            let p = &points[i];
            println!(
                "points={} failed={failures} balanced: index={i} p_d={} p_n={} format={} pipeline_depth={}",
                points.len(),
                p.p_d,
                p.p_n,
                p.format,
                p.pipeline_depth
            );
            Ok(())
        }
        None => Err(exit::numeric("every grid point failed")),
    }
}
