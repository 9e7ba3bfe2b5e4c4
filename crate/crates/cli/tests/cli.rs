use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn haan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haan"))
        .args(args)
        .current_dir(dir)
        .env_remove("HAAN_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trace() -> String {
    fixture("synthetic.haantrc").to_str().unwrap().to_string()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero_and_bad_flag_exits_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&haan(d.path(), &["--help"])), 0);
    assert_eq!(code(&haan(d.path(), &["norm", "--bogus"])), 1);
    assert_eq!(code(&haan(d.path(), &[])), 1);
}

#[test]
fn missing_input_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(d.path(), &["norm", "nope.haantrc", "--report", "r.csv"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn corrupt_trace_is_data_error() {
    let d = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(fixture("synthetic.haantrc")).unwrap();
    bytes.truncate(bytes.len() - 7);
    let p = d.path().join("cut.haantrc");
    std::fs::write(&p, bytes).unwrap();
    let o = haan(d.path(), &["norm", p.to_str().unwrap(), "--report", "r.csv"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("at byte"), "{}", stderr(&o));

    let garbage = write(d.path(), "g.haantrc", "not a trace");
    assert_eq!(code(&haan(d.path(), &["norm", &garbage, "--report", "r.csv"])), 2);
}

#[test]
fn config_error_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "bad.toml", "kind = \"layernorm\"\n[accel]\np_d = \"wide\"\n");
    let o = haan(d.path(), &["sim", &trace(), "--config", &cfg, "--report", "r.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("accel.p_d"), "{}", stderr(&o));

    let unknown = write(d.path(), "unk.toml", "kind = \"layernorm\"\n[accel]\nlanes = 4\n");
    let o = haan(d.path(), &["sim", &trace(), "--config", &unknown, "--report", "r.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lanes"), "{}", stderr(&o));
}

#[test]
fn too_few_lanes_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", "kind = \"layernorm\"\n[accel]\np_d = 4\n");
    let o = haan(d.path(), &["sim", &trace(), "--config", &cfg, "--report", "r.toml"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn single_layer_calibration_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let spec = write(
        d.path(),
        "one.toml",
        "model_id = \"one\"\nlayer_count = 1\nembedding_dim = 16\nsample_count = 2\n[profile]\ntype = \"table\"\nvalues = [1.0]\n",
    );
    let o = haan(d.path(), &["gen-trace", "--spec", &spec, "--out", "one.haantrc"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = haan(d.path(), &["calibrate", "one.haantrc", "--out", "p.toml"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn gap_wider_than_model_is_numeric_error() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(d.path(), &["calibrate", &trace(), "--min-gap", "30", "--out", "p.toml"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!d.path().join("p.toml").exists());
}

#[test]
fn rejected_threshold_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(d.path(), &["calibrate", &trace(), "--threshold", "-1.5", "--out", "p.toml"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!d.path().join("p.toml").exists());
}

#[test]
fn calibrate_recovers_fixture_window() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(d.path(), &["calibrate", &trace(), "--out", "p.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("skip_start=12"), "{out}");
    assert!(out.contains("skip_end=22"), "{out}");
    let doc = std::fs::read_to_string(d.path().join("p.toml")).unwrap();
    let v: toml::Value = doc.parse().unwrap();
    assert_eq!(v["skip_start"].as_integer(), Some(12));
    assert!((v["decay"].as_float().unwrap() + 0.08).abs() < 1e-9);

    // The written predictor is accepted by norm and sim.
    let o = haan(d.path(), &["norm", &trace(), "--predictor", "p.toml", "--report", "n.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = haan(d.path(), &["sim", &trace(), "--predictor", "p.toml", "--report", "s.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn tampered_predictor_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&haan(d.path(), &["calibrate", &trace(), "--out", "p.toml"])), 0);
    let doc = std::fs::read_to_string(d.path().join("p.toml")).unwrap();
    let bumped = doc.replace("schema_version = 1", "schema_version = 9");
    let p = write(d.path(), "p9.toml", &bumped);
    let o = haan(d.path(), &["norm", &trace(), "--predictor", &p, "--report", "n.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("schema_version"), "{}", stderr(&o));

    let swapped = doc.replace("skip_end = 22", "skip_end = 5");
    let p = write(d.path(), "pswap.toml", &swapped);
    let o = haan(d.path(), &["norm", &trace(), "--predictor", &p, "--report", "n.csv"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn conflicting_kind_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&haan(d.path(), &["calibrate", &trace(), "--out", "p.toml"])), 0);
    let o = haan(d.path(), &["norm", &trace(), "--predictor", "p.toml", "--kind", "rmsnorm", "--report", "n.csv"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn norm_report_rows() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(d.path(), &["norm", &trace(), "--format", "int8", "--nsub", "128", "--report", "n.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(d.path().join("n.csv")).unwrap();
    assert_eq!(r.headers().unwrap().get(3), Some("max_rel_err"));
    assert_eq!(r.records().count(), 24);
}

#[test]
fn subsampled_gaussian_isd_error_is_small() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(
        d.path(),
        &["gen-trace", "--out", "g.haantrc", "--layers", "4", "--dim", "4096", "--samples", "16", "--tail", "1,3,-0.05"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = haan(d.path(), &["norm", "g.haantrc", "--format", "fp64", "--nsub", "256", "--report", "n.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(d.path().join("n.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let isd_mean: f64 = rec[6].parse().unwrap();
        assert!(isd_mean <= 0.05, "layer {} isd mean error {isd_mean}", &rec[0]);
    }
}

#[test]
fn presets_load() {
    let d = tempfile::tempdir().unwrap();
    for preset in ["llama-7b", "opt-2.7b", "gpt2-1.5b"] {
        let o = haan(d.path(), &["sim", &trace(), "--preset", preset, "--report", "s.toml"]);
        // The fixture is 256 wide; presets with n_sub above that are rejected as config errors.
        let c = code(&o);
        assert!(c == 0 || c == 1, "{preset}: {}", stderr(&o));
        if c == 1 {
            assert!(stderr(&o).contains("n_sub"), "{preset}: {}", stderr(&o));
        }
    }
    let o = haan(d.path(), &["sim", &trace(), "--preset", "llama-7b", "--report", "s.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = haan(d.path(), &["sim", &trace(), "--preset", "nope", "--report", "s.toml"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sim_report_and_events_agree() {
    let d = tempfile::tempdir().unwrap();
    let cfg = fixture("sim.toml");
    let o = haan(
        d.path(),
        &["sim", &trace(), "--config", cfg.to_str().unwrap(), "--report", "s.toml", "--events", "e.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: toml::Value = std::fs::read_to_string(d.path().join("s.toml")).unwrap().parse().unwrap();
    let total = v["total_cycles"].as_integer().unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 24);
    for l in layers {
        assert_eq!(l["total_cycles"].as_integer(), l["closed_form_cycles"].as_integer());
    }
    let mut r = csv::Reader::from_path(d.path().join("e.csv")).unwrap();
    let last = r
        .records()
        .map(|rec| rec.unwrap()[0].parse::<i64>().unwrap())
        .max()
        .unwrap();
    assert_eq!(last, total);
}

#[test]
fn sweep_runs_grid_and_marks_one_balanced_point() {
    let d = tempfile::tempdir().unwrap();
    let grid = fixture("grid.toml");
    let o = haan(d.path(), &["sweep", &trace(), "--grid", grid.to_str().unwrap(), "--out", "sw"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(d.path().join("sw/summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 32);
    assert_eq!(rows.iter().filter(|r| &r[11] == "true").count(), 1);
    let totals: Vec<u64> = rows.iter().map(|r| r[10].parse().unwrap()).collect();
    assert!(totals.windows(2).all(|w| w[0] <= w[1]));
    assert!(d.path().join("sw/point_0000.toml").exists());
}

#[test]
fn sweep_duplicates_warn_and_empty_grid_fails() {
    let d = tempfile::tempdir().unwrap();
    let dup = write(
        d.path(),
        "dup.toml",
        "kind = \"layernorm\"\np_d = [32, 32]\np_n = [64]\nformat = [\"fp16\"]\n",
    );
    let o = haan(d.path(), &["sweep", &trace(), "--grid", &dup, "--out", "sw"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));
    let r = csv::Reader::from_path(d.path().join("sw/summary.csv")).unwrap();
    assert_eq!(r.into_records().count(), 1);

    let empty = write(d.path(), "empty.toml", "kind = \"layernorm\"\np_d = []\np_n = [64]\nformat = [\"fp16\"]\n");
    let o = haan(d.path(), &["sweep", &trace(), "--grid", &empty, "--out", "sw2"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn verify_passes_by_default() {
    let d = tempfile::tempdir().unwrap();
    let o = haan(d.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn verify_without_newton_uses_initial_bound() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "v.toml", "newton_iters = 0\nsamples = 20000\n");
    let o = haan(d.path(), &["verify", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.contains("invsqrt_envelope")).unwrap().to_string();
    assert!(line.contains("bound 3.500e-2"), "{line}");
}

#[test]
fn verify_rejects_bad_fixed_spec() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "v.toml", "[fixed_spec]\ntotal_bits = 16\nfrac_bits = 16\n");
    assert_eq!(code(&haan(d.path(), &["verify", "--config", &cfg])), 1);
    let cfg = write(d.path(), "w.toml", "[fixed_spec]\ntotal_bits = 32\n");
    let o = haan(d.path(), &["verify", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("fixed_spec"), "{}", stderr(&o));
}

#[test]
fn seed_sources_and_precedence() {
    let d = tempfile::tempdir().unwrap();
    let gen = |extra: &[&str], env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_haan"));
        c.args(["gen-trace", "--out", out, "--layers", "3", "--dim", "8", "--samples", "2", "--tail", "0,2,-0.1"])
            .args(extra)
            .current_dir(d.path())
            .env_remove("HAAN_SEED");
        if let Some(v) = env {
            c.env("HAAN_SEED", v);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(d.path().join(out)).unwrap()
    };
    let env5 = gen(&[], Some("5"), "a");
    let flag5 = gen(&["--seed", "5"], None, "b");
    let both = gen(&["--seed", "5"], Some("6"), "c");
    let env6 = gen(&[], Some("6"), "d");
    let default = gen(&[], None, "e");
    assert_eq!(env5, flag5);
    assert_eq!(both, flag5);
    assert_ne!(env6, env5);
    assert_ne!(default, env5);

    let o = Command::new(env!("CARGO_BIN_EXE_haan"))
        .args(["verify"])
        .env("HAAN_SEED", "x")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn shipped_fixture_regenerates() {
    let d = tempfile::tempdir().unwrap();
    let spec = fixture("synthetic.toml");
    let o = haan(d.path(), &["--seed", "7", "gen-trace", "--spec", spec.to_str().unwrap(), "--out", "t.haantrc"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(d.path().join("t.haantrc")).unwrap(),
        std::fs::read(fixture("synthetic.haantrc")).unwrap()
    );
}
