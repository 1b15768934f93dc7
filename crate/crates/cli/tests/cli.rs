use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use flowssn::rank_analysis::{sublinearity_report, SpecFamily};
use serde_json::Value;

fn flowssn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowssn")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = flowssn(args, cwd);
    assert!(
        out.status.success(),
        "flowssn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rd.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Tiny datasets and trained checkpoints shared by the slower tests.
struct Fixture {
    root: PathBuf,
}

const IAF_TOML: &str = r#"
model = "flow_ssn_discrete"
dataset = "ms"
val_dataset = "ms_val"
output_dir = "runs/iaf"
seed = 1
max_steps = 20
eval_every = 10
batch_size = 8

[objective]
variant = "iaf_mc"
mc_samples = 8
"#;

const SSN_TOML: &str = r#"
model = "ssn"
dataset = "ms"
val_dataset = "ms_val"
output_dir = "runs/ssn"
seed = 1
max_steps = 20
eval_every = 10
batch_size = 8

[objective]
variant = "ssn"
mc_samples = 8

[network]
rank = 2
"#;

const CONT_TOML: &str = r#"
model = "flow_ssn_continuous"
dataset = "mr"
output_dir = "runs/cont"
seed = 1
max_steps = 6
batch_size = 4
solver = { method = "euler", steps = 4 }

[objective]
variant = "continuous"
mc_samples = 2

[network]
unet_width = 8
"#;

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        ok(&["generate-data", "--dataset", "markovshapes", "--out", "ms", "--count", "64", "--quadrant-size", "4"], &root);
        ok(
            &["generate-data", "--dataset", "markovshapes", "--out", "ms_val", "--count", "16", "--quadrant-size", "4", "--seed", "5"],
            &root,
        );
        ok(
            &["generate-data", "--dataset", "multirater", "--out", "mr", "--count", "12", "--raters", "3", "--shape", "16x16"],
            &root,
        );
        for (name, text) in [("iaf.toml", IAF_TOML), ("ssn.toml", SSN_TOML), ("cont.toml", CONT_TOML)] {
            fs::write(root.join(name), text).unwrap();
            ok(&["train", "--config", name], &root);
        }
        Fixture { root }
    })
}

#[test]
fn generate_data_is_byte_identical_and_documents_itself() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&["generate-data", "--dataset", "markovshapes", "--seed", "0", "--count", "10000", "--out", out], tmp.path());
    }
    let a = dir_bytes(&tmp.path().join("a"));
    let b = dir_bytes(&tmp.path().join("b"));
    // the run manifest echoes --out, everything else must match exactly
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != "run_manifest.json").collect::<Vec<_>>();
    assert_eq!(strip(a), strip(b));

    let m = json(&tmp.path().join("a/manifest.json"));
    assert_eq!(m["image_shape"], serde_json::json!([1, 16, 16]));
    assert_eq!(m["label_shape"][0], 2);
    assert_eq!(m["image_count"], 10000);
    let run = json(&tmp.path().join("a/run_manifest.json"));
    assert_eq!(run["seed"], 0);
    assert_eq!(run["generator"]["quadrant_size"], 8);
}

#[test]
fn multirater_manifest_reports_raters() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate-data", "--dataset", "multirater", "--raters", "4", "--count", "5", "--shape", "12x20", "--out", "mr"], tmp.path());
    let m = json(&tmp.path().join("mr/manifest.json"));
    assert_eq!(m["annotators_per_image"], 4);
    assert_eq!(m["label_shape"], serde_json::json!([2, 12, 20]));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["analyze-rank", "--dataset", "no/such/dir", "--out", "r.csv"],
        &["generate-data", "--dataset", "markovshapes", "--count", "3", "--out", "x", "--raters", "2"],
        &["generate-data", "--dataset", "multirater", "--count", "3", "--out", "x", "--shape", "12by3"],
        &["generate-data", "--dataset", "markovshapes", "--count", "3", "--out", "x", "--bogus"],
        &["plot", "--kind", "heatmap", "--out", "x.ppm"],
        &["train", "--config", "missing.toml"],
        &["evaluate", "--checkpoint", "none.ckpt", "--dataset", ".", "--out", "e.csv"],
    ];
    for args in cases {
        let out = flowssn(args, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?} printed no message");
    }
    let out = flowssn(&["analyze-rank", "--dataset", "no/such/dir", "--out", "r.csv"], tmp.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/dir"));
}

#[test]
fn markovshapes_rank_report_has_rank_twelve() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate-data", "--dataset", "markovshapes", "--count", "300", "--quadrant-size", "4", "--out", "ms"], tmp.path());
    ok(&["analyze-rank", "--dataset", "ms", "--out", "rank/ms.csv"], tmp.path());
    let (header, rows) = csv_rows(&tmp.path().join("rank/ms.csv"));
    assert_eq!(header[0], "source");
    let exact = rows.iter().find(|r| r[0] == "exact").unwrap();
    assert_eq!(exact[header.iter().position(|h| h == "numerical_rank").unwrap()], "12");
    assert!(rows.iter().any(|r| r[0] == "empirical"));
    for f in ["ms_exact.pgm", "ms_empirical.pgm"] {
        let bytes = fs::read(tmp.path().join("rank").join(f)).unwrap();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"), "{f}");
    }
    let manifest = json(&tmp.path().join("rank/ms.manifest.json"));
    let scale = &manifest["heatmaps"][0];
    assert!(scale["min"].as_f64().unwrap() < scale["max"].as_f64().unwrap());
}

#[test]
fn synthetic_rank_rows_match_the_library_report() {
    let tmp = tempfile::tempdir().unwrap();
    let samples = 20_000;
    ok(
        &["analyze-rank", "--synthetic", "2,64", "--ranks", "1,2,4,8,16", "--samples", "20000", "--seed", "0", "--out", "syn.csv"],
        tmp.path(),
    );
    let (_, rows) = csv_rows(&tmp.path().join("syn.csv"));
    assert_eq!(rows.len(), 5);
    let report = sublinearity_report(&SpecFamily::default_sublinearity(), &[1, 2, 4, 8, 16], 2, 64, samples, 1e-4, 0).unwrap();
    let eranks: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    for (got, want) in eranks.iter().zip(&report.reports) {
        assert!((got - want.effective_rank).abs() < 1e-6, "{got} vs {}", want.effective_rank);
    }
    assert!(eranks.windows(2).all(|w| w[1] > w[0]), "{eranks:?}");
    let slopes: Vec<f64> = eranks.windows(2).zip([1.0, 2.0, 4.0, 8.0]).map(|(w, dr)| (w[1] - w[0]) / dr).collect();
    assert!(slopes.windows(2).all(|w| w[1] <= w[0] + 0.1), "{slopes:?}");
    assert!(tmp.path().join("syn_r16.pgm").exists());
}

#[test]
fn training_writes_manifests_and_is_reproducible() {
    let f = fixture();
    let run = f.root.join("runs/iaf");
    for name in ["last.ckpt", "best.ckpt", "best.json", "train_log.csv", "config.resolved.toml", "run_manifest.json"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let manifest = json(&run.join("run_manifest.json"));
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["objective"]["variant"], "iaf_mc");

    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again");
    let config = f.root.join("iaf.toml");
    ok(&["train", "--config", config.to_str().unwrap(), "--out", again.to_str().unwrap()], tmp.path());
    let losses = |p: &Path| -> Vec<String> { csv_rows(&p.join("train_log.csv")).1.into_iter().map(|r| r[2].clone()).collect() };
    assert_eq!(losses(&run), losses(&again));
}

#[test]
fn sample_continuous_writes_maps_and_uncertainty() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = f.root.join("runs/cont/last.ckpt");
    let data = f.root.join("mr");
    ok(
        &["sample", "--checkpoint", ckpt.to_str().unwrap(), "--m", "16", "--steps", "50", "--dataset", data.to_str().unwrap(), "--out", "s"],
        tmp.path(),
    );
    let out = tmp.path().join("s");
    assert_eq!(fs::read(out.join("labels.bin")).unwrap().len(), 16 * 2 * 16 * 16);
    let previews = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".ppm")).count();
    assert_eq!(previews, 16);
    assert!(out.join("uncertainty.pgm").exists());
    let (_, rows) = csv_rows(&out.join("uncertainty.csv"));
    assert_eq!(rows.len(), 256);
    let manifest = json(&out.join("run_manifest.json"));
    assert_eq!(manifest["solver"]["steps"], 50);
    assert_eq!(manifest["labels"]["shape"], serde_json::json!([16, 2, 16, 16]));

    // conditional checkpoints need an input image
    let out = flowssn(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--out", "t"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_discrete_ignores_steps_with_warning() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = f.root.join("runs/iaf/last.ckpt");
    let out = ok(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--m", "4", "--steps", "50", "--out", "s"], tmp.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(fs::read(tmp.path().join("s/labels.bin")).unwrap().len(), 4 * 2 * 8 * 8);

    // same seed, same maps
    ok(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--m", "4", "--out", "t"], tmp.path());
    assert_eq!(fs::read(tmp.path().join("s/labels.bin")).unwrap(), fs::read(tmp.path().join("t/labels.bin")).unwrap());
}

#[test]
fn evaluate_reports_both_ged_columns() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = f.root.join("runs/cont/last.ckpt");
    let data = f.root.join("mr");
    let args = ["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--m", "100", "--steps", "2"];
    ok(&[&args[..], &["--out", "e1.csv"]].concat(), tmp.path());
    ok(&[&args[..], &["--out", "e2.csv"]].concat(), tmp.path());
    let (header, rows) = csv_rows(&tmp.path().join("e1.csv"));
    assert!(header.contains(&"ged16".to_string()) && header.contains(&"ged100".to_string()), "{header:?}");
    assert_eq!(rows.len(), 1);
    assert_eq!(fs::read(tmp.path().join("e1.csv")).unwrap(), fs::read(tmp.path().join("e2.csv")).unwrap());

    // an unconditional checkpoint scored on MarkovShapes reports bits per pixel
    let ckpt = f.root.join("runs/ssn/last.ckpt");
    let data = f.root.join("ms_val");
    ok(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--out", "b.csv"], tmp.path());
    let (header, rows) = csv_rows(&tmp.path().join("b.csv"));
    let bpd: f64 = rows[0][header.iter().position(|h| h == "bpd").unwrap()].parse().unwrap();
    assert!(bpd.is_finite() && bpd > 0.0);
}

#[test]
fn plots_render_charts_and_tidy_tables() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let log_a = f.root.join("runs/iaf/train_log.csv");
    let log_b = f.root.join("runs/ssn/train_log.csv");
    ok(&["plot", "--kind", "bpd", "--log", log_a.to_str().unwrap(), "--log", log_b.to_str().unwrap(), "--out", "bpd.ppm"], tmp.path());
    assert!(fs::read(tmp.path().join("bpd.ppm")).unwrap().starts_with(b"P6\n"));
    let (header, rows) = csv_rows(&tmp.path().join("bpd.csv"));
    assert_eq!(header, ["series", "step", "eval_metric"]);
    let mut series: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    series.dedup();
    assert_eq!(series, ["iaf/train_log", "ssn/train_log"]);

    let ckpt = f.root.join("runs/cont/last.ckpt");
    let data = f.root.join("mr");
    ok(
        &["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--m", "4", "--sweep", "2,5,10,50,250", "--out", "sweep.csv"],
        tmp.path(),
    );
    let (header, rows) = csv_rows(&tmp.path().join("sweep.csv"));
    assert_eq!(header[0], "steps");
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["2", "5", "10", "50", "250"]);
    ok(&["plot", "--kind", "ged-vs-steps", "--report", "sweep.csv", "--out", "ged.ppm"], tmp.path());
    let (_, rows) = csv_rows(&tmp.path().join("ged.csv"));
    let xs: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(json(&tmp.path().join("ged.manifest.json"))["summary"]["log_x"], true);

    let ckpt = f.root.join("runs/iaf/last.ckpt");
    ok(&["plot", "--kind", "covariance", "--checkpoint", ckpt.to_str().unwrap(), "--samples", "256", "--out", "cov.ppm"], tmp.path());
    let (header, rows) = csv_rows(&tmp.path().join("cov.csv"));
    assert_eq!(header, ["panel", "i", "j", "value"]);
    assert_eq!(rows.len(), 2 * 64 * 64);
    let scale = &json(&tmp.path().join("cov.manifest.json"))["summary"]["scale"];
    let values: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((scale["min"].as_f64().unwrap(), scale["max"].as_f64().unwrap()), (lo, hi));
}
