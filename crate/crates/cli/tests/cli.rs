use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trojatensor::zoo::{read_activations, read_atf_dims, Label, ModelEntry, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trojatensor"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn synth(dir: &Path, seed: &str) -> String {
    let out = run(&[
        "synth", "--out", dir.to_str().unwrap(), "--models", "10", "--d-min", "20", "--d-max", "60", "--seed", seed,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json").display().to_string()
}

const FAST: &[&str] = &["--rp-dim", "100", "--order", "4", "--rank", "4", "--pf2-tol", "1e-5", "--iva-tol", "1e-4"];

#[test]
fn detect_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("zoo"), "1");
    let mut reports = Vec::new();
    for run_dir in ["a", "b"] {
        let out_dir = dir.path().join(run_dir);
        let mut args = vec!["detect", "--manifest", &manifest, "--method", "parafac2", "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(FAST);
        let out = run(&args);
        let code = out.status.code().unwrap();
        assert!(code == 0 || code == 2, "exit {code}: {}", String::from_utf8_lossy(&out.stderr));
        for f in ["report.json", "verdicts.csv", "clusters.csv", "trace.csv", "corr_heatmap.ppm"] {
            assert!(out_dir.join(f).is_file(), "{f} missing");
        }
        reports.push(fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    let report_path = dir.path().join("a").join("report.json");
    let heat = dir.path().join("again.ppm");
    let out = run(&["report", "--input", report_path.to_str().unwrap(), "--heatmap", heat.to_str().unwrap(), "--cell", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read(&heat).unwrap().starts_with(b"P6\n30 30\n255\n"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("confusion"));
}

#[test]
fn detect_exit_code_tracks_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("zoo"), "2");
    let out_dir = dir.path().join("out");
    let mut args = vec!["detect", "--manifest", &manifest, "--method", "iva", "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(FAST);
    args.extend_from_slice(&["--iva-max-iter", "1"]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["diagnostics"]["converged"], serde_json::Value::Bool(false));
}

#[test]
fn missing_manifest_names_the_path() {
    let out = run(&["detect", "--manifest", "/definitely/not/here.json", "--method", "iva", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/definitely/not/here.json"), "{err}");
}

#[test]
fn invalid_synth_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", dir.path().to_str().unwrap(), "--backdoor-fraction", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backdoor_fraction"));
}

#[test]
fn bench_writes_timing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("zoo"), "3");
    let csv = dir.path().join("bench.csv");
    let mut args = vec!["bench", "--manifest", &manifest, "--out", csv.to_str().unwrap(), "--repeats", "2"];
    args.extend_from_slice(FAST);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "method,ingest_s,features_s,decomposition_s,stats_s,total_s");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let methods: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(methods, ["iva", "parafac2"]);
    for row in &rows {
        assert_eq!(row.len(), 6);
        for v in &row[1..] {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
}

fn npy_f32(shape: [usize; 3], values: &[f32]) -> Vec<u8> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        shape[0], shape[1], shape[2]
    );
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[test]
fn convert_npy_to_atf() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
    let npy = dir.path().join("net7.npy");
    fs::write(&npy, npy_f32([2, 3, 4], &values)).unwrap();
    let atf = dir.path().join("net7.atf");
    let out = run(&["convert", "--input", npy.to_str().unwrap(), "--output", atf.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_atf_dims(&atf).unwrap(), [2, 3, 4]);
    let entry = ModelEntry {
        id: "net7".into(),
        path: atf.clone(),
        label: Label::Clean,
        split: Split::Train,
        arch: String::new(),
    };
    let set = read_activations(&entry, (2, 3)).unwrap();
    assert_eq!(set.data(), values.as_slice());
}
