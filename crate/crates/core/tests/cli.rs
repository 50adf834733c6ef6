use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavity-array"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CAVITY_ARRAY_THREADS")
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn scan_map_emits_full_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["scan-map", "--grid", "64x64", "--span", "10mm"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(tmp.path().join("survival_map.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x_mm,y_mm,round_trips"));
    assert_eq!(lines.count(), 4096);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!tmp.path().join("manifest.json").exists());
}

#[test]
fn unknown_flag_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["budget", "--frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn budget_writes_report_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/budget_reference.toml");
    let out = cli(&["budget", "--config", config.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("budget.json")).unwrap()).unwrap();
    assert!(report["quantities"].as_array().unwrap().iter().all(|q| q["formula"].is_string()));
    let m = manifest(tmp.path());
    assert_eq!(m["subcommand"], "budget");
    assert!(m["seed"].is_u64(), "omitted seed is drawn and recorded");
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"budget.json"));
}

#[test]
fn recorded_seed_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cli(&["simulate", "loading", "--shots", "50"], &a).status.code(), Some(0));
    let seed = manifest(&a)["seed"].as_u64().unwrap().to_string();
    assert_eq!(cli(&["simulate", "loading", "--shots", "50", "--seed", &seed], &b).status.code(), Some(0));
    assert_eq!(
        std::fs::read(a.join("loading.json")).unwrap(),
        std::fs::read(b.join("loading.json")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = ["scan-map", "--grid", "24x24", "--span", "8mm"];
    let mut one = args.to_vec();
    one.extend(["--threads", "1"]);
    let mut four = args.to_vec();
    four.extend(["--threads", "4"]);
    assert_eq!(cli(&one, &a).status.code(), Some(0));
    assert_eq!(cli(&four, &b).status.code(), Some(0));
    assert_eq!(
        std::fs::read(a.join("survival_map.csv")).unwrap(),
        std::fs::read(b.join("survival_map.csv")).unwrap()
    );
}

#[test]
fn missing_input_is_computation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["analyze", "spectrum", "--input", "does-not-exist.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn simulated_frames_round_trip_through_analysis() {
    let tmp = tempfile::tempdir().unwrap();
    let (sim, ana) = (tmp.path().join("sim"), tmp.path().join("ana"));
    assert_eq!(cli(&["simulate", "frames", "--seed", "8", "--shots", "300"], &sim).status.code(), Some(0));
    let args = [
        "analyze",
        "frames",
        "--frames",
        sim.join("frames.bin").to_str().unwrap(),
        "--geometry",
        sim.join("geometry.json").to_str().unwrap(),
        "--truth",
        sim.join("truth.csv").to_str().unwrap(),
    ]
    .map(String::from);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = cli(&refs, &ana);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ana.join("analysis.json")).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("fidelity"), "{text}");
    assert!(ana.join("correlation.csv").exists());
}
