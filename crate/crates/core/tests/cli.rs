use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moesd::calibration::CalibrationMatrix;
use moesd::cli::{manifest_path, RunManifest};
use moesd::gate::{read_decisions_csv, SkewLabelTable, Verdict};
use moesd::moe::read_samples_csv;
use nalgebra::DMatrix;
use tempfile::TempDir;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .to_str()
        .unwrap()
        .to_owned()
}

fn moesd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = moesd(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

fn calibrate(dir: &TempDir, lambda: &str, name: &str) -> String {
    let out = path(dir, name);
    ok(&[
        "calibrate",
        "--pairs",
        &fixture("planted_pairs.embd"),
        "--lambda",
        lambda,
        "--out",
        &out,
    ]);
    out
}

fn gate(dir: &TempDir, calib: &str, name: &str) -> String {
    let out = path(dir, name);
    ok(&[
        "gate",
        "--calib",
        calib,
        "--prompts",
        &fixture("planted_prompts.embd"),
        "--male",
        &fixture("planted_male.embd"),
        "--female",
        &fixture("planted_female.embd"),
        "--out",
        &out,
    ]);
    out
}

#[test]
fn calibrate_zero_lambda_writes_identity_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = calibrate(&dir, "0", "c.cmat");
    let c = CalibrationMatrix::load(&out).unwrap();
    assert_eq!(c.matrix(), &DMatrix::identity(32, 32));

    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(Path::new(&out))).unwrap()).unwrap();
    assert_eq!(m.subcommand, "calibrate");
    assert_eq!(m.outputs, vec![PathBuf::from(&out)]);
    assert_eq!(m.config["lambda"], 0.0);
    let digest = &m.inputs[&fixture("planted_pairs.embd")];
    assert_eq!(
        digest,
        &moesd::cli::file_digest(Path::new(&fixture("planted_pairs.embd"))).unwrap()
    );
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn calibrate_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let a = calibrate(&dir, "100", "a.cmat");
    let b = calibrate(&dir, "100", "b.cmat");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn missing_input_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "nope.embd");
    let out = moesd(&["calibrate", "--pairs", &missing, "--out", &path(&dir, "c.cmat")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn corrupt_input_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let bad = path(&dir, "bad.embd");
    std::fs::write(&bad, b"EMBX\x01\x00\x00\x00").unwrap();
    let out = moesd(&["calibrate", "--pairs", &bad, "--out", &path(&dir, "c.cmat")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&bad) && err.contains("magic"), "{err}");
}

#[test]
fn unknown_flags_are_rejected_and_help_shows_defaults() {
    let out = moesd(&["eval-fairness", "--labels", "x.csv", "--out", "y.json", "--verbose"]);
    assert_eq!(out.status.code(), Some(2));
    let help = ok(&["calibrate", "--help"]);
    assert!(help.contains("--lambda") && help.contains("[default: 4000]"), "{help}");
    assert!(help.contains("--threads"));
    let help = ok(&["demo-e2e", "--help"]);
    for flag in ["--config", "--seed", "--steps", "--expert-steps", "--samples", "--out"] {
        assert!(help.contains(flag), "{flag} missing");
    }
}

#[test]
fn gate_at_zero_lambda_says_none_everywhere() {
    let dir = TempDir::new().unwrap();
    let calib = calibrate(&dir, "0", "c.cmat");
    let out = gate(&dir, &calib, "d.csv");
    let decisions = read_decisions_csv(std::fs::File::open(out).unwrap()).unwrap();
    assert_eq!(decisions.len(), 60);
    assert!(decisions.iter().all(|d| d.verdict == Verdict::None && d.skew == 0.0));
}

#[test]
fn gate_matches_planted_truth_and_repeats_exactly() {
    let dir = TempDir::new().unwrap();
    let calib = calibrate(&dir, "100", "c.cmat");
    let a = gate(&dir, &calib, "a.csv");
    let b = gate(&dir, &calib, "b.csv");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let labels = SkewLabelTable::load(fixture("planted_labels.csv")).unwrap();
    let decisions = read_decisions_csv(std::fs::File::open(&a).unwrap()).unwrap();
    let prompts: Vec<String> = decisions.iter().map(|d| d.prompt_label.clone()).collect();
    let order: Vec<&str> = labels.occupations().collect();
    assert_eq!(prompts, order, "decisions follow prompt-file order");
    let hits = decisions
        .iter()
        .filter(|d| labels.label(&d.prompt_label) == Some(d.verdict))
        .count();
    assert!(hits as f64 >= 0.9 * decisions.len() as f64, "{hits}/60");
}

#[test]
fn gate_rejects_mismatched_label_sets() {
    let dir = TempDir::new().unwrap();
    let calib = calibrate(&dir, "100", "c.cmat");
    let out = moesd(&[
        "gate",
        "--calib",
        &calib,
        "--prompts",
        &fixture("planted_prompts.embd"),
        "--male",
        &fixture("planted_pairs.embd"),
        "--female",
        &fixture("planted_female.embd"),
        "--out",
        &path(&dir, "d.csv"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_and_gate_eval_agree() {
    let dir = TempDir::new().unwrap();
    let emb = [
        "--prompts",
        &fixture("planted_prompts.embd"),
        "--male",
        &fixture("planted_male.embd"),
        "--female",
        &fixture("planted_female.embd"),
    ]
    .map(str::to_owned);
    let sweep = path(&dir, "sweep.csv");
    let mut args: Vec<String> = ["sweep-lambda", "--pairs", &fixture("planted_pairs.embd")]
        .map(str::to_owned)
        .to_vec();
    args.extend(emb.iter().cloned());
    args.extend(
        [
            "--labels",
            &fixture("planted_labels.csv"),
            "--lambdas",
            "0,100",
            "--out",
            &sweep,
        ]
        .map(str::to_owned),
    );
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let text = std::fs::read_to_string(&sweep).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,correct,total,accuracy");
    assert!(lines[1].starts_with("0.0,0,60,"), "{}", lines[1]);

    let eval = path(&dir, "eval.json");
    let mut args: Vec<String> = [
        "gate-eval",
        "--pairs",
        &fixture("planted_pairs.embd"),
        "--lambda",
        "100",
    ]
    .map(str::to_owned)
    .to_vec();
    args.extend(emb.iter().cloned());
    args.extend(["--labels", &fixture("planted_labels.csv"), "--out", &eval].map(str::to_owned));
    let stdout = ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(stdout.starts_with("accuracy"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval).unwrap()).unwrap();
    let correct = v["correct"].as_u64().unwrap();
    assert!(
        lines[2].starts_with(&format!("100.0,{correct},60,")),
        "{} vs {correct}",
        lines[2]
    );
}

#[test]
fn eval_fairness_all_male_is_half() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "f.json");
    let stdout = ok(&[
        "eval-fairness",
        "--labels",
        &fixture("all_male_labels.csv"),
        "--out",
        &out,
    ]);
    assert!(stdout.contains("0.5000"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["score"], 0.5);
    assert_eq!(v["std"], 0.0);
    assert_eq!(v["attribute"], "male");
    let keys: Vec<&String> = v["per_occupation"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["doctor", "nurse", "pilot"]);
}

#[test]
fn eval_fairness_rejects_unlisted_labels() {
    let dir = TempDir::new().unwrap();
    let out = moesd(&[
        "eval-fairness",
        "--labels",
        &fixture("mixed_labels.csv"),
        "--attributes",
        "a,b",
        "--out",
        &path(&dir, "f.json"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mixed_labels.csv"));
}

#[test]
fn config_errors_exit_2_and_divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let bad = path(&dir, "bad.json");
    std::fs::write(&bad, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = moesd(&["pretrain", "--config", &bad, "--out", &path(&dir, "b.tden")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    let wild = path(&dir, "wild.json");
    std::fs::write(
        &wild,
        r#"{"k": 3, "d_c": 8, "d_h": 6, "d_x": 8, "rank": 2, "T": 10, "steps": 200, "concepts": 4, "lr": 1e9}"#,
    )
    .unwrap();
    let out = moesd(&["pretrain", "--config", &wild, "--out", &path(&dir, "b.tden")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn staged_pipeline_runs_and_repeats() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("toy_tiny.json");
    let base = path(&dir, "base.tden");
    ok(&["pretrain", "--config", &cfg, "--out", &base]);
    let experts = path(&dir, "experts");
    ok(&["train-experts", "--config", &cfg, "--base", &base, "--out", &experts]);
    let male = format!("{experts}/male.bias");
    let female = format!("{experts}/female.bias");

    let run = |name: &str, threads: &str| {
        let out = path(&dir, name);
        let labels = path(&dir, &format!("{name}.labels.csv"));
        ok(&[
            "sample",
            "--threads",
            threads,
            "--config",
            &cfg,
            "--pipeline",
            &fixture("pipeline.json"),
            "--base",
            &base,
            "--male",
            &male,
            "--female",
            &female,
            "--out",
            &out,
            "--labels-out",
            &labels,
        ]);
        (std::fs::read(out).unwrap(), std::fs::read(labels).unwrap())
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "3");
    assert_eq!(a, b);
    let records = read_samples_csv(a.0.as_slice()).unwrap();
    assert_eq!(records.len(), 4 * 20);

    let labels = path(&dir, "a.csv.labels.csv");
    let report = path(&dir, "fair.json");
    ok(&["eval-fairness", "--labels", &labels, "--out", &report]);

    let base_only = path(&dir, "base_only.csv");
    ok(&[
        "sample",
        "--config",
        &cfg,
        "--base",
        &base,
        "--base-only",
        "--out",
        &base_only,
    ]);
    let records = read_samples_csv(std::fs::File::open(&base_only).unwrap()).unwrap();
    assert!(records.iter().all(|r| r.verdict == Verdict::None));

    let m: RunManifest =
        serde_json::from_slice(&std::fs::read(manifest_path(Path::new(&path(&dir, "a.csv")))).unwrap()).unwrap();
    assert_eq!(m.seeds["seed"], 7);
    assert_eq!(m.inputs.len(), 5);
    assert_eq!(m.outputs.len(), 2);
}

#[test]
fn sample_without_checkpoints_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let out = moesd(&[
        "sample",
        "--config",
        &fixture("toy_tiny.json"),
        "--out",
        &path(&dir, "s.csv"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demo_report_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("toy_tiny.json");
    let a = path(&dir, "a.json");
    let b = path(&dir, "b.json");
    let stdout = ok(&["demo-e2e", "--config", &cfg, "--seed", "7", "--out", &a]);
    ok(&[
        "demo-e2e",
        "--config",
        &cfg,
        "--seed",
        "7",
        "--out",
        &b,
        "--threads",
        "2",
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(stdout.contains("fairness before") && stdout.contains("fairness after"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    assert_eq!(v["config"]["seed"], 7);
    assert_eq!(v["config"]["steps"], 200);
}
