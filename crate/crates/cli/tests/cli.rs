use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use karma_cli::commands::{load_data, load_model, AblationTable};
use karma_cli::ExperimentConfig;
use karma_core::evalkit::{evaluate, MetricsReport};
use karma_core::model::CheckpointFile;
use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

fn karma(cwd: &Path, args: &[&str]) -> Output {
    karma_cfg(cwd, &fixture(), args)
}

fn karma_cfg(cwd: &Path, cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_karma"))
        .current_dir(cwd)
        .env_remove("KARMA_OUTPUT_ROOT")
        .env_remove("KARMA_CONFIG")
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .expect("spawn karma")
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

/// A config derived from the fixture with one JSON field replaced.
fn patched(dir: &Path, path: &[&str], value: Value) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(fixture()).unwrap()).unwrap();
    let mut node = &mut v;
    for key in &path[..path.len() - 1] {
        node = node.get_mut(*key).unwrap();
    }
    node[path[path.len() - 1]] = value;
    let p = dir.join("patched.json");
    fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    p
}

fn with_data(dir: &Path) {
    ok(karma(dir, &["--out", "o", "gen-data"]));
}

fn params(path: &Path) -> Vec<(String, Vec<f32>)> {
    let f = CheckpointFile::read(path).unwrap();
    let mut out: Vec<(String, Vec<f32>)> = f
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("param/"))
        .map(|(n, t)| (n.clone(), t.data().to_vec()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn gen_data_is_byte_identical_and_reports_item_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = ok(karma(a.path(), &["--out", "o", "gen-data"]));
    ok(karma(b.path(), &["--out", "o", "gen-data"]));
    for f in ["catalog.jsonl", "sessions.jsonl", "split.json", "config.json"] {
        let x = fs::read(a.path().join("o/data").join(f)).unwrap();
        let y = fs::read(b.path().join("o/data").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    assert!(out_a.contains("items=60 "), "{out_a}");
    let lines = fs::read_to_string(a.path().join("o/data/catalog.jsonl"))
        .unwrap()
        .lines()
        .count();
    // Header line plus one line per item.
    assert_eq!(lines, 61);
}

#[test]
fn invalid_inputs_exit_with_usage_code() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        karma(d.path(), &["--out", "o", "train", "--variant", "karma-xl"])
            .status
            .code(),
        Some(2)
    );
    // No dataset yet.
    assert_eq!(karma(d.path(), &["--out", "o", "train"]).status.code(), Some(2));
    let bad = patched(d.path(), &["train", "batch_size"], Value::from(0));
    assert_eq!(
        karma_cfg(d.path(), &bad, &["--out", "o", "gen-data"]).status.code(),
        Some(2)
    );
    let typo = d.path().join("typo.json");
    fs::write(&typo, r#"{"trian": {}}"#).unwrap();
    assert_eq!(karma_cfg(d.path(), &typo, &["gen-data"]).status.code(), Some(2));
    with_data(d.path());
    let two = patched(d.path(), &["seeds"], serde_json::json!([0, 1]));
    assert_eq!(
        karma_cfg(d.path(), &two, &["--out", "o", "ablation", "--preset", "table1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        karma(d.path(), &["--out", "o", "eval", "--checkpoint", "missing.ckpt"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn action_only_matches_karma_without_decoder_weight() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    ok(karma(d.path(), &["--out", "o", "train", "--variant", "action-only"]));
    ok(karma(
        d.path(),
        &["--out", "o", "train", "--variant", "karma", "--lambda-dec", "0"],
    ));
    let a = params(&d.path().join("o/runs/action-only-seed0/final.ckpt"));
    let k = params(&d.path().join("o/runs/karma-seed0/final.ckpt"));
    assert!(!a.is_empty());
    assert!(a == k, "parameters differ");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    let cfg = patched(d.path(), &["checkpoint_every"], Value::from(3));
    let stdout = ok(karma_cfg(d.path(), &cfg, &["--out", "o", "train"]));
    let run = d.path().join("o/runs/karma-seed0");
    let straight = fs::read(run.join("final.ckpt")).unwrap();
    let straight_log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert!(stdout.contains(&karma_cli::commands::sha256_hex(&straight)));
    // 4 warm-up and 6 joint steps.
    assert_eq!(straight_log.lines().count(), 1 + 4 + 6);
    for ckpt in ["ckpt-warmup-3.bin", "ckpt-joint-3.bin"] {
        let from = d.path().join("from.bin");
        fs::copy(run.join(ckpt), &from).unwrap();
        ok(karma_cfg(
            d.path(),
            &cfg,
            &["--out", "o", "train", "--resume", from.to_str().unwrap()],
        ));
        assert!(
            fs::read(run.join("final.ckpt")).unwrap() == straight,
            "resumed from {ckpt}"
        );
        assert_eq!(
            fs::read_to_string(run.join("log.csv")).unwrap(),
            straight_log,
            "resumed from {ckpt}"
        );
    }
}

#[test]
fn eval_is_repeatable_clamps_k_and_matches_the_library() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    ok(karma(d.path(), &["--out", "o", "train", "--variant", "task1"]));
    let ckpt = d.path().join("o/runs/task1-seed0/final.ckpt");
    let args = [
        "--out",
        "o",
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--k",
        "5,500",
    ];
    let first = karma(d.path(), &args);
    assert!(String::from_utf8_lossy(&first.stderr).contains("clamped to 60"));
    let stdout = ok(first);
    assert!(stdout.contains("head calls during eval: 0"));
    let dir = d.path().join("o/eval/task1-seed0-final");
    let json1 = fs::read(dir.join("report.json")).unwrap();
    let csv1 = fs::read(dir.join("report.csv")).unwrap();
    ok(karma(d.path(), &args));
    assert!(fs::read(dir.join("report.json")).unwrap() == json1);
    assert!(fs::read(dir.join("report.csv")).unwrap() == csv1);

    let reports: Vec<MetricsReport> = serde_json::from_slice(&json1).unwrap();
    let cli = &reports[0];
    assert_eq!(cli.hr.keys().copied().collect::<Vec<_>>(), vec![5, 60]);
    assert_eq!(cli.hr[&60], 1.0);
    assert_eq!((cli.variant.as_str(), cli.seed, cli.step), ("task1", 0, 10));

    let mut cfg = ExperimentConfig::load(Some(&fixture())).unwrap();
    cfg.eval.hr_ks = vec![5, 60];
    let data = load_data(&d.path().join("o")).unwrap();
    let (model, _) = load_model(&ckpt).unwrap();
    let lib = evaluate(&model, &data.catalog, &data.split.eval, &cfg.eval).unwrap();
    assert_eq!(lib.hr, cli.hr);
    assert_eq!(lib.js, cli.js);
    assert_eq!(lib.gauc, cli.gauc);
    assert_eq!(lib.sink_max_mass, cli.sink_max_mass);
    assert_eq!(lib.targets, cli.targets);
}

#[test]
fn eval_rejects_a_checkpoint_from_other_shapes() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    ok(karma(
        d.path(),
        &["--out", "o", "train", "--joint-steps", "1", "--warmup-steps", "0"],
    ));
    let ckpt = d.path().join("o/runs/karma-seed0/final.ckpt");
    let other = tempfile::tempdir().unwrap();
    let cfg = patched(other.path(), &["data", "item_len"], Value::from(6));
    ok(karma_cfg(other.path(), &cfg, &["--out", "o", "gen-data"]));
    let o = karma_cfg(
        other.path(),
        &cfg,
        &["--out", "o", "eval", "--checkpoint", ckpt.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
}

fn table(dir: &Path, preset: &str) -> AblationTable {
    let stdout = ok(karma(dir, &["--out", "o", "ablation", "--preset", preset]));
    assert!(stdout.contains(preset));
    let p = dir.join("o/ablation").join(preset).join(format!("{preset}.json"));
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn table1_preset_reports_every_variant_against_action_only() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    let t = table(d.path(), "table1");
    let rows: Vec<&str> = t.rows.iter().map(|r| r.row.as_str()).collect();
    assert_eq!(rows, ["action-only", "+task1", "+task2", "karma", "+visual"]);
    assert_eq!(t.baseline, "action-only");
    assert_eq!(t.cells.len(), 15);
    for r in &t.rows {
        assert_eq!(r.seeds, 3);
        assert!(r.missing.is_empty());
        assert!(r.median.contains_key("hr@50") && r.median.contains_key("js@5"));
    }
    assert!(t.rows[0].delta.values().all(|&v| v == 0.0));
    let csv = fs::read_to_string(d.path().join("o/ablation/table1/table1.csv")).unwrap();
    assert!(csv.starts_with("row,seeds,missing,metric,median,delta\n"));
}

#[test]
fn table3_preset_compares_generators_against_the_base() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    let t = table(d.path(), "table3");
    let rows: Vec<&str> = t.rows.iter().map(|r| r.row.as_str()).collect();
    assert_eq!(rows, ["AR+MSE", "AR+DDPM", "AR+EDM", "AR+Flow-Matching"]);
    assert_eq!(t.baseline, "karma");
    // 3 base evaluations plus 4 generators per seed.
    assert_eq!(t.cells.len(), 15);
    for r in &t.rows {
        assert_eq!(r.seeds, 3);
        for (k, d) in &r.delta {
            assert!((r.median[k] - t.baseline_median[k] - d).abs() < 1e-12);
        }
    }
}

#[test]
fn diagnose_writes_one_entry_per_layer_head_and_square_maps() {
    let d = tempfile::tempdir().unwrap();
    with_data(d.path());
    ok(karma(d.path(), &["--out", "o", "train", "--joint-steps", "2"]));
    let ckpt = d.path().join("o/runs/karma-seed0/final.ckpt");
    ok(karma(
        d.path(),
        &[
            "--out",
            "o",
            "diagnose-attention",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--items",
            "3",
        ],
    ));
    let dir = d.path().join("o/diagnose/karma-seed0-final");
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("sink_profile.json")).unwrap()).unwrap();
    // One encoder layer with two heads.
    let entries = v["profile"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    for e in entries {
        assert_eq!(e["samples"], 3);
    }
    let records = fs::read_to_string(dir.join("attention.jsonl")).unwrap().lines().count();
    assert_eq!(records, 2 * 3);
    let pgms: Vec<_> = fs::read_dir(dir.join("pgm"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(pgms.len(), 6);
    for p in pgms {
        let bytes = fs::read(&p).unwrap();
        let header = b"P5\n5 5\n255\n";
        assert!(bytes.starts_with(header), "{}", p.display());
        assert_eq!(bytes.len(), header.len() + 25);
    }
}

#[test]
fn output_root_variable_places_relative_outputs() {
    let d = tempfile::tempdir().unwrap();
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_karma"))
        .current_dir(d.path())
        .env(karma_cli::OUTPUT_ROOT_ENV, root.path())
        .args(["--config", fixture().to_str().unwrap(), "--out", "rel", "gen-data"])
        .output()
        .unwrap();
    ok(o);
    assert!(root.path().join("rel/data/catalog.jsonl").exists());
    assert!(!d.path().join("rel").exists());
}
