use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "model.d_t=16", "--set", "model.d_m=16", "--set", "model.h_t=2", "--set", "model.h_m=2",
    "--set", "model.l_text=2", "--set", "model.l_uni=1", "--set", "model.l_mol=1", "--set", "train.epochs=2",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moltailor"))
        .current_dir(dir)
        .env_remove("MOLTAILOR_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run_id in ["a", "b"] {
        ok(d, &["build-corpus", "--source", "synthetic:60", "--seed", "5", "--out", &format!("{run_id}/corpus")]);
        let mut args = vec!["pretrain", "--corpus", "a/corpus", "--seed", "5"];
        let out = format!("{run_id}/pretrain");
        args.extend(["--out", &out]);
        args.extend(TINY);
        ok(d, &args);
        ok(
            d,
            &[
                "probe", "--checkpoint", "a/pretrain/checkpoint", "--descriptors", "MolWt,RingCount",
                "--molecules", "synthetic:50", "--seeds", "0,1", "--set", "probe.max_epochs=10",
                "--out", &format!("{run_id}/probe"),
            ],
        );
    }
    for rel in [
        "corpus/corpus.jsonl",
        "corpus/manifest.json",
        "corpus/run_config.json",
        "pretrain/checkpoint/model.mtl",
        "pretrain/history.jsonl",
        "pretrain/run_config.json",
        "probe/report.json",
        "probe/report.md",
    ] {
        assert_eq!(read(&d.join("a"), rel), read(&d.join("b"), rel), "{rel} differs");
    }
    assert!(!d.join("a/pretrain/.lock").exists());

    ok(d, &["attn", "--checkpoint", "a/pretrain/checkpoint", "--smiles", "CCO", "--prompt", "molwt", "--out", "attn"]);
    let trace: serde_json::Value = serde_json::from_slice(&read(d, "attn/trace.json")).unwrap();
    let sum: f64 = trace["mt_words"].as_array().unwrap().iter().map(|w| w["weight"].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(String::from_utf8(read(d, "attn/trace.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn usage_errors_exit_two_with_json_record() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = run(d, &["probe", "--descriptors", "MolWt", "--molecules", "synthetic:10", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["build-corpus", "--source", "synthetic:10", "--out", "c", "--set", "model.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let line = String::from_utf8(out.stderr).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(rec["error"], "usage");
    assert!(rec["message"].as_str().unwrap().contains("model.bogus"));
}

#[test]
fn existing_outputs_are_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["build-corpus", "--source", "synthetic:30", "--out", "c"]);
    let before = read(d, "c/corpus.jsonl");
    let out = run(d, &["build-corpus", "--source", "synthetic:40", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(read(d, "c/corpus.jsonl"), before);
    let rec: serde_json::Value = serde_json::from_slice(&read(d, "c/error.json")).unwrap();
    assert_eq!(rec["error"], "runtime");

    std::fs::create_dir(d.join("busy")).unwrap();
    std::fs::write(d.join("busy/.lock"), "").unwrap();
    let out = run(d, &["build-corpus", "--source", "synthetic:30", "--out", "busy"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("busy/corpus.jsonl").exists());
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.cfg"), "seed = 11\n").unwrap();
    let seed_of = |dir: &str| {
        let v: serde_json::Value = serde_json::from_slice(&read(d, &format!("{dir}/run_config.json"))).unwrap();
        (v["config"]["seed"].as_u64().unwrap(), v["config"]["seed_source"].as_str().unwrap().to_string())
    };
    ok(d, &["build-corpus", "--source", "synthetic:20", "--config", "run.cfg", "--out", "f"]);
    assert_eq!(seed_of("f"), (11, "config".into()));
    let out = Command::new(env!("CARGO_BIN_EXE_moltailor"))
        .current_dir(d)
        .env("MOLTAILOR_SEED", "12")
        .args(["build-corpus", "--source", "synthetic:20", "--config", "run.cfg", "--out", "e"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(seed_of("e"), (12, "environment".into()));
    ok(d, &["build-corpus", "--source", "synthetic:20", "--config", "run.cfg", "--seed", "13", "--out", "g"]);
    assert_eq!(seed_of("g"), (13, "flag".into()));
}

#[test]
fn descriptors_compute_prints_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("m.smi"), "OCC\nc1ccccc1 benzene\n").unwrap();
    let out = ok(d, &["descriptors", "compute", "m.smi"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), 26);
    assert!(lines[1].starts_with("OCC,CCO,"));
}
