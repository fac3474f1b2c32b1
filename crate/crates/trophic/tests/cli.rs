use std::path::Path;
use std::process::{Command, Output};

fn trophic(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trophic")).args(args).current_dir(cwd).output().unwrap()
}

fn preset(name: &str) -> String {
    format!("{}/../../configs/{name}.cfg", env!("CARGO_MANIFEST_DIR"))
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "run".to_string(),
            "--config".into(),
            preset("exactness"),
            "--seed".into(),
            "7".into(),
            "--set".into(),
            "experiment.seeds=2".into(),
            "--set".into(),
            "experiment.warmup=100".into(),
            "--set".into(),
            "experiment.window=20".into(),
            "--out".into(),
            out.into(),
        ]
    };
    for out in ["a", "b"] {
        let a = args(out);
        let o = trophic(&a.iter().map(String::as_str).collect::<Vec<_>>(), dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.jsonl", "curves.csv", "config.cfg", "summary.json"] {
        let (a, b) = (read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)));
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
    let cfg = String::from_utf8(read(dir.path().join("a/config.cfg"))).unwrap();
    assert!(cfg.contains("seed = 7"));
    assert!(cfg.contains("seeds = 2"));
}

#[test]
fn unknown_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[network]\nblocks = 4\nblokc_size = 8\n").unwrap();
    let o = trophic(&["validate-config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("network.blokc_size"), "{err}");
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["kind"], "config");

    let o = trophic(&["run", "--config", bad.to_str().unwrap(), "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn validate_prints_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = trophic(&["validate-config", &preset("oracle"), "--set", "experiment.seed=3"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[experiment]"));
    assert!(text.contains("seed = 3"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(trophic(&["dance"], dir.path()).status.code(), Some(1));
    assert_eq!(trophic(&["run"], dir.path()).status.code(), Some(1));
    assert_eq!(trophic(&["run", "--config", "missing.cfg"], dir.path()).status.code(), Some(1));
    assert_eq!(trophic(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn suite_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = trophic(&["suite", "--config", &preset("desk"), "--set", "suite.criteria=2", "--out", "ok"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let out = String::from_utf8(ok.stdout).unwrap();
    assert!(out.lines().next().unwrap().starts_with("[PASS]  2 oracle_correctness"), "{out}");
    assert!(dir.path().join("ok/suite.json").exists());
    assert!(dir.path().join("ok/config.cfg").exists());

    // the capacity formula does not give the quoted count
    let fail = trophic(&["suite", "--config", &preset("desk"), "--set", "suite.criteria=10", "--out", "fail"], dir.path());
    assert_eq!(fail.status.code(), Some(2));
    assert!(String::from_utf8(fail.stdout).unwrap().starts_with("[FAIL] 10"));
}

#[test]
fn replay_reproduces_remaining_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = trophic(
        &[
            "run",
            "--config",
            &preset("alignment"),
            "--set",
            "experiment.steps=1200",
            "--set",
            "network.block_size=8",
            "--set",
            "structure.period=100",
            "--set",
            "output.checkpoint_every=500",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let original = String::from_utf8(read(dir.path().join("run/metrics.jsonl"))).unwrap();
    let lines: Vec<&str> = original.lines().collect();
    assert!(lines.iter().any(|l| l.contains("structural_density")));
    for (ck, out) in [("checkpoint-00000500.bin", "r1"), ("checkpoint-00001000.bin", "r2")] {
        let path = dir.path().join("run").join(ck);
        let o = trophic(&["replay", path.to_str().unwrap(), "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let replayed = String::from_utf8(read(dir.path().join(out).join("metrics.jsonl"))).unwrap();
        let tail: Vec<&str> = replayed.lines().collect();
        assert!(!tail.is_empty());
        assert_eq!(tail, lines[lines.len() - tail.len()..]);
        let first_step: u64 = serde_json::from_str::<serde_json::Value>(tail[0]).unwrap()["step"].as_u64().unwrap();
        assert!(first_step > ck[11..19].parse::<u64>().unwrap());
    }

    // a checkpoint refuses a different config
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, read(dir.path().join("run/config.cfg"))).unwrap();
    let mut text = std::fs::read_to_string(&other).unwrap();
    text = text.replace("seed = 1\n", "seed = 2\n");
    std::fs::write(&other, text).unwrap();
    let path = dir.path().join("run/checkpoint-00000500.bin");
    let o = trophic(&["replay", path.to_str().unwrap(), "--config", other.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn plot_writes_one_series() {
    let dir = tempfile::tempdir().unwrap();
    let o = trophic(
        &["run", "--config", &preset("criticality"), "--set", "experiment.steps=500", "--out", "c"],
        dir.path(),
    );
    assert!(o.status.success());
    let metrics = dir.path().join("c/metrics.jsonl");
    let o = trophic(
        &["plot", metrics.to_str().unwrap(), "--metric", "spectral_radius", "--out", "rho.svg"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = String::from_utf8(read(dir.path().join("rho.svg"))).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let o = trophic(&["plot", metrics.to_str().unwrap(), "--metric", "nope", "--out", "x.svg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
