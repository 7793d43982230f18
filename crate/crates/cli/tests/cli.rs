use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slabserve"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn place_mixed_precision_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "place",
        "--config",
        scenario("mixed_precision").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("placement.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["assignments"]["model-c"], "gpu0");
    assert_eq!(v["assignments"]["model-a"], "gpu1");
    assert_eq!(v["assignments"]["model-b"], "gpu1");
    assert!(!v["trace"].as_array().unwrap().is_empty());
}

#[test]
fn oversized_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("mixed_precision")).unwrap();
    let text = text.replace("memory_bytes = 85899345920", "memory_bytes = 21474836480");
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = run(&["place", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model-c"));
}

#[test]
fn bad_config_exits_1_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\n[cluster\n").unwrap();
    let out = run(&["place", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml:2:"));
    assert_eq!(code(&run(&["simulate"])), 1);
}

#[test]
fn simulate_is_deterministic_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(&[
            "--seed",
            "7",
            "simulate",
            "--config",
            scenario("two_phase").to_str().unwrap(),
            "--out-dir",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["summary.json", "series.csv", "requests.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn static_mode_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        scenario("two_phase").to_str().unwrap(),
        "--mode",
        "static",
        "--policy",
        "fcfs",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(v["mode"], "static-partition");
    assert_eq!(v["policy"], "fcfs");
}

#[test]
fn sweep_writes_slope_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        scenario("saturated_fp16").to_str().unwrap(),
        "--sweep",
        "1GiB,2GiB",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join(format!("summary_{}.json", 1u64 << 30)).exists());
    let table = std::fs::read_to_string(dir.path().join("mme.csv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    let slope: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!(slope > 0.0);
    assert_eq!(code(&run(&["mme-sweep", "--config", scenario("saturated_fp16").to_str().unwrap()])), 1);
}

#[test]
fn selftest_exit_codes() {
    let ok = run(&["selftest"]);
    assert_eq!(code(&ok), 0);
    assert_eq!(String::from_utf8_lossy(&ok.stdout).lines().filter(|l| l.starts_with("PASS")).count(), 4);
    assert_eq!(code(&run(&["selftest", "--corrupt-bitmap"])), 3);
}

#[test]
fn bundled_scenarios_match_builtins() {
    for (name, cfg) in slabserve_core::scenarios::all() {
        let on_disk = std::fs::read_to_string(scenario(name)).unwrap();
        assert_eq!(on_disk, cfg.to_toml_string().unwrap(), "scenarios/{name}.toml is stale");
    }
}
