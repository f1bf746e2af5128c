use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cotravel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: &str = "[simulator]\nn_devices = 10\ndays = 1\n";

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn simulate(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn simulate_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = simulate(dir.path(), &cfg, "a");
    let b = simulate(dir.path(), &cfg, "b");
    for f in ["events.jsonl", "truth.json", "tables.json", "simconfig.json", "config.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let ea = std::fs::read(a.join("events.jsonl")).unwrap();
    assert!(!ea.is_empty());
    assert_eq!(ea, std::fs::read(b.join("events.jsonl")).unwrap());

    let c = dir.path().join("c");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "99", "--out", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_ne!(ea, std::fs::read(c.join("events.jsonl")).unwrap());
    assert!(std::fs::read_to_string(c.join("config.toml")).unwrap().contains("seed = 99"));
}

#[test]
fn bad_config_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[engine]\nshardz = 3\n");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("shardz"));
}

#[test]
fn correlate_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("out");
    let o = run(&["correlate", "--events", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("rankings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("rank,id_a,id_b,ctl,tcov,scov,combined,device_match,overall,cooccur_count,pruned_reason"));
    assert!(out.join("config.toml").exists());

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":1}\n").unwrap();
    let o = run(&["correlate", "--events", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    let cfg = write_config(dir.path(), "[input]\nerror_budget = 1\n");
    let o = run(&["correlate", "--config", cfg.to_str().unwrap(), "--events", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);

    let o = run(&["correlate", "--events", dir.path().join("missing").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn shards_and_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulator]\nn_devices = 40\ndays = 2\n");
    let sim = simulate(dir.path(), &cfg, "sim");
    let events = sim.join("events.jsonl");
    let tables = sim.join("tables.json");
    let (ev, tb) = (events.to_str().unwrap(), tables.to_str().unwrap());

    let rankings = |shards: &str, extra: &[&str]| {
        let out = dir.path().join(format!("r{shards}{}", extra.len()));
        let mut args = vec!["correlate", "--events", ev, "--tables", tb, "--shards", shards, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("rankings.csv")).unwrap()
    };
    let one = rankings("1", &[]);
    assert_eq!(one, rankings("8", &[]));
    assert!(String::from_utf8_lossy(&one).lines().count() > 1);
    let unpruned = rankings("1", &["--no-prune"]);
    assert!(unpruned.len() >= one.len());
    let no_dev = String::from_utf8(rankings("1", &["--no-device-score"])).unwrap();
    assert!(no_dev.lines().skip(1).all(|l| l.split(',').nth(7) == Some("")));

    let truth: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sim.join("truth.json")).unwrap()).unwrap();
    let gsm = truth["devices"][0]["gsm_id"].as_str().unwrap();
    let wifi = truth["devices"][0]["wifi_id"].as_str().unwrap();
    let o = run(&["query", "--events", ev, "--tables", tb, "--target", gsm, "--limit", "1"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).lines().count() <= 2);
    let o = run(&["query", "--events", ev, "--target", "no-such-id"]);
    assert_eq!(code(&o), 5);

    let o = run(&["inspect", "--events", ev, "--tables", tb, "--a", gsm, "--b", wifi]);
    assert_eq!(code(&o), 0);
    let state: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(state["state"], "active");
    let o = run(&["inspect", "--events", ev, "--a", gsm, "--b", "nobody"]);
    assert_eq!(code(&o), 5);
}

#[test]
fn evaluate_sweep_and_missing_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulator]\nn_devices = 20\ndays = 2\n");
    let sim = simulate(dir.path(), &cfg, "sim");
    let ev = sim.join("events.jsonl");
    let tb = sim.join("tables.json");
    let out = dir.path().join("eval");
    let o = run(&[
        "evaluate",
        "--events",
        ev.to_str().unwrap(),
        "--tables",
        tb.to_str().unwrap(),
        "--truth",
        sim.join("truth.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--levels",
        "15,16,17",
        "--intervals",
        "300,1200,3600",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut reports = 0;
    for l in [15, 16, 17] {
        for t in [300, 1200, 3600] {
            let d = out.join(format!("L{l}_T{t}"));
            assert!(d.join("report.json").exists() && d.join("report.csv").exists(), "{}", d.display());
            reports += 1;
        }
    }
    assert_eq!(reports, 9);
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 1 + 9 * 6);

    let o = run(&[
        "evaluate",
        "--events",
        ev.to_str().unwrap(),
        "--truth",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}
