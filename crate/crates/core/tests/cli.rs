use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prime_core::synthetic::planted_clusters;
use serde_json::Value;
use sha2::{Digest, Sha256};

fn prime(args: &[&str]) -> Output {
    prime_env(args, &[])
}

fn prime_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prime"));
    cmd.args(args).env_remove("PRIME_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Planted {
    dir: tempfile::TempDir,
    queries: PathBuf,
    labels: PathBuf,
}

fn planted() -> Planted {
    let dir = tempfile::tempdir().unwrap();
    let (queries, labels) = planted_clusters(3, 10, 3, 7).unwrap().write_canonical(dir.path()).unwrap();
    Planted { dir, queries, labels }
}

impl Planted {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec!["train", "--queries", s(&self.queries), "--labels", s(&self.labels), "--out", s(&out)];
        args.extend_from_slice(&["--vocab", "4096", "--threads", "1"]);
        args.extend_from_slice(extra);
        prime(&args)
    }

    fn eval(&self, extra: &[&str]) -> Output {
        let mut args = vec!["eval", "--queries", s(&self.queries), "--labels", s(&self.labels)];
        args.extend_from_slice(extra);
        prime(&args)
    }
}

fn last_json(o: &Output) -> Value {
    serde_json::from_str(stdout(o).lines().last().unwrap()).unwrap()
}

#[test]
fn ingest_counts_by_hand() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("l.txt");
    let queries = dir.path().join("q.txt");
    std::fs::write(&labels, "a\tapple\nb\tbanana\n# comment\nc\tcherry\n").unwrap();
    std::fs::write(&queries, "q1\ta,b\tred fruit\nq2\tb,b\tyellow\nq3\tc\tdark\nq4\ta\tcrisp\n").unwrap();
    let out = dir.path().join("out");
    let o = prime(&["ingest", "--queries", s(&queries), "--labels", s(&labels), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "queries 4 labels 3 nnz 5");
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["nnz"], 5);
    assert_eq!(stats["propensity_fitted"], true);
    assert!(out.join("propensity.tsv").exists());
}

#[test]
fn ingest_is_idempotent() {
    let p = planted();
    let first = p.path("first");
    let second = p.path("second");
    let o = prime(&["ingest", "--queries", s(&p.queries), "--labels", s(&p.labels), "--out", s(&first)]);
    assert!(o.status.success());
    let o = prime(&[
        "ingest",
        "--queries",
        s(&first.join("queries.txt")),
        "--labels",
        s(&first.join("labels.txt")),
        "--out",
        s(&second),
    ]);
    assert!(o.status.success());
    for f in ["queries.txt", "labels.txt", "propensity.tsv", "stats.json"] {
        assert_eq!(digest(&first.join(f)), digest(&second.join(f)), "{f}");
    }
    assert_eq!(digest(&first.join("queries.txt")), digest(&p.queries));
}

#[test]
fn missing_file_is_an_io_error_naming_the_path() {
    let p = planted();
    let missing = p.path("nope.txt");
    let o = prime(&["ingest", "--queries", s(&missing), "--labels", s(&p.labels), "--out", s(&p.path("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn unknown_label_reports_the_line() {
    let p = planted();
    let bad = p.path("bad.txt");
    std::fs::write(&bad, "q0\tl0\tx\nq1\tzz\ty\n").unwrap();
    let o = prime(&["ingest", "--queries", s(&bad), "--labels", s(&p.labels), "--out", s(&p.path("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn training_twice_gives_identical_checkpoints_and_manifest() {
    let p = planted();
    for out in ["a", "b"] {
        let o = p.train(out, &["--epochs", "1", "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(digest(&p.path("a/checkpoint.bin")), digest(&p.path("b/checkpoint.bin")));
    assert_eq!(digest(&p.path("a/train_log.jsonl")), digest(&p.path("b/train_log.jsonl")));

    let m: Value = serde_json::from_str(&std::fs::read_to_string(p.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["inputs"][0]["sha256"], digest(&p.queries));
    assert_eq!(m["outputs"][0]["sha256"], digest(&p.path("a/checkpoint.bin")));
    assert!(m["summary"]["train_metrics"]["p_at"]["1"].is_number());

    let log = std::fs::read_to_string(p.path("a/train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["total"].is_number());
    assert_eq!(first["gamma_min"], 0.1);
}

#[test]
fn seed_environment_variable_overrides_the_flag() {
    let p = planted();
    let run = |out: &str, env: &[(&str, &str)]| {
        let out = p.path(out);
        let o = prime_env(
            &[
                "train", "--queries", s(&p.queries), "--labels", s(&p.labels), "--out", s(&out), "--vocab", "4096",
                "--epochs", "1", "--seed", "1", "--threads", "1",
            ],
            env,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        digest(&out.join("checkpoint.bin"))
    };
    let flag = run("flag", &[]);
    let env = run("env", &[("PRIME_SEED", "9")]);
    let direct = run("direct", &[]);
    assert_eq!(flag, direct);
    assert_ne!(flag, env);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(p.path("env/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn invalid_training_settings_exit_with_config_code() {
    let p = planted();
    let o = p.train("g", &["--gamma-min", "0.4", "--gamma-max", "0.3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = p.train("pos", &["--positives-per-query", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn config_file_with_flag_override() {
    let p = planted();
    let cfg = p.path("cfg.toml");
    std::fs::write(&cfg, "epochs = 3\nvocab = 4096\n[margins]\ngamma_min = 0.05\n").unwrap();
    let o = p.train("c", &["--config", s(&cfg), "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(p.path("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["epochs"], 2);
    assert_eq!(m["config"]["margins"]["gamma_min"], 0.05);
    std::fs::write(&cfg, "epochz = 3\n").unwrap();
    let o = p.train("c2", &["--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_predict_round_trip() {
    let p = planted();
    assert!(p.train("m", &["--epochs", "3", "--seed", "2"]).status.success());
    let ckpt = p.path("m/checkpoint.bin");

    let o = p.eval(&["--checkpoint", s(&ckpt), "--k", "10"]);
    assert_eq!(o.status.code(), Some(2));

    let direct = p.eval(&["--checkpoint", s(&ckpt), "--k", "1,3,5"]);
    assert!(direct.status.success(), "{}", stderr(&direct));
    assert!(stdout(&direct).contains("P@k"));

    let preds = p.path("preds.tsv");
    let export = p.path("protos.tsv");
    let o = prime(&[
        "predict",
        "--queries",
        s(&p.queries),
        "--labels",
        s(&p.labels),
        "--checkpoint",
        s(&ckpt),
        "--k",
        "5",
        "--out",
        s(&preds),
        "--export",
        s(&export),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("ms/query"));
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 30);
    assert_eq!(std::fs::read_to_string(&export).unwrap().lines().count(), 9);

    let reparsed = p.eval(&["--predictions", s(&preds), "--k", "1,3,5"]);
    assert!(reparsed.status.success(), "{}", stderr(&reparsed));
    assert_eq!(last_json(&direct), last_json(&reparsed));

    let text = p.eval(&["--checkpoint", s(&ckpt), "--mode", "text-embedding", "--k", "1"]);
    assert!(text.status.success(), "{}", stderr(&text));
    assert!(last_json(&text)["p_at"]["1"].is_number());
}

fn landscape_rows(extra: &[&str]) -> Vec<Vec<String>> {
    let mut args = vec!["loss-landscape"];
    args.extend_from_slice(extra);
    let o = prime(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o).lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn loss_landscape_grid() {
    let rows = landscape_rows(&[]);
    assert_eq!(rows.len(), 2 * 201 * 201);
    let find = |mode: &str, sp: &str, sn: &str| {
        rows.iter()
            .find(|r| r[0] == mode && r[1] == sp && r[2] == sn)
            .unwrap_or_else(|| panic!("no row {mode},{sp},{sn}"))
            .clone()
    };
    assert_eq!(find("dynamic", "0.9", "0.2")[6], "easy");
    let r = find("dynamic", "0.55", "0.5");
    assert_eq!(r[6], "uncertain");
    assert!((r[3].parse::<f64>().unwrap() - 0.15).abs() < 1e-12);
    assert_eq!((r[4].as_str(), r[5].as_str()), ("1", "-1"));
    for r in &rows {
        let (sp, sn): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        if r[0] == "dynamic" {
            let want = if sp <= sn {
                "hard"
            } else if sp - sn < 0.1 {
                "uncertain"
            } else {
                "easy"
            };
            assert_eq!(r[6], want, "{r:?}");
        }
    }
}

#[test]
fn loss_landscape_writes_file_and_rejects_bad_margins() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.csv");
    let o = prime(&["loss-landscape", "--points", "3", "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 9);
    let o = prime(&["loss-landscape", "--gamma-min", "0.4", "--gamma-max", "0.3"]);
    assert_eq!(o.status.code(), Some(2));
}
