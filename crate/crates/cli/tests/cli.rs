use std::path::Path;
use std::process::{Command, Output};

fn mixenc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixenc")).args(args).output().expect("spawn mixenc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn cost_prints_the_evaluated_expression() {
    let o = mixenc(&["cost", "--model", "mix", "--h", "768", "--q", "9", "--k", "1", "--nc", "1000"]);
    assert!(o.status.success(), "{o:?}");
    let want = 768u128 * 81 + 768 * 768 * 9 + 1000 * (1 + 9 + 768) * 768;
    let text = stdout(&o);
    assert!(text.contains("hq^2 + h^2q + N_c(k + q + h)hk"), "{text}");
    assert!(text.contains(&format!("= {want}")), "{text}");

    let o = mixenc(&["cost", "--model", "cross", "--h", "64", "--q", "8", "--d", "8", "--nc", "10", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["online"], 819_200);
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = mixenc(&["gen", "--task", "ranking", "--queries", "100", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success(), "{o:?}");
    }
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(x, y);
    assert_eq!(x.iter().filter(|&&c| c == b'\n').count(), 100);
    let o = mixenc(&["gen", "--queries", "100", "--seed", "8"]);
    assert_ne!(o.stdout, x);
}

#[test]
fn eval_on_oracle_scores_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    assert!(mixenc(&["gen", "--queries", "30", "--out", p(&corpus)]).status.success());
    let mut lines = String::new();
    for line in std::fs::read_to_string(&corpus).unwrap().lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let pos = r["positive_ids"][0].as_u64().unwrap();
        let scores: Vec<(u64, f64)> = r["candidates"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| {
                let id = c["id"].as_u64().unwrap();
                (id, if id == pos { 1.0 } else { 0.0 })
            })
            .collect();
        lines += &serde_json::json!({"query_id": r["query_id"], "scores": scores}).to_string();
        lines.push('\n');
    }
    let scores = dir.path().join("s.jsonl");
    std::fs::write(&scores, lines).unwrap();
    let o = mixenc(&["eval", "--corpus", p(&corpus), "--scores", p(&scores)]);
    assert!(o.status.success(), "{o:?}");
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["mrr"], 1.0);
    assert_eq!(m["r1"], 1.0);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(mixenc(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(mixenc(&["--model", "bert", "gen"]).status.code(), Some(2));
    assert_eq!(mixenc(&["--float", "16", "gen"]).status.code(), Some(2));
    assert_eq!(mixenc(&[]).status.code(), Some(2));
    assert_eq!(mixenc(&["eval", "--corpus", "/nonexistent/c.jsonl", "--scores", "/nonexistent/s"]).status.code(), Some(1));
    assert_eq!(mixenc(&["cost", "--model", "poly", "--h", "8", "--q", "2", "--nc", "1"]).status.code(), Some(1));
    assert_eq!(mixenc(&["cost", "--model", "mix", "--h", "0", "--q", "2", "--nc", "1"]).status.code(), Some(1));
    assert_eq!(mixenc(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_feeds_gen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[gen]\nqueries = 4\ncandidates = 3\n").unwrap();
    let o = mixenc(&["--config", p(&cfg), "gen"]);
    assert!(o.status.success(), "{o:?}");
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4);
    let r: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(r["candidates"].as_array().unwrap().len(), 3);
    std::fs::write(&cfg, "[gen]\nqueries = \"many\"\n").unwrap();
    assert_eq!(mixenc(&["--config", p(&cfg), "gen"]).status.code(), Some(1));
}

const TINY: &str = r#"
[model]
kind = "mix-a"
[model.encoder]
vocab_size = 120
d_model = 16
heads = 2
num_layers = 2
ffn_inner = 32
max_len = 24
[gen]
vocab_size = 120
keys = 20
"#;

/// gen → train → precompute → eval, with and without the cache.
#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let file = |n: &str| dir.path().join(n);
    let run = |args: &[&str]| {
        let mut full = vec!["--config", p(&cfg)];
        full.extend_from_slice(args);
        let o = mixenc(&full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["gen", "--queries", "64", "--seed", "1", "--out", p(&file("train.jsonl")), "--vocab-out", p(&file("vocab.tsv"))]);
    run(&["gen", "--queries", "16", "--seed", "2", "--first-query-id", "1000", "--out", p(&file("test.jsonl"))]);
    let o = run(&[
        "train",
        "--train",
        p(&file("train.jsonl")),
        "--eval",
        p(&file("test.jsonl")),
        "--vocab",
        p(&file("vocab.tsv")),
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--out",
        p(&file("m.ckpt")),
        "--log",
        p(&file("log.jsonl")),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
    let log = std::fs::read_to_string(file("log.jsonl")).unwrap();
    assert!(log.lines().count() >= 5);

    let o = run(&["precompute", "--checkpoint", p(&file("m.ckpt")), "--corpus", p(&file("test.jsonl")), "--out", p(&file("c.bin"))]);
    assert!(stdout(&o).starts_with("160 candidates"));
    assert_eq!(std::fs::metadata(file("c.bin")).unwrap().len(), 26 + 160 * (8 + 4 * (16 + 16)));

    let inline = run(&["eval", "--corpus", p(&file("test.jsonl")), "--checkpoint", p(&file("m.ckpt"))]);
    let cached = run(&[
        "eval",
        "--corpus",
        p(&file("test.jsonl")),
        "--checkpoint",
        p(&file("m.ckpt")),
        "--cache",
        p(&file("c.bin")),
    ]);
    let a: serde_json::Value = serde_json::from_slice(&inline.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&cached.stdout).unwrap();
    assert_eq!(a, b);
    assert_eq!(a["queries"], 16.0);

    // A dual-encoder checkpoint has nothing to cache.
    run(&[
        "--model", "dual", "train", "--train", p(&file("train.jsonl")), "--max-steps", "1", "--batch-size", "8", "--out",
        p(&file("d.ckpt")),
    ]);
    let o = mixenc(&["precompute", "--checkpoint", p(&file("d.ckpt")), "--corpus", p(&file("test.jsonl")), "--out", p(&file("x.bin"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_reports_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (tr, te) = (dir.path().join("tr.jsonl"), dir.path().join("te.jsonl"));
    for (out, seed, first) in [(&tr, "1", "0"), (&te, "2", "500")] {
        let o = mixenc(&["--config", p(&cfg), "gen", "--queries", "32", "--seed", seed, "--first-query-id", first, "--out", p(out)]);
        assert!(o.status.success());
    }
    let o = mixenc(&["--config", p(&cfg), "ablate", "--train", p(&tr), "--eval", p(&te), "--max-steps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<&str> = runs.as_array().unwrap().iter().map(|r| r["run"].as_str().unwrap()).collect();
    assert_eq!(names, ["original", "without-h", "without-e", "eq6"]);
    assert_eq!(mixenc(&["--model", "dual", "ablate", "--train", p(&tr), "--eval", p(&te)]).status.code(), Some(1));
}

#[test]
fn bench_prints_a_table_and_rejects_too_few_reps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.toml");
    std::fs::write(
        &cfg,
        "[bench]\nqueries = 1\nquery_len = 4\ncandidate_len = 4\n[bench.encoder]\nd_model = 8\nheads = 2\nnum_layers = 3\nffn_inner = 8\n",
    )
    .unwrap();
    let out = dir.path().join("r.json");
    let o = mixenc(&["--config", p(&cfg), "bench", "--n", "2,4", "--models", "cross,mix-a", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("model"), "{text}");
    assert_eq!(text.lines().count(), 5);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    let o = mixenc(&["--config", p(&cfg), "bench", "--reps", "3"]);
    assert_eq!(o.status.code(), Some(1));
}
