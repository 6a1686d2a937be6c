use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reflectionflow"));
    c.env("RUST_LOG", "off");
    for role in ["GENERATOR", "CORRECTOR", "REFLECTOR", "VERIFIER", "REFINER"] {
        c.env_remove(format!("REFLECTIONFLOW_{role}_URL"));
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn readme_documents_every_flag() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let mut help = ok(&["--help"]);
    for sub in ["curate", "train-verifier", "run", "eval", "trace"] {
        help += &ok(&[sub, "--help"]);
    }
    let mut flags: Vec<&str> = help
        .split_whitespace()
        .filter(|w| w.starts_with("--") && w.len() > 2)
        .map(|w| w.trim_end_matches(','))
        .collect();
    flags.sort_unstable();
    flags.dedup();
    assert!(flags.len() > 20, "{flags:?}");
    let missing: Vec<_> = flags.iter().filter(|f| !readme.contains(**f)).collect();
    assert!(missing.is_empty(), "README lacks {missing:?}");
    for sub in ["curate", "train-verifier", "run", "eval", "trace"] {
        assert!(readme.contains(&format!("reflectionflow {sub}")) || readme.contains(&format!(" {sub} ")), "{sub}");
    }
}

#[test]
fn curate_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--seed", "11", "--out", p(&a), "curate"]);
    ok(&["--seed", "11", "--jobs", "3", "--out", p(&b), "curate"]);
    for f in ["triplets.jsonl", "manifest.json", "reward_model.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn curate_with_single_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--seed", "5", "--sources", "rule", "--out", p(dir.path()), "curate"]);
    assert!(out.contains("rule"));
    let data = std::fs::read_to_string(dir.path().join("triplets.jsonl")).unwrap();
    let lines: Vec<&str> = data.lines().collect();
    assert!(!lines.is_empty());
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["source"], "rule");
    }
}

#[test]
fn run_counts_width_times_depth() {
    let out = ok(&["--seed", "2", "--width", "2", "--depth", "8", "run", "--prompt-id", "corpus-003"]);
    assert!(out.contains("16 images generated"), "{out}");
    let out = ok(&["--seed", "2", "--budget", "16", "--width", "4", "run", "--prompt-id", "corpus-003"]);
    assert!(out.contains("width 4 depth 4: 16 images generated"), "{out}");
}

#[test]
fn run_trace_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let prompt = r#"{"id":"mine","category":"counting","objects":[{"class":"cup","count":3}],"specificity":0.5}"#;
    ok(&["--seed", "9", "--out", p(&a), "run", "--prompt", prompt]);
    ok(&["--seed", "9", "--jobs", "2", "--out", p(&b), "run", "--prompt", prompt]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn eval_splits_gives_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--seed", "4", "--out", p(dir.path()), "eval", "--images", "1", "--splits", "16x1,1x16"]);
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let overall: Vec<&str> = csv.lines().filter(|l| l.contains(",overall,")).collect();
    assert_eq!(overall.len(), 2, "{csv}");
    assert!(overall[0].starts_with("16x1,16,1,16,"));
    assert!(overall[1].starts_with("1x16,1,16,16,"));
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn trace_prints_reflections_in_order() {
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/trace_literal.json");
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture).unwrap()).unwrap();
    let depth = raw["config"]["depth"].as_u64().unwrap() as usize;
    assert_eq!(raw["config"]["budget_mode"], "algorithm1_literal");
    let out = ok(&["trace", fixture]);
    for chain in raw["chains"].as_array().unwrap() {
        let id = chain["chain_id"].as_u64().unwrap();
        let block = out.split(&format!("chain {id}\n")).nth(1).unwrap();
        let block = block.split("\nchain ").next().unwrap();
        let mut at = 0;
        let mut seen = 0;
        for step in chain["history"].as_array().unwrap() {
            if let Some(r) = step["reflection"]["text"].as_str() {
                let line = format!("reflection: {r}");
                let pos = block[at..].find(&line).unwrap_or_else(|| panic!("missing {line:?}"));
                at += pos + line.len();
                seen += 1;
            }
        }
        assert_eq!(seen, depth, "chain {id}");
    }
}

#[test]
fn exit_codes() {
    // config: missing seed, bad source, budget mismatch
    assert_eq!(run(&["run", "--prompt-id", "corpus-000"]).status.code(), Some(1));
    assert_eq!(run(&["--seed", "1", "--sources", "nope", "--out", "/tmp/x", "curate"]).status.code(), Some(1));
    assert_eq!(run(&["--seed", "1", "--budget", "10", "--width", "3", "run", "--prompt-id", "corpus-000"]).status.code(), Some(1));
    assert_eq!(run(&["--seed", "1", "run", "--prompt", "{not json"]).status.code(), Some(1));
    // i/o
    assert_eq!(run(&["trace", "/nonexistent/trace.json"]).status.code(), Some(3));
    // backend: nothing listens on port 1
    let o = bin()
        .args(["--seed", "1", "--width", "1", "--depth", "1", "--verifier-url", "http://127.0.0.1:1", "run", "--prompt-id", "corpus-000"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    // usage errors come from clap
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_verifier_zero_epochs_writes_zero_model() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--seed", "1", "--out", p(dir.path()), "train-verifier", "--epochs", "0"]);
    let model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reward_model.json")).unwrap()).unwrap();
    let w = model["weights"].as_array().unwrap();
    assert!(!w.is_empty());
    assert!(w.iter().all(|x| x.as_f64() == Some(0.0)));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["train_pairs"], 2000);
    assert_eq!(metrics["held_out_pairs"], 500);
}

#[test]
fn bt_verifier_from_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--seed", "1", "--out", p(dir.path()), "train-verifier", "--epochs", "40"]);
    let ckpt = dir.path().join("reward_model.json");
    let out = ok(&["--seed", "1", "--verifier", "bt", "--checkpoint", p(&ckpt), "run", "--prompt-id", "corpus-001"]);
    assert!(out.contains("images generated"));
}
