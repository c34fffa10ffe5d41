//! End-to-end runs of the `embodied` commands in temporary directories.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use embodied_rl::cli::{self, CliError, RunConfig};
use embodied_rl::curriculum::{filter_frontier, PassRateRecord};
use embodied_rl::task::TaskInstance;

const BASE: &str = r#"
seed = 11
checkpoint_every = 2
[pool]
kinds = ["mcq", "box", "count", "ordering"]
size = 30
heldout_size = 6
[policy]
hidden_dim = 10
warmup_steps = 200
[grpo]
group_size = 4
batch_size = 4
epochs = 2
[curriculum]
k_attempts = 4
rft_k_attempts = 4
stage_size = 8
rft_steps = 8
[iterate]
cycles = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), format!("{BASE}{extra}")).unwrap();
        let sb = Self { dir };
        sb.run(&["--out", &sb.p("pool"), "gen-pool"]).unwrap();
        sb
    }

    fn p(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn run(&self, args: &[&str]) -> Result<(), CliError> {
        let config = self.p("config.toml");
        let mut full = vec!["embodied", "--config", &config];
        full.extend_from_slice(args);
        cli::run_from_args(full)
    }

    fn pool(&self) -> Vec<TaskInstance> {
        read_jsonl(&Path::new(&self.p("pool")).join("pool.jsonl"))
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn metrics(dir: &str) -> String {
    fs::read_to_string(PathBuf::from(dir).join("metrics.jsonl")).unwrap()
}

#[test]
fn pool_filter_frontier_matches_recomputed_pass_rates() {
    let sb = Sandbox::new("");
    let pool = sb.pool();
    let probs: String = pool
        .iter()
        .map(|t| format!("{{\"id\": {}, \"p\": {}}}\n", t.id, [0.0, 1.0, 0.5][(t.id % 3) as usize]))
        .collect();
    fs::write(sb.p("probs.jsonl"), probs).unwrap();
    let extra = format!("[filter.policy]\ntype = \"per_task\"\npath = \"{}\"\n", sb.p("probs.jsonl"));
    fs::write(sb.p("config.toml"), format!("{BASE}{extra}")).unwrap();
    let out = sb.p("filter");
    sb.run(&["--out", &out, "pool-filter"]).unwrap();

    let dir = Path::new(&out);
    let records: Vec<PassRateRecord> = read_jsonl(&dir.join("records.jsonl"));
    let oracle: BTreeSet<u64> = records
        .iter()
        .filter(|r| {
            let s = r.rewards.iter().filter(|x| **x >= 0.5).count();
            s > 0 && s < r.rewards.len()
        })
        .map(|r| r.task_id)
        .collect();
    let frontier: Vec<TaskInstance> = read_jsonl(&dir.join("frontier.jsonl"));
    let got: BTreeSet<u64> = frontier.iter().map(|t| t.id).collect();
    assert_eq!(got, oracle);
    assert_eq!(got, filter_frontier(&records).into_iter().collect());
    assert!(!got.is_empty());
    assert!(got.iter().all(|id| id % 3 == 2), "always- or never-solved task kept");
    let stage: Vec<TaskInstance> = read_jsonl(&dir.join("stage.jsonl"));
    assert!(stage.len() <= 8 && stage.iter().all(|t| got.contains(&t.id)));
}

#[test]
fn reward_eval_scores_good_lines_and_reports_bad_ones() {
    let sb = Sandbox::new("");
    let pool = sb.pool();
    let mut lines: Vec<String> = pool
        .iter()
        .take(5)
        .map(|t| serde_json::json!({ "id": t.id, "answer": t.target }).to_string())
        .collect();
    lines.push("{not json".into());
    lines.push(serde_json::json!({ "id": 999_999, "text": "B" }).to_string());
    fs::write(sb.p("preds.jsonl"), lines.join("\n")).unwrap();
    let targets = Path::new(&sb.p("pool")).join("pool.jsonl");
    let out = sb.p("eval");
    let err = sb
        .run(&["--out", &out, "reward-eval", "--predictions", &sb.p("preds.jsonl"), "--targets", targets.to_str().unwrap()])
        .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    // 25 targets without predictions, one malformed line, one unknown id
    assert!(err.to_string().contains("27"), "{err}");
    let scores: Vec<serde_json::Value> = read_jsonl(&Path::new(&out).join("scores.jsonl"));
    let perfect = scores.iter().filter(|s| s["reward"] == 1.0).count();
    assert_eq!(perfect, 5, "{scores:?}");

    fs::write(sb.p("empty.jsonl"), "").unwrap();
    let err = sb
        .run(&["--out", &out, "reward-eval", "--predictions", &sb.p("empty.jsonl"), "--targets", targets.to_str().unwrap()])
        .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn config_errors_exit_with_code_two() {
    let sb = Sandbox::new("");
    fs::write(sb.p("bad.toml"), "[grpo]\nlearning_rate = 0.1\n").unwrap();
    let bad = sb.p("bad.toml");
    let err = cli::run_from_args(["embodied", "--config", &bad, "gen-pool"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    fs::write(sb.p("invalid.toml"), "[grpo]\ngroup_size = 1\n[pool]\nsize = 0\n").unwrap();
    let invalid = sb.p("invalid.toml");
    match cli::run_from_args(["embodied", "--config", &invalid, "--out", &sb.p("x"), "rl-train"]).unwrap_err() {
        CliError::Config(problems) => assert!(problems.len() >= 2, "{problems:?}"),
        other => panic!("expected a config error, got {other}"),
    }

    let err = sb.run(&["--out", &sb.p("pool"), "--resume", "gen-pool"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn resume_requires_the_same_config_and_replays_exactly() {
    let sb = Sandbox::new("");
    let whole = sb.p("whole");
    sb.run(&["--out", &whole, "iterate"]).unwrap();

    let split = sb.p("split");
    sb.run(&["--out", &split, "iterate", "--stop-after", "1"]).unwrap();
    let err = sb.run(&["--out", &split, "--seed", "12", "--resume", "iterate"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    sb.run(&["--out", &split, "--resume", "iterate"]).unwrap();
    assert_eq!(metrics(&whole), metrics(&split));
    for f in ["cycle-1/stage.jsonl", "cycle-1/traces.jsonl"] {
        assert_eq!(fs::read(Path::new(&whole).join(f)).unwrap(), fs::read(Path::new(&split).join(f)).unwrap(), "{f}");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let sb = Sandbox::new("");
    let (one, many) = (sb.p("one"), sb.p("many"));
    sb.run(&["--out", &one, "--workers", "1", "rl-train"]).unwrap();
    sb.run(&["--out", &many, "--workers", "3", "rl-train"]).unwrap();
    assert_eq!(metrics(&one), metrics(&many));
}

#[test]
fn resolved_config_is_written_and_reloads() {
    let sb = Sandbox::new("");
    let out = sb.p("opd");
    sb.run(&["--out", &out, "--seed", "5", "opd"]).unwrap();
    let text = fs::read_to_string(Path::new(&out).join("config.resolved.toml")).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.to_toml(), text);
    let events: BTreeSet<String> = metrics(&out)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["event"].as_str().unwrap().to_string())
        .collect();
    assert!(events.contains("distill"), "{events:?}");
    sb.run(&["report", &out]).unwrap();
}

#[test]
fn mot_check_small_run_writes_suite_rows() {
    let sb = Sandbox::new("[mot_check]\nlayouts = 20\nprobe_sequences = 4\ngrad_configs = 1\ncoords_per_group = 4\n");
    let out = sb.p("mot");
    sb.run(&["--out", &out, "mot-check"]).unwrap();
    assert!(metrics(&out).lines().count() >= 6);
}
