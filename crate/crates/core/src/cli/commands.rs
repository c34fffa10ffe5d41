use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{FilterPolicy, RunConfig};
use super::{write_atomic, CliError, RunDir};
use crate::curriculum::{
    self, balance_dimensions, evaluate_pool, filter_frontier, mean_reward, Curriculum, CycleMetrics, PassRateRecord,
    ScriptedPolicy,
};
use crate::distill::{self, DistillMetrics, DistillMode, OpdConfig, TeacherStudentPair};
use crate::grpo::{RlTrainer, StepMetrics};
use crate::mot::check::{grad_check, loss_decomposition, random_params, run_suites, SuiteResult, GRAD_TOLERANCE};
use crate::mot::{read_sequences, SyntheticTeacher, TrainingPhase};
use crate::numerics::RngStream;
use crate::optim::Optimizer;
use crate::policy::tasks::{generate_pool, read_pool, validate_task, write_pool};
use crate::policy::{format_warmup, parse_text, Generator, ToyPolicy};
use crate::rewards::{discrete_frechet, dispatch_reward};
use crate::task::{Answer, TaskInstance, TaskKind};

const POOL_STREAM: u64 = 0x9001;
const HELDOUT_STREAM: u64 = 0x9002;
const POLICY_STREAM: u64 = 0x9003;
const TEACHER_STREAM: u64 = 0x9004;
const STUDENT_STREAM: u64 = 0x9005;
const FILTER_STREAM: u64 = 0x9006;
const RECORD_CHECK_STREAM: u64 = 0x9007;
/// Held-out task ids start here so they never collide with training ids.
const HELDOUT_ID_BASE: u64 = 1 << 32;

fn data_at(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn load_pool(path: &Path, max_prompt_len: usize) -> Result<Vec<TaskInstance>, CliError> {
    let file = File::open(path).map_err(|e| data_at(path, e))?;
    let pool = read_pool(BufReader::new(file), max_prompt_len).map_err(|e| data_at(path, e))?;
    if pool.is_empty() {
        return Err(data_at(path, "no tasks"));
    }
    Ok(pool)
}

fn generated_pool(cfg: &RunConfig) -> Vec<TaskInstance> {
    generate_pool(&cfg.pool.kinds, cfg.pool.size, &mut RngStream::new(cfg.seed, POOL_STREAM))
}

fn generated_heldout(cfg: &RunConfig) -> Vec<TaskInstance> {
    let mut tasks = generate_pool(&cfg.pool.kinds, cfg.pool.heldout_size, &mut RngStream::new(cfg.seed, HELDOUT_STREAM));
    for t in &mut tasks {
        t.id += HELDOUT_ID_BASE;
    }
    tasks
}

fn task_pool(cfg: &RunConfig) -> Result<Vec<TaskInstance>, CliError> {
    match &cfg.pool.path {
        Some(p) => load_pool(p, cfg.pool.max_prompt_len),
        None => Ok(generated_pool(cfg)),
    }
}

fn load_policy(path: &Path) -> Result<ToyPolicy, CliError> {
    let file = File::open(path).map_err(|e| data_at(path, e))?;
    ToyPolicy::load(BufReader::new(file)).map_err(|e| data_at(path, e))
}

fn save_policy(path: &Path, policy: &ToyPolicy) -> Result<(), CliError> {
    write_atomic(path, &policy.to_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(CliError::data)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn save_pool(path: &Path, pool: &[TaskInstance]) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pool(&mut w, pool)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct WarmupRecord {
    steps: usize,
    final_loss: f64,
    fingerprint: u64,
}

/// The configured checkpoint, or a fresh policy after the format warm-up.
fn initial_policy(cfg: &RunConfig, pool: &[TaskInstance], run: &mut RunDir) -> Result<ToyPolicy, CliError> {
    if let Some(path) = &cfg.policy.checkpoint {
        return load_policy(path);
    }
    let mut rng = RngStream::new(cfg.seed, POLICY_STREAM);
    let mut policy = ToyPolicy::new(cfg.policy.hidden_dim, &mut rng);
    info!("format warm-up: {} steps", cfg.policy.warmup_steps);
    let final_loss = format_warmup(&mut policy, pool, cfg.policy.warmup_steps, cfg.policy.warmup_lr, &mut rng.split(1))
        .map_err(CliError::data)?;
    run.emit(
        "warmup",
        &WarmupRecord {
            steps: cfg.policy.warmup_steps,
            final_loss,
            fingerprint: policy.fingerprint(),
        },
    )?;
    Ok(policy)
}

/// Progress marker for resumable runs. Written last, so it only ever points at
/// checkpoint files that are complete.
#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    /// Update steps (rl-train) or cycles (iterate) completed.
    completed: usize,
    metrics_lines: usize,
    policy: String,
    optimizer: Option<String>,
}

fn read_state(run: &RunDir) -> Result<Option<RunState>, CliError> {
    match fs::read_to_string(run.path("state.json")) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| data_at(&run.path("state.json"), e)),
        Err(_) => Ok(None),
    }
}

fn checkpoint(run: &RunDir, completed: usize, policy: &ToyPolicy, optimizer: Option<&Optimizer>) -> Result<(), CliError> {
    let dir = run.path("checkpoints");
    fs::create_dir_all(&dir)?;
    let policy_name = format!("checkpoints/policy-{completed:06}.ckpt");
    save_policy(&run.path(&policy_name), policy)?;
    let optimizer_name = match optimizer {
        Some(opt) => {
            let name = format!("checkpoints/optimizer-{completed:06}.json");
            write_atomic(&run.path(&name), serde_json::to_string(opt).map_err(CliError::data)?.as_bytes())?;
            Some(name)
        }
        None => None,
    };
    let state = RunState {
        completed,
        metrics_lines: run.lines(),
        policy: policy_name,
        optimizer: optimizer_name,
    };
    write_atomic(&run.path("state.json"), serde_json::to_string_pretty(&state).map_err(CliError::data)?.as_bytes())
}

fn table_row(out: &mut String, cells: &[String], widths: &[usize]) {
    for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
        if i == 0 {
            let _ = write!(out, "{c:<w$}");
        } else {
            let _ = write!(out, " {c:>w$}");
        }
    }
    out.push('\n');
}

pub fn gen_pool(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let pool = generated_pool(cfg);
    save_pool(&run.path("pool.jsonl"), &pool)?;
    let heldout = generated_heldout(cfg);
    if !heldout.is_empty() {
        save_pool(&run.path("heldout.jsonl"), &heldout)?;
    }
    let mut summary = format!("{} tasks -> pool.jsonl, {} held-out -> heldout.jsonl\n", pool.len(), heldout.len());
    for kind in TaskKind::ALL {
        let n = pool.iter().filter(|t| t.kind == kind).count();
        if n > 0 {
            run.emit("pool", &serde_json::json!({ "kind": kind, "tasks": n }))?;
            let _ = writeln!(summary, "  {kind:<12} {n}");
        }
    }
    run.write_summary(&summary)
}

/// One prediction line. `target` is accepted for `answer`, so a pool file can be
/// scored against itself; `text` is parsed with the task's output grammar.
#[derive(Debug, Deserialize)]
struct PredictionRecord {
    id: u64,
    #[serde(alias = "target")]
    answer: Option<Answer>,
    text: Option<String>,
}

#[derive(Debug, Serialize)]
struct SampleScore {
    id: u64,
    kind: TaskKind,
    reward: f64,
    parsed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    one_minus_dfd: Option<f64>,
}

#[derive(Debug, Serialize)]
struct KindRow {
    kind: String,
    n: usize,
    mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    one_minus_dfd: Option<f64>,
}

fn read_lines<T, F>(path: &Path, label: &str, errors: &mut Vec<String>, mut parse: F) -> Result<Vec<T>, CliError>
where
    F: FnMut(&str) -> Result<T, String>,
{
    let file = File::open(path).map_err(|e| data_at(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| data_at(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse(&line) {
            Ok(v) => out.push(v),
            Err(e) => errors.push(format!("{label} line {}: {e}", i + 1)),
        }
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn reward_eval(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let (Some(pred_path), Some(target_path)) = (&cfg.reward_eval.predictions, &cfg.reward_eval.targets) else {
        return Err(CliError::config("reward_eval needs predictions and targets"));
    };
    let judge = cfg.judge.build();
    let mut errors = Vec::new();
    let targets = read_lines(target_path, "targets", &mut errors, |line| {
        let task: TaskInstance = serde_json::from_str(line).map_err(|e| e.to_string())?;
        validate_task(&task, cfg.pool.max_prompt_len).map_err(|e| e.to_string())?;
        Ok(task)
    })?;
    let predictions = read_lines(pred_path, "predictions", &mut errors, |line| {
        let p: PredictionRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if p.answer.is_none() && p.text.is_none() {
            return Err(format!("id {}: needs `answer` or `text`", p.id));
        }
        Ok(p)
    })?;
    if targets.is_empty() {
        return Err(data_at(target_path, "no valid target records"));
    }
    if predictions.is_empty() {
        return Err(data_at(pred_path, "no valid prediction records"));
    }
    let mut by_id: HashMap<u64, PredictionRecord> = HashMap::new();
    for p in predictions {
        let id = p.id;
        if by_id.insert(id, p).is_some() {
            errors.push(format!("predictions: duplicate id {id}"));
        }
    }

    let mut scores = Vec::with_capacity(targets.len());
    for task in &targets {
        let Some(pred) = by_id.remove(&task.id) else {
            errors.push(format!("targets: no prediction for id {}", task.id));
            continue;
        };
        let answer = match (pred.answer, &pred.text) {
            (Some(a), _) => Some(a),
            (None, Some(text)) => parse_text(task.kind, text).ok(),
            (None, None) => None,
        };
        let reward = match dispatch_reward(task, answer.as_ref(), &cfg.rewards, judge.as_ref()) {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("id {}: {e}", task.id));
                continue;
            }
        };
        let one_minus_dfd = match (&answer, &task.target) {
            (Some(Answer::Trajectory(p)), Answer::Trajectory(g)) if !p.0.is_empty() => {
                Some((1.0 - discrete_frechet(p, g)).max(0.0))
            }
            (_, Answer::Trajectory(_)) => Some(0.0),
            _ => None,
        };
        scores.push(SampleScore {
            id: task.id,
            kind: task.kind,
            reward,
            parsed: answer.is_some(),
            one_minus_dfd,
        });
    }
    let mut unmatched: Vec<u64> = by_id.into_keys().collect();
    unmatched.sort_unstable();
    for id in unmatched {
        errors.push(format!("predictions: id {id} has no target"));
    }
    write_jsonl(&run.path("scores.jsonl"), &scores)?;

    let mut rows = Vec::new();
    for kind in TaskKind::ALL {
        let of_kind: Vec<&SampleScore> = scores.iter().filter(|s| s.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let rewards: Vec<f64> = of_kind.iter().map(|s| s.reward).collect();
        let is_iou = matches!(kind, TaskKind::Box | TaskKind::Multibox);
        let dfd: Vec<f64> = of_kind.iter().filter_map(|s| s.one_minus_dfd).collect();
        rows.push(KindRow {
            kind: kind.to_string(),
            n: of_kind.len(),
            mean_reward: mean(&rewards),
            miou: is_iou.then(|| mean(&rewards)),
            one_minus_dfd: (!dfd.is_empty()).then(|| mean(&dfd)),
        });
    }
    let ious: Vec<f64> = scores
        .iter()
        .filter(|s| matches!(s.kind, TaskKind::Box | TaskKind::Multibox))
        .map(|s| s.reward)
        .collect();
    let dfds: Vec<f64> = scores.iter().filter_map(|s| s.one_minus_dfd).collect();
    rows.push(KindRow {
        kind: "all".into(),
        n: scores.len(),
        mean_reward: mean(&scores.iter().map(|s| s.reward).collect::<Vec<_>>()),
        miou: (!ious.is_empty()).then(|| mean(&ious)),
        one_minus_dfd: (!dfds.is_empty()).then(|| mean(&dfds)),
    });

    let widths = [12, 6, 12, 10, 10];
    let mut summary = String::new();
    table_row(
        &mut summary,
        &["kind", "n", "mean_reward", "mIoU", "1-DFD"].map(String::from),
        &widths,
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for row in &rows {
        run.emit("kind", row)?;
        table_row(
            &mut summary,
            &[row.kind.clone(), row.n.to_string(), format!("{:.4}", row.mean_reward), opt(row.miou), opt(row.one_minus_dfd)],
            &widths,
        );
    }
    if !errors.is_empty() {
        let _ = writeln!(summary, "\n{} problem(s):", errors.len());
        for e in &errors {
            let _ = writeln!(summary, "  {e}");
            warn!("{e}");
        }
    }
    run.write_summary(&summary)?;
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} malformed or unmatched record(s)", errors.len())))
    }
}

fn rl_summary(run: &RunDir) -> Result<String, CliError> {
    let text = fs::read_to_string(run.path("metrics.jsonl"))?;
    let steps: Vec<StepMetrics> = text
        .lines()
        .filter(|l| l.contains("\"event\":\"rl_step\""))
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(CliError::data)?;
    let rewards: Vec<f64> = steps.iter().map(|s| s.mean_reward).collect();
    let trailing = &rewards[rewards.len().saturating_sub(10)..];
    let mut s = format!("{} update steps\n", steps.len());
    if let (Some(first), Some(last)) = (steps.first(), steps.last()) {
        let _ = writeln!(s, "mean reward: first {:.4}, last {:.4}, trailing-10 {:.4}", first.mean_reward, last.mean_reward, mean(trailing));
        let _ = writeln!(
            s,
            "masked fraction (mean) {:.4}, clip rate (mean) {:.4}",
            mean(&steps.iter().map(|m| m.masked_fraction).collect::<Vec<_>>()),
            mean(&steps.iter().map(|m| m.clip_rate).collect::<Vec<_>>())
        );
    }
    Ok(s)
}

pub fn rl_train(cfg: &RunConfig, run: &mut RunDir, stop_after: Option<usize>) -> Result<(), CliError> {
    let pool = task_pool(cfg)?;
    let judge = cfg.judge.build();
    let state = if run.resume { read_state(run)? } else { None };
    let mut trainer = match state {
        Some(state) => {
            run.truncate_metrics(state.metrics_lines)?;
            let policy = load_policy(&run.path(&state.policy))?;
            let opt_path = run.path(state.optimizer.as_deref().unwrap_or_default());
            let optimizer: Optimizer = serde_json::from_str(&fs::read_to_string(&opt_path).map_err(|e| data_at(&opt_path, e))?)
                .map_err(|e| data_at(&opt_path, e))?;
            info!("resuming at step {}", state.completed);
            let mut t = RlTrainer::new(policy, cfg.grpo.clone(), cfg.seed).map_err(CliError::data)?;
            t.optimizer = optimizer;
            t.step = state.completed;
            t
        }
        None => {
            run.truncate_metrics(0)?;
            let policy = initial_policy(cfg, &pool, run)?;
            let t = RlTrainer::new(policy, cfg.grpo.clone(), cfg.seed).map_err(CliError::data)?;
            checkpoint(run, 0, &t.policy, Some(&t.optimizer))?;
            t
        }
    };
    let total = trainer.total_steps(pool.len());
    let mut budget = stop_after.unwrap_or(usize::MAX);
    while trainer.step < total && budget > 0 {
        let m = trainer.train_step(&pool, &cfg.rewards, judge.as_ref()).map_err(CliError::data)?;
        run.emit("rl_step", &m)?;
        budget -= 1;
        if trainer.step % cfg.checkpoint_every == 0 || trainer.step == total || budget == 0 {
            checkpoint(run, trainer.step, &trainer.policy, Some(&trainer.optimizer))?;
        }
        if m.step % 10 == 0 {
            info!("step {}/{total}: mean reward {:.4}", m.step, m.mean_reward);
        }
    }
    if trainer.step < total {
        info!("stopped at step {}/{total}; continue with --resume", trainer.step);
        return Ok(());
    }
    save_policy(&run.path("policy.ckpt"), &trainer.policy)?;
    let summary = rl_summary(run)?;
    run.write_summary(&summary)
}

#[derive(Serialize)]
struct CycleStep<'a> {
    cycle: usize,
    #[serde(flatten)]
    metrics: &'a StepMetrics,
}

#[derive(Serialize)]
struct CycleRecord<'a> {
    #[serde(flatten)]
    metrics: &'a CycleMetrics,
    /// Stage tasks whose evaluation pass rate was 0 or 1; always 0 by construction.
    stage_extreme_pass_rate: usize,
}

pub fn iterate(cfg: &RunConfig, run: &mut RunDir, stop_after: Option<usize>) -> Result<(), CliError> {
    let pool = task_pool(cfg)?;
    let judge = cfg.judge.build();
    let state = if run.resume { read_state(run)? } else { None };
    let policy = match &state {
        Some(state) => {
            run.truncate_metrics(state.metrics_lines)?;
            info!("resuming at cycle {}", state.completed);
            load_policy(&run.path(&state.policy))?
        }
        None => {
            run.truncate_metrics(0)?;
            initial_policy(cfg, &pool, run)?
        }
    };
    let mut cur = Curriculum::new(policy, cfg.grpo.clone(), cfg.curriculum.clone(), cfg.seed).map_err(CliError::data)?;
    match &state {
        Some(s) => cur.next_cycle = s.completed,
        None => checkpoint(run, 0, &cur.policy, None)?,
    }
    let mut budget = stop_after.unwrap_or(usize::MAX);
    while cur.next_cycle < cfg.iterate.cycles && budget > 0 {
        let report = cur.run_cycle(&pool, &cfg.rewards, judge.as_ref()).map_err(CliError::data)?;
        let c = report.metrics.cycle;
        for m in &report.rl_metrics {
            run.emit("rl_step", &CycleStep { cycle: c, metrics: m })?;
        }
        let rates: HashMap<u64, &PassRateRecord> = report.evaluation.iter().map(|r| (r.task_id, r)).collect();
        let extreme = report
            .stage
            .iter()
            .filter(|t| rates.get(&t.id).is_none_or(|r| r.successes == 0 || r.successes == r.attempts))
            .count();
        run.emit(
            "cycle",
            &CycleRecord {
                metrics: &report.metrics,
                stage_extreme_pass_rate: extreme,
            },
        )?;
        let dir = run.path(&format!("cycle-{c}"));
        fs::create_dir_all(&dir)?;
        write_jsonl(&dir.join("evaluation.jsonl"), &report.evaluation)?;
        save_pool(&dir.join("stage.jsonl"), &report.stage)?;
        write_jsonl(&dir.join("traces.jsonl"), &report.traces)?;
        checkpoint(run, cur.next_cycle, &cur.policy, None)?;
        info!(
            "cycle {c}: frontier {}, stage {}, reward {:.4} -> {:.4} (rl) -> {:.4} (rft)",
            report.metrics.frontier_size,
            report.metrics.stage_size,
            report.metrics.mean_reward_before,
            report.metrics.mean_reward_after_rl,
            report.metrics.mean_reward_after_rft
        );
        budget -= 1;
    }
    if cur.next_cycle < cfg.iterate.cycles {
        info!("stopped after cycle {}; continue with --resume", cur.next_cycle);
        return Ok(());
    }
    save_policy(&run.path("policy.ckpt"), &cur.policy)?;

    let text = fs::read_to_string(run.path("metrics.jsonl"))?;
    let cycles: Vec<serde_json::Value> = text
        .lines()
        .filter(|l| l.contains("\"event\":\"cycle\""))
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(CliError::data)?;
    let widths = [6, 9, 6, 9, 9, 9, 7, 8];
    let mut summary = String::new();
    table_row(
        &mut summary,
        &["cycle", "frontier", "stage", "before", "after_rl", "after_rft", "traces", "extreme"].map(String::from),
        &widths,
    );
    let mut ends = Vec::new();
    for v in &cycles {
        let f = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
        ends.push(f("mean_reward_after_rft"));
        table_row(
            &mut summary,
            &[
                v["cycle"].to_string(),
                v["frontier_size"].to_string(),
                v["stage_size"].to_string(),
                format!("{:.4}", f("mean_reward_before")),
                format!("{:.4}", f("mean_reward_after_rl")),
                format!("{:.4}", f("mean_reward_after_rft")),
                v["rft_traces"].to_string(),
                v["stage_extreme_pass_rate"].to_string(),
            ],
            &widths,
        );
    }
    let monotone = ends.windows(2).all(|w| w[1] >= w[0]);
    let _ = writeln!(summary, "end-of-cycle mean reward non-decreasing: {monotone}");
    run.write_summary(&summary)
}

#[derive(Serialize)]
struct MethodRecord<'a> {
    method: DistillMode,
    #[serde(flatten)]
    metrics: &'a DistillMetrics,
}

pub fn opd(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let pool = task_pool(cfg)?;
    let heldout = match &cfg.pool.heldout_path {
        Some(p) => load_pool(p, cfg.pool.max_prompt_len)?,
        None => generated_heldout(cfg),
    };
    let judge = cfg.judge.build();
    let teacher = match &cfg.opd.teacher {
        Some(p) => load_policy(p)?,
        None => {
            info!("training teacher: {} supervised steps", cfg.opd.teacher_steps);
            let t = distill::supervised_teacher(
                &pool,
                cfg.opd.teacher_hidden,
                cfg.opd.teacher_steps,
                cfg.opd.teacher_lr,
                &mut RngStream::new(cfg.seed, TEACHER_STREAM),
            )
            .map_err(CliError::data)?;
            save_policy(&run.path("teacher.ckpt"), &t)?;
            t
        }
    };
    let student = match &cfg.opd.student {
        Some(p) => load_policy(p)?,
        None => ToyPolicy::new(cfg.opd.student_hidden, &mut RngStream::new(cfg.seed, STUDENT_STREAM)),
    };
    let pair = TeacherStudentPair::new(teacher, student).map_err(CliError::data)?;
    let primary = cfg.distill.baseline_mode;
    let mut modes = vec![primary];
    if cfg.opd.compare {
        modes.push(match primary {
            DistillMode::OnPolicy => DistillMode::Offline,
            DistillMode::Offline => DistillMode::OnPolicy,
        });
    }
    let mut summary = String::new();
    let widths = [10, 12, 12, 10, 12];
    table_row(
        &mut summary,
        &["method", "initial_kl", "final_kl", "kl_drop", "reward"].map(String::from),
        &widths,
    );
    for mode in modes {
        let mut p = pair.clone();
        let config = OpdConfig {
            baseline_mode: mode,
            ..cfg.distill.clone()
        };
        let mut emit_err = None;
        let records = distill::distill(&mut p, &pool, &heldout, &config, &cfg.rewards, judge.as_ref(), cfg.seed, &mut |m| {
            if emit_err.is_none() {
                if let Err(e) = run.emit("distill", &MethodRecord { method: mode, metrics: m }) {
                    emit_err = Some(e);
                }
            }
        })
        .map_err(CliError::data)?;
        if let Some(e) = emit_err {
            return Err(e);
        }
        let name = match mode {
            DistillMode::OnPolicy => "on_policy",
            DistillMode::Offline => "offline",
        };
        save_policy(&run.path(&format!("student-{name}.ckpt")), &p.student)?;
        if let (Some(first), Some(last)) = (records.first(), records.last()) {
            let drop = if first.heldout_kl > 0.0 { 1.0 - last.heldout_kl / first.heldout_kl } else { 0.0 };
            table_row(
                &mut summary,
                &[
                    name.to_string(),
                    format!("{:.5}", first.heldout_kl),
                    format!("{:.5}", last.heldout_kl),
                    format!("{:.1}%", 100.0 * drop),
                    format!("{:.4}", last.student_reward),
                ],
                &widths,
            );
        }
    }
    run.write_summary(&summary)
}

pub fn mot_check(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    info!("running kernel suites");
    let mut rows = run_suites(&cfg.mot, &cfg.mot_check.sizes(), cfg.seed).map_err(CliError::data)?;
    if let Some(path) = &cfg.mot_check.records {
        let file = File::open(path).map_err(|e| data_at(path, e))?;
        let seqs = read_sequences(BufReader::new(file)).map_err(|e| data_at(path, e))?;
        if seqs.is_empty() {
            return Err(data_at(path, "no records"));
        }
        for (i, s) in seqs.iter().enumerate() {
            s.validate(&cfg.mot).map_err(|e| data_at(path, format!("record {}: {e}", i + 1)))?;
        }
        let mut rng = RngStream::new(cfg.seed, RECORD_CHECK_STREAM);
        let params = random_params(cfg.mot.clone(), &mut rng).map_err(CliError::data)?;
        let teacher = SyntheticTeacher::new(cfg.mot.patch_dim, cfg.seed).map_err(CliError::data)?;
        let mut worst = 0.0f64;
        let mut decomposition_violations = 0;
        for s in &seqs {
            let signals = teacher.signals(&s.elements()).map_err(CliError::data)?;
            let report = grad_check(&params, s, &signals, TrainingPhase::PreTraining, cfg.mot_check.sizes().coords_per_group, &mut rng)
                .map_err(CliError::data)?;
            worst = worst.max(report.max_rel_err);
            decomposition_violations += loss_decomposition(&params, s, &signals).map_err(CliError::data)?.violations;
        }
        rows.push(SuiteResult {
            suite: "records".into(),
            passed: worst <= GRAD_TOLERANCE && decomposition_violations == 0,
            detail: format!(
                "{} records, max rel err {worst:.3e}, {decomposition_violations} decomposition violations",
                seqs.len()
            ),
        });
    }
    let widths = [28, 6];
    let mut summary = String::new();
    table_row(&mut summary, &["suite".into(), "result".into()], &widths);
    for row in &rows {
        run.emit("suite", row)?;
        let mut line = String::new();
        table_row(
            &mut line,
            &[row.suite.clone(), if row.passed { "pass".into() } else { "FAIL".into() }],
            &widths,
        );
        let _ = writeln!(summary, "{}  {}", line.trim_end(), row.detail);
    }
    run.write_summary(&summary)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("failing suites: {}", failed.join(", "))))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskProbability {
    id: u64,
    p: f64,
}

#[derive(Serialize)]
struct FilterRecord {
    tasks: usize,
    usable: usize,
    solved_none: usize,
    solved_all: usize,
    frontier: usize,
    stage: usize,
    stage_by_dimension: [usize; 4],
    mean_reward: f64,
}

pub fn pool_filter(cfg: &RunConfig, run: &mut RunDir) -> Result<(), CliError> {
    let pool = task_pool(cfg)?;
    let judge = cfg.judge.build();
    let stream = RngStream::new(cfg.seed, FILTER_STREAM);
    let records = match &cfg.filter.policy {
        FilterPolicy::Records { path } => {
            let file = File::open(path).map_err(|e| data_at(path, e))?;
            curriculum::read_records(BufReader::new(file)).map_err(|e| data_at(path, e))?
        }
        source => {
            let generator: Box<dyn Generator> = match source {
                FilterPolicy::Checkpoint { path } => Box::new(load_policy(path)?),
                FilterPolicy::Oracle => Box::new(ScriptedPolicy::Oracle),
                FilterPolicy::Garbage => Box::new(ScriptedPolicy::Garbage),
                FilterPolicy::Bernoulli { p } => Box::new(ScriptedPolicy::Bernoulli(*p)),
                FilterPolicy::PerTask { path } => {
                    let mut errors = Vec::new();
                    let probs = read_lines(path, "per-task", &mut errors, |line| {
                        let r: TaskProbability = serde_json::from_str(line).map_err(|e| e.to_string())?;
                        if !(0.0..=1.0).contains(&r.p) {
                            return Err(format!("p = {} outside [0, 1]", r.p));
                        }
                        Ok((r.id, r.p))
                    })?;
                    if let Some(e) = errors.first() {
                        return Err(data_at(path, e));
                    }
                    Box::new(ScriptedPolicy::PerTask(probs.into_iter().collect::<BTreeMap<_, _>>()))
                }
                FilterPolicy::Records { .. } => unreachable!("handled above"),
            };
            let c = &cfg.curriculum;
            evaluate_pool(
                generator.as_ref(),
                &pool,
                c.k_attempts,
                c.success_threshold,
                c.max_response_len,
                &cfg.rewards,
                judge.as_ref(),
                &stream,
            )
            .map_err(CliError::data)?
        }
    };
    let frontier: HashSet<u64> = filter_frontier(&records).into_iter().collect();
    let retained: Vec<TaskInstance> = pool.iter().filter(|t| frontier.contains(&t.id)).cloned().collect();
    let stage = if retained.is_empty() {
        warn!("empty frontier: no task has partial success");
        Vec::new()
    } else {
        balance_dimensions(&retained, cfg.curriculum.stage_size, &stream.split(1)).map_err(CliError::data)?
    };
    write_jsonl(&run.path("records.jsonl"), &records)?;
    save_pool(&run.path("frontier.jsonl"), &retained)?;
    save_pool(&run.path("stage.jsonl"), &stage)?;
    let usable: Vec<&PassRateRecord> = records.iter().filter(|r| r.usable).collect();
    let summary_record = FilterRecord {
        tasks: records.len(),
        usable: usable.len(),
        solved_none: usable.iter().filter(|r| r.successes == 0).count(),
        solved_all: usable.iter().filter(|r| r.successes == r.attempts).count(),
        frontier: retained.len(),
        stage: stage.len(),
        stage_by_dimension: curriculum::dimension_counts(&stage),
        mean_reward: mean_reward(&records),
    };
    run.emit("filter", &summary_record)?;
    let s = &summary_record;
    let summary = format!(
        "{} tasks evaluated ({} usable): {} never solved, {} always solved\n\
         frontier {} -> frontier.jsonl, stage {} {:?} -> stage.jsonl\nmean reward {:.4}\n",
        s.tasks, s.usable, s.solved_none, s.solved_all, s.frontier, s.stage, s.stage_by_dimension, s.mean_reward
    );
    run.write_summary(&summary)
}
