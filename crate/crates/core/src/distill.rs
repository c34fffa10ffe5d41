//! Teacher-to-student distillation on the student's own prefixes.
//!
//! The student samples `y ~ π_s(·|x)`; the teacher is run under teacher forcing on the
//! same tokens, and the student minimizes
//!
//! ```text
//! L = 1/|y| · Σ_t KL(π_t(·|x, y_<t) ‖ π_s(·|x, y_<t))
//! ```
//!
//! with no gradient through the sampling distribution. The offline baseline instead
//! fits the student to teacher-generated responses by cross-entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grpo::score_response;
use crate::numerics::{self, RngStream, SamplingParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{self, render, PolicyError, Rollout, ToyPolicy};
use crate::rewards::{JudgeClient, RewardError, RewardSpec};
use crate::task::TaskInstance;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("teacher and student disagree on vocabulary size ({teacher} vs {student})")]
    VocabularyMismatch { teacher: usize, student: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}

/// A frozen teacher and a trainable student over the same vocabulary.
#[derive(Debug, Clone)]
pub struct TeacherStudentPair {
    teacher: ToyPolicy,
    pub student: ToyPolicy,
}

impl TeacherStudentPair {
    pub fn new(teacher: ToyPolicy, student: ToyPolicy) -> Result<Self, DistillError> {
        if teacher.vocab_size() != student.vocab_size() {
            return Err(DistillError::VocabularyMismatch {
                teacher: teacher.vocab_size(),
                student: student.vocab_size(),
            });
        }
        Ok(Self { teacher, student })
    }

    pub fn teacher(&self) -> &ToyPolicy {
        &self.teacher
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    OnPolicy,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpdConfig {
    pub rollouts_per_task: usize,
    /// Tasks drawn per update.
    pub tasks_per_step: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub max_response_len: usize,
    pub baseline_mode: DistillMode,
    /// Held-out evaluation period in steps.
    pub eval_every: usize,
}

impl Default for OpdConfig {
    fn default() -> Self {
        Self {
            rollouts_per_task: 2,
            tasks_per_step: 8,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            steps: 1000,
            max_response_len: policy::DESK_MAX_RESPONSE_LEN,
            baseline_mode: DistillMode::OnPolicy,
            eval_every: 50,
        }
    }
}

impl OpdConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.rollouts_per_task == 0 || self.tasks_per_step == 0 || self.max_response_len == 0 || self.eval_every == 0 {
            return Err(DistillError::InvalidArgument(
                "rollouts_per_task, tasks_per_step, max_response_len and eval_every must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(DistillError::InvalidArgument(format!("lr must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `KL(p ‖ q)` from log-probabilities. Terms with `p = 0` contribute nothing.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

/// Per-token forward KL along a student response and its gradient w.r.t. the student.
pub fn opd_loss(pair: &TeacherStudentPair, task: &TaskInstance, response: &[u32]) -> Result<(f64, Vec<f64>), DistillError> {
    let student = &pair.student;
    if response.is_empty() {
        return Ok((0.0, vec![0.0; student.num_params()]));
    }
    let teacher_logs = policy::teacher_forced_log_dists(&pair.teacher, &task.prompt_tokens, response)?;
    let trace = student.forward(&task.prompt_tokens, response)?;
    let n = response.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(response.len());
    for (lp, z) in teacher_logs.iter().zip(&trace.logits) {
        let lq = numerics::log_softmax(z)?;
        loss += kl_divergence(lp, &lq);
        // ∂KL/∂z = q - p
        dlogits.push(lp.iter().zip(&lq).map(|(lp, lq)| (lq.exp() - lp.exp()) / n).collect());
    }
    Ok((loss / n, student.backward(&trace, &dlogits)))
}

/// Mean token-level KL on student-generated prefixes of held-out tasks, plus the mean
/// task reward of those responses. The same stream is used on every call so that
/// successive evaluations differ only through the student.
pub fn heldout_eval(
    pair: &TeacherStudentPair,
    heldout: &[TaskInstance],
    max_len: usize,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
    rng: &RngStream,
) -> Result<(f64, f64), DistillError> {
    if heldout.is_empty() {
        return Err(DistillError::InvalidArgument("empty held-out set".into()));
    }
    let per_task: Vec<(f64, f64)> = heldout
        .par_iter()
        .map(|task| {
            let r = policy::rollout(&pair.student, task, &SamplingParams::default(), max_len, &mut rng.split(task.id))?;
            let (kl, _) = opd_loss(pair, task, &r.tokens)?;
            let reward = score_response(task, &r.tokens, spec, judge)?;
            Ok((kl, reward))
        })
        .collect::<Result<_, DistillError>>()?;
    let n = per_task.len() as f64;
    Ok((
        per_task.iter().map(|p| p.0).sum::<f64>() / n,
        per_task.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub step: usize,
    /// Mean training objective since the previous record: OPD loss on-policy, or
    /// cross-entropy on teacher responses offline.
    pub opd_loss: f64,
    pub heldout_kl: f64,
    pub student_reward: f64,
}

/// Shared training loop: `batch_grad` returns the mean loss and gradient for a step.
#[allow(clippy::too_many_arguments)]
fn train_loop<F>(
    pair: &mut TeacherStudentPair,
    heldout: &[TaskInstance],
    config: &OpdConfig,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
    seed: u64,
    mut batch_grad: F,
    on_record: &mut dyn FnMut(&DistillMetrics),
) -> Result<Vec<DistillMetrics>, DistillError>
where
    F: FnMut(&TeacherStudentPair, usize) -> Result<(f64, Vec<f64>), DistillError>,
{
    config.validate()?;
    let eval_stream = RngStream::new(seed, 0xE7A1);
    let mut opt = Optimizer::new(config.optimizer, config.lr, pair.student.num_params());
    let mut records = Vec::new();
    let mut emit = |pair: &TeacherStudentPair, step: usize, loss: f64| -> Result<(), DistillError> {
        let (heldout_kl, student_reward) = heldout_eval(pair, heldout, config.max_response_len, spec, judge, &eval_stream)?;
        let m = DistillMetrics {
            step,
            opd_loss: loss,
            heldout_kl,
            student_reward,
        };
        on_record(&m);
        records.push(m);
        Ok(())
    };
    emit(pair, 0, 0.0)?;
    let mut window = (0.0, 0usize);
    for step in 0..config.steps {
        let (loss, grad) = batch_grad(pair, step)?;
        opt.apply(pair.student.params_mut(), &grad);
        window = (window.0 + loss, window.1 + 1);
        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            emit(pair, step + 1, window.0 / window.1 as f64)?;
            window = (0.0, 0);
        }
    }
    Ok(records)
}

fn draw_tasks(pool_len: usize, count: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..count).map(|_| rng.below(pool_len)).collect()
}

/// On-policy distillation: the student rolls out, the teacher grades every prefix.
#[allow(clippy::too_many_arguments)]
pub fn opd_train(
    pair: &mut TeacherStudentPair,
    pool: &[TaskInstance],
    heldout: &[TaskInstance],
    config: &OpdConfig,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
    seed: u64,
    on_record: &mut dyn FnMut(&DistillMetrics),
) -> Result<Vec<DistillMetrics>, DistillError> {
    if pool.is_empty() {
        return Err(DistillError::InvalidArgument("empty task pool".into()));
    }
    let root = RngStream::new(seed, 0x0D15);
    let batch = |pair: &TeacherStudentPair, step: usize| {
        let stream = root.split(step as u64);
        let tasks = draw_tasks(pool.len(), config.tasks_per_step, &mut stream.split(u64::MAX));
        let jobs: Vec<(usize, usize)> = tasks
            .iter()
            .enumerate()
            .flat_map(|(b, &t)| (0..config.rollouts_per_task).map(move |m| (b * config.rollouts_per_task + m, t)))
            .collect();
        let parts: Vec<(f64, Vec<f64>)> = jobs
            .par_iter()
            .map(|&(j, t)| {
                let task = &pool[t];
                let r: Rollout = policy::rollout(
                    &pair.student,
                    task,
                    &SamplingParams::default(),
                    config.max_response_len,
                    &mut stream.split(j as u64),
                )?;
                opd_loss(pair, task, &r.tokens)
            })
            .collect::<Result<_, DistillError>>()?;
        Ok(average(parts, pair.student.num_params()))
    };
    train_loop(pair, heldout, config, spec, judge, seed, batch, on_record)
}

fn average(parts: Vec<(f64, Vec<f64>)>, n_params: usize) -> (f64, Vec<f64>) {
    let k = parts.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l / k;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v / k;
        }
    }
    (loss, grad)
}

/// Teacher responses sampled once up front, `rollouts_per_task` per pool task.
pub fn teacher_corpus(
    teacher: &ToyPolicy,
    pool: &[TaskInstance],
    rollouts_per_task: usize,
    max_len: usize,
    rng: &RngStream,
) -> Result<Vec<(usize, Vec<u32>)>, DistillError> {
    let jobs: Vec<(usize, usize)> = (0..pool.len())
        .flat_map(|t| (0..rollouts_per_task).map(move |m| (t, m)))
        .collect();
    jobs.par_iter()
        .map(|&(t, m)| {
            let r = policy::rollout(teacher, &pool[t], &SamplingParams::default(), max_len, &mut rng.split(t as u64).split(m as u64))?;
            Ok((t, r.tokens))
        })
        .collect()
}

/// Offline baseline: token-level cross-entropy on a fixed teacher corpus.
#[allow(clippy::too_many_arguments)]
pub fn offline_distill(
    pair: &mut TeacherStudentPair,
    pool: &[TaskInstance],
    heldout: &[TaskInstance],
    config: &OpdConfig,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
    seed: u64,
    on_record: &mut dyn FnMut(&DistillMetrics),
) -> Result<Vec<DistillMetrics>, DistillError> {
    if pool.is_empty() {
        return Err(DistillError::InvalidArgument("empty task pool".into()));
    }
    let corpus = teacher_corpus(&pair.teacher, pool, config.rollouts_per_task, config.max_response_len, &RngStream::new(seed, 0x0FF1))?;
    let root = RngStream::new(seed, 0x0D15);
    let batch_len = config.tasks_per_step * config.rollouts_per_task;
    let batch = |pair: &TeacherStudentPair, step: usize| {
        let picks = draw_tasks(corpus.len(), batch_len, &mut root.split(step as u64));
        let parts: Vec<(f64, Vec<f64>)> = picks
            .par_iter()
            .map(|&i| {
                let (t, tokens) = &corpus[i];
                Ok(policy::cross_entropy(&pair.student, &pool[*t].prompt_tokens, tokens)?)
            })
            .collect::<Result<_, DistillError>>()?;
        Ok(average(parts, pair.student.num_params()))
    };
    train_loop(pair, heldout, config, spec, judge, seed, batch, on_record)
}

/// Trains with the method named in `config.baseline_mode`.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    pair: &mut TeacherStudentPair,
    pool: &[TaskInstance],
    heldout: &[TaskInstance],
    config: &OpdConfig,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
    seed: u64,
    on_record: &mut dyn FnMut(&DistillMetrics),
) -> Result<Vec<DistillMetrics>, DistillError> {
    match config.baseline_mode {
        DistillMode::OnPolicy => opd_train(pair, pool, heldout, config, spec, judge, seed, on_record),
        DistillMode::Offline => offline_distill(pair, pool, heldout, config, spec, judge, seed, on_record),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub on_policy: Vec<DistillMetrics>,
    pub offline: Vec<DistillMetrics>,
}

impl Comparison {
    pub fn final_kl(&self) -> (f64, f64) {
        let last = |m: &[DistillMetrics]| m.last().map_or(f64::NAN, |r| r.heldout_kl);
        (last(&self.on_policy), last(&self.offline))
    }
}

/// Paired run of both methods from the same student initialization and seed.
pub fn compare_methods(
    pair: &TeacherStudentPair,
    pool: &[TaskInstance],
    heldout: &[TaskInstance],
    config: &OpdConfig,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
    seed: u64,
) -> Result<Comparison, DistillError> {
    let mut on = pair.clone();
    let mut off = pair.clone();
    Ok(Comparison {
        on_policy: opd_train(&mut on, pool, heldout, config, spec, judge, seed, &mut |_| {})?,
        offline: offline_distill(&mut off, pool, heldout, config, spec, judge, seed, &mut |_| {})?,
    })
}

/// A strong teacher for synthetic pools: supervised training on the correct answers.
pub fn supervised_teacher(
    pool: &[TaskInstance],
    hidden_dim: usize,
    steps: usize,
    lr: f64,
    rng: &mut RngStream,
) -> Result<ToyPolicy, DistillError> {
    if pool.is_empty() {
        return Err(DistillError::InvalidArgument("empty task pool".into()));
    }
    let mut teacher = ToyPolicy::new(hidden_dim, rng);
    for _ in 0..steps {
        let t = &pool[rng.below(pool.len())];
        policy::sft_step(&mut teacher, &t.prompt_tokens, &render(&t.target), lr)?;
    }
    Ok(teacher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, norm, relative_error, DEFAULT_FD_STEP};
    use crate::policy::{generate_pool, generate_task};
    use crate::rewards::MockJudge;
    use crate::task::{Dimension, TaskKind};

    #[test]
    fn hand_kl_two_symbols() {
        let p = [0.8f64.ln(), 0.2f64.ln()];
        let q = [0.5f64.ln(), 0.5f64.ln()];
        let expect = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl_divergence(&p, &q) - expect).abs() < 1e-15);
        assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn identical_policies_give_zero_loss_and_gradient() {
        let mut rng = RngStream::new(1, 0);
        let s = ToyPolicy::new(8, &mut rng);
        let pair = TeacherStudentPair::new(s.clone(), s.clone()).unwrap();
        let task = generate_task(0, TaskKind::Box, Dimension::Perception, &mut rng);
        let r = policy::rollout(&s, &task, &SamplingParams::default(), 20, &mut rng).unwrap();
        let (loss, grad) = opd_loss(&pair, &task, &r.tokens).unwrap();
        assert!(loss.abs() < 1e-10 && norm(&grad) < 1e-10);
        let (l0, g0) = opd_loss(&pair, &task, &[]).unwrap();
        assert_eq!((l0, norm(&g0)), (0.0, 0.0));
    }

    #[test]
    fn uniform_teacher_and_student() {
        let mut rng = RngStream::new(2, 0);
        let mut a = ToyPolicy::new(4, &mut rng);
        let mut b = ToyPolicy::new(6, &mut rng);
        for p in [&mut a, &mut b] {
            let n = p.num_params();
            let v = p.vocab_size();
            let d = p.hidden_dim();
            for x in &mut p.params_mut()[n - v * (d + 1)..] {
                *x = 0.0;
            }
        }
        let pair = TeacherStudentPair::new(a, b).unwrap();
        let task = generate_task(0, TaskKind::Mcq, Dimension::Interaction, &mut rng);
        let (loss, _) = opd_loss(&pair, &task, &[5, 6, 7]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn opd_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        for trial in 0..10 {
            let teacher = ToyPolicy::new(5, &mut rng);
            let student = ToyPolicy::new(3 + trial % 3, &mut rng);
            let task = generate_task(0, TaskKind::ALL[trial % 11], Dimension::Planning, &mut rng);
            let r = policy::rollout(&student, &task, &SamplingParams::default(), 5, &mut rng).unwrap();
            let pair = TeacherStudentPair::new(teacher.clone(), student.clone()).unwrap();
            let (_, g) = opd_loss(&pair, &task, &r.tokens).unwrap();
            let hd = student.hidden_dim();
            let f = |theta: &[f64]| {
                let s = ToyPolicy::from_params(hd, theta.to_vec()).unwrap();
                opd_loss(&TeacherStudentPair::new(teacher.clone(), s).unwrap(), &task, &r.tokens).unwrap().0
            };
            let fd = finite_diff_gradient(f, student.params(), DEFAULT_FD_STEP).unwrap();
            let worst = g.iter().zip(&fd).map(|(a, n)| relative_error(*a, *n, 1e-5)).fold(0.0, f64::max);
            assert!(worst <= 1e-4, "trial {trial}: {worst}");
        }
    }

    #[test]
    fn zero_lr_and_zero_steps_leave_student_unchanged() {
        let mut rng = RngStream::new(4, 0);
        let pool = generate_pool(&[TaskKind::Mcq], 16, &mut rng);
        let teacher = ToyPolicy::new(8, &mut rng);
        let student = ToyPolicy::new(6, &mut rng);
        let pair = TeacherStudentPair::new(teacher.clone(), student.clone()).unwrap();
        let fp = teacher.fingerprint();
        let spec = RewardSpec::default();
        let judge = MockJudge::default();
        let cfg = OpdConfig {
            lr: 0.0,
            steps: 6,
            eval_every: 3,
            ..OpdConfig::default()
        };
        let mut p = pair.clone();
        let m = opd_train(&mut p, &pool, &pool[..4], &cfg, &spec, &judge, 1, &mut |_| {}).unwrap();
        assert_eq!(p.student, student);
        assert_eq!(p.teacher().fingerprint(), fp);
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|r| r.heldout_kl == m[0].heldout_kl));
        let mut p = pair.clone();
        offline_distill(&mut p, &pool, &pool[..4], &OpdConfig { steps: 0, ..cfg }, &spec, &judge, 1, &mut |_| {}).unwrap();
        assert_eq!(p.student, student);
    }

    #[test]
    fn self_distillation_is_flat() {
        let mut rng = RngStream::new(5, 0);
        let pool = generate_pool(&[TaskKind::Binary], 8, &mut rng);
        let s = ToyPolicy::new(6, &mut rng);
        let mut pair = TeacherStudentPair::new(s.clone(), s).unwrap();
        let cfg = OpdConfig {
            steps: 4,
            eval_every: 2,
            ..OpdConfig::default()
        };
        let m = opd_train(&mut pair, &pool, &pool, &cfg, &RewardSpec::default(), &MockJudge::default(), 2, &mut |_| {}).unwrap();
        assert!(m.iter().all(|r| r.opd_loss.abs() < 1e-10 && r.heldout_kl.abs() < 1e-10));
    }
}
