//! Group-relative policy optimization.
//!
//! For each task a group of `G` responses is sampled from a frozen snapshot
//! `π_old`, scored, and normalized within the group:
//!
//! ```text
//! A_i  = (r_i - mean(r)) / std(r)                      (population std)
//! ρ_it = π_θ(y_it | x, y_i,<t) / π_old(y_it | x, y_i,<t)
//! L    = -1/Σ|y_i| · Σ_i Σ_t min(ρ_it A_i, clip(ρ_it, 1-ε_low, 1+ε_high) A_i)
//! ```
//!
//! Groups whose rewards have (numerically) zero spread are masked out. Overlong and
//! repetitive responses have their reward scaled down before normalization.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{RngStream, SamplingParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{self, parse_output, PolicyError, Rollout, ToyPolicy};
use crate::rewards::{dispatch_reward, JudgeClient, RewardError, RewardSpec};
use crate::task::{TaskInstance, TaskKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlongMode {
    /// Truncated responses get reward 0.
    Zero,
    /// Truncated responses keep half their reward.
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Groups (tasks) per rollout wave.
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the number of update steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub max_prompt_len: usize,
    pub max_response_len: usize,
    pub sigma_floor: f64,
    pub repetition_ngram: usize,
    pub repetition_threshold: f64,
    pub overlong_penalty_mode: OverlongMode,
    pub length_shaping_coeff: f64,
    pub sampling: SamplingParams,
    /// Fill `wall_ms` in metrics; off by default so metrics streams stay reproducible.
    pub record_wall_time: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            eps_low: 0.2,
            eps_high: 0.35,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            epochs: 5,
            max_steps: None,
            max_prompt_len: 64,
            max_response_len: policy::DESK_MAX_RESPONSE_LEN,
            sigma_floor: 1e-8,
            repetition_ngram: 4,
            repetition_threshold: 0.5,
            overlong_penalty_mode: OverlongMode::Zero,
            length_shaping_coeff: 0.0,
            sampling: SamplingParams::default(),
            record_wall_time: false,
        }
    }
}

impl GrpoConfig {
    /// Hyperparameters at the scale of the original large-model runs, for reference.
    pub fn large_model_scale() -> Self {
        Self {
            lr: 8e-7,
            batch_size: 128,
            max_prompt_len: 16_384,
            max_response_len: 16_384,
            ..Self::default()
        }
    }

    pub fn ratio_range(&self) -> (f64, f64) {
        (1.0 - self.eps_low, 1.0 + self.eps_high)
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) || !(self.eps_high > 0.0) {
            return bad(format!("clip epsilons must be positive (eps_low < 1), got {} / {}", self.eps_low, self.eps_high));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_response_len == 0 || self.max_prompt_len == 0 {
            return bad("batch_size, epochs and length caps must be positive".into());
        }
        if !(self.sigma_floor > 0.0) {
            return bad(format!("sigma_floor must be positive, got {}", self.sigma_floor));
        }
        if self.repetition_ngram == 0 || !(0.0..=1.0).contains(&self.repetition_threshold) {
            return bad("repetition_ngram must be positive and threshold in [0, 1]".into());
        }
        if !(self.length_shaping_coeff >= 0.0) {
            return bad("length_shaping_coeff must be non-negative".into());
        }
        self.sampling.validate().map_err(|e| GrpoError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub masked: bool,
}

/// Group-normalized advantages; zero-spread groups come back masked and all-zero.
pub fn compute_advantages(rewards: &[f64], sigma_floor: f64) -> Result<AdvantageVector, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::InvalidGroup(format!("need at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < sigma_floor {
        return Ok(AdvantageVector {
            values: vec![0.0; rewards.len()],
            masked: true,
        });
    }
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        masked: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task: TaskInstance,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.rollouts.len() != self.rewards.len() {
            return Err(GrpoError::InvalidGroup(format!(
                "{} rollouts but {} rewards",
                self.rollouts.len(),
                self.rewards.len()
            )));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.rollouts.iter().map(Rollout::len).sum()
    }
}

/// Per-token `π_θ / π_old`, with `π_old` read from the log-probabilities recorded at
/// sampling time.
pub fn importance_ratios(policy: &ToyPolicy, group: &RolloutGroup) -> Result<Vec<Vec<f64>>, GrpoError> {
    group
        .rollouts
        .iter()
        .map(|r| {
            if r.logprobs.len() != r.tokens.len() {
                return Err(GrpoError::Internal(format!(
                    "{} logprobs recorded for {} tokens",
                    r.logprobs.len(),
                    r.tokens.len()
                )));
            }
            let new = policy::teacher_forced_logprobs(policy, &group.task, &r.tokens)?;
            Ok(new.iter().zip(&r.logprobs).map(|(n, o)| (n - o).exp()).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
    /// Masked group: contributed nothing.
    pub skipped: bool,
}

/// Whether `min(ρA, clip(ρ)A)` picks the clipped constant. Ties go to the
/// unclipped branch, which carries the gradient.
pub fn clipped_branch(ratio: f64, advantage: f64, lo: f64, hi: f64) -> bool {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(lo, hi) * advantage;
    clipped < unclipped
}

/// Clipped surrogate loss of one group and its analytic gradient.
pub fn grpo_loss(
    policy: &ToyPolicy,
    group: &RolloutGroup,
    advantages: &AdvantageVector,
    ratios: &[Vec<f64>],
    config: &GrpoConfig,
) -> Result<GroupLoss, GrpoError> {
    group.validate()?;
    let total_tokens = group.total_tokens();
    if advantages.masked || total_tokens == 0 {
        return Ok(GroupLoss {
            loss: 0.0,
            grad: vec![0.0; policy.num_params()],
            clipped_tokens: 0,
            total_tokens,
            skipped: true,
        });
    }
    if advantages.values.len() != group.rollouts.len() || ratios.len() != group.rollouts.len() {
        return Err(GrpoError::Internal("advantage/ratio count does not match group".into()));
    }
    let (lo, hi) = config.ratio_range();
    let norm = 1.0 / total_tokens as f64;
    let mut objective = 0.0;
    let mut clipped_tokens = 0;
    let mut grad = vec![0.0; policy.num_params()];
    for ((rollout, &adv), rho) in group.rollouts.iter().zip(&advantages.values).zip(ratios) {
        if rho.len() != rollout.len() {
            return Err(GrpoError::Internal("ratio row length does not match rollout".into()));
        }
        let mut weights = Vec::with_capacity(rho.len());
        for &r in rho {
            if clipped_branch(r, adv, lo, hi) {
                objective += r.clamp(lo, hi) * adv;
                clipped_tokens += 1;
                weights.push(0.0);
            } else {
                objective += r * adv;
                // ∇(ρA) = A ρ ∇log π
                weights.push(-norm * adv * r);
            }
        }
        if weights.iter().any(|w| *w != 0.0) {
            let g = policy::grad_weighted_logprob(policy, &group.task, &rollout.tokens, &weights)?;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
    Ok(GroupLoss {
        loss: -norm * objective,
        grad,
        clipped_tokens,
        total_tokens,
        skipped: false,
    })
}

/// `1 - distinct / total` over n-grams; 0 when there are fewer than `n` items.
pub fn repetition_rate<T: std::hash::Hash + Eq>(items: &[T], n: usize) -> f64 {
    if n == 0 || items.len() < n {
        return 0.0;
    }
    let windows: Vec<&[T]> = items.windows(n).collect();
    let distinct: HashSet<&[T]> = windows.iter().copied().collect();
    1.0 - distinct.len() as f64 / windows.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityOutcome {
    pub multiplier: f64,
    pub repetitive: bool,
    pub overlong: bool,
}

/// Reward multiplier for overlong or repetitive responses, plus length shaping on
/// free-form tasks.
pub fn apply_quality_control(rollout: &Rollout, kind: TaskKind, config: &GrpoConfig) -> QualityOutcome {
    let repetitive = repetition_rate(&rollout.tokens, config.repetition_ngram) > config.repetition_threshold;
    let overlong = rollout.truncated;
    let mut multiplier = 1.0;
    if repetitive {
        multiplier = 0.0;
    }
    if overlong {
        multiplier *= match config.overlong_penalty_mode {
            OverlongMode::Zero => 0.0,
            OverlongMode::Half => 0.5,
        };
    }
    if kind == TaskKind::Freeform && config.length_shaping_coeff > 0.0 {
        let frac = rollout.len() as f64 / config.max_response_len as f64;
        multiplier *= (-config.length_shaping_coeff * frac).exp();
    }
    QualityOutcome {
        multiplier,
        repetitive,
        overlong,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub masked_fraction: f64,
    pub clip_rate: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Task reward of a raw response; unparseable responses score 0.
pub fn score_response(
    task: &TaskInstance,
    tokens: &[u32],
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
) -> Result<f64, RewardError> {
    let parsed = parse_output(tokens, task.kind).ok();
    dispatch_reward(task, parsed.as_ref(), spec, judge)
}

/// Samples one group per task from `policy` and scores every response.
pub fn collect_groups(
    policy: &ToyPolicy,
    tasks: &[TaskInstance],
    spec: &RewardSpec,
    config: &GrpoConfig,
    judge: &dyn JudgeClient,
    rng: &RngStream,
) -> Result<Vec<RolloutGroup>, GrpoError> {
    let g = config.group_size;
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|b| (0..g).map(move |m| (b, m))).collect();
    let scored: Vec<(Rollout, f64)> = jobs
        .par_iter()
        .map(|&(b, m)| {
            let task = &tasks[b];
            let mut stream = rng.split(b as u64).split(m as u64);
            let r = policy::rollout(policy, task, &config.sampling, config.max_response_len, &mut stream)?;
            let base = score_response(task, &r.tokens, spec, judge)?;
            let q = apply_quality_control(&r, task.kind, config);
            Ok((r, base * q.multiplier))
        })
        .collect::<Result<_, GrpoError>>()?;
    let mut it = scored.into_iter();
    Ok(tasks
        .iter()
        .map(|task| {
            let (rollouts, rewards) = it.by_ref().take(g).unzip();
            RolloutGroup {
                task: task.clone(),
                rollouts,
                rewards,
            }
        })
        .collect())
}

/// Trainer state: policy, optimizer and step counter. Resumable from any step because
/// every random draw is keyed on `(seed, step, ...)`.
#[derive(Debug, Clone)]
pub struct RlTrainer {
    pub policy: ToyPolicy,
    pub optimizer: Optimizer,
    pub config: GrpoConfig,
    pub seed: u64,
    pub step: usize,
}

impl RlTrainer {
    pub fn new(policy: ToyPolicy, config: GrpoConfig, seed: u64) -> Result<Self, GrpoError> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, config.lr, policy.num_params());
        Ok(Self {
            policy,
            optimizer,
            config,
            seed,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self, pool_len: usize) -> usize {
        pool_len.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, pool_len: usize) -> usize {
        let planned = self.config.epochs * self.steps_per_epoch(pool_len);
        self.config.max_steps.map_or(planned, |m| m.min(planned.max(m)))
    }

    /// Tasks of the batch for `step`: a fresh permutation of the pool each epoch.
    pub fn batch_indices(&self, pool_len: usize, step: usize) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch(pool_len);
        let epoch = step / per_epoch;
        let within = step % per_epoch;
        let mut order: Vec<usize> = (0..pool_len).collect();
        RngStream::new(self.seed, 0x5EED_0000).split(epoch as u64).shuffle(&mut order);
        let start = within * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(pool_len)].to_vec()
    }

    /// One rollout wave followed by exactly one parameter update.
    pub fn train_step(
        &mut self,
        pool: &[TaskInstance],
        spec: &RewardSpec,
        judge: &dyn JudgeClient,
    ) -> Result<StepMetrics, GrpoError> {
        if pool.is_empty() {
            return Err(GrpoError::Config("empty task pool".into()));
        }
        let started = Instant::now();
        let batch: Vec<TaskInstance> = self
            .batch_indices(pool.len(), self.step)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        let old_policy = self.policy.clone();
        let rng = RngStream::new(self.seed, 0xA11_0000).split(self.step as u64);
        let groups = collect_groups(&old_policy, &batch, spec, &self.config, judge, &rng)?;

        let results: Vec<GroupLoss> = groups
            .par_iter()
            .map(|g| {
                let adv = compute_advantages(&g.rewards, self.config.sigma_floor)?;
                let ratios = importance_ratios(&self.policy, g)?;
                grpo_loss(&self.policy, g, &adv, &ratios, &self.config)
            })
            .collect::<Result<_, GrpoError>>()?;

        let n_groups = groups.len() as f64;
        let mut grad = vec![0.0; self.policy.num_params()];
        let mut loss = 0.0;
        let (mut clipped, mut tokens, mut masked) = (0usize, 0usize, 0usize);
        for r in &results {
            loss += r.loss / n_groups;
            for (acc, v) in grad.iter_mut().zip(&r.grad) {
                *acc += v / n_groups;
            }
            if r.skipped {
                masked += 1;
            } else {
                clipped += r.clipped_tokens;
                tokens += r.total_tokens;
            }
        }
        if masked < groups.len() {
            self.optimizer.apply(self.policy.params_mut(), &grad);
        }
        let all_rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let metrics = StepMetrics {
            step: self.step,
            mean_reward: all_rewards.iter().sum::<f64>() / all_rewards.len() as f64,
            masked_fraction: masked as f64 / n_groups,
            clip_rate: if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 },
            loss,
            wall_ms: if self.config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until the configured step budget, reporting each step's metrics.
    pub fn run<F>(
        &mut self,
        pool: &[TaskInstance],
        spec: &RewardSpec,
        judge: &dyn JudgeClient,
        mut on_step: F,
    ) -> Result<Vec<StepMetrics>, GrpoError>
    where
        F: FnMut(&RlTrainer, &StepMetrics) -> Result<(), GrpoError>,
    {
        let total = self.total_steps(pool.len());
        let mut out = Vec::new();
        while self.step < total {
            let m = self.train_step(pool, spec, judge)?;
            on_step(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Trains `policy` with GRPO over `pool`.
pub fn rl_train(
    policy: ToyPolicy,
    pool: &[TaskInstance],
    spec: &RewardSpec,
    config: &GrpoConfig,
    judge: &dyn JudgeClient,
    seed: u64,
) -> Result<(ToyPolicy, Vec<StepMetrics>), GrpoError> {
    if pool.is_empty() {
        return Err(GrpoError::Config("empty task pool".into()));
    }
    let mut trainer = RlTrainer::new(policy, config.clone(), seed)?;
    let metrics = trainer.run(pool, spec, judge, |_, _| Ok(()))?;
    Ok((trainer.policy, metrics))
}
