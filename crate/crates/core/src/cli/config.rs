use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::distill::OpdConfig;
use crate::grpo::GrpoConfig;
use crate::mot::check::SuiteSizes;
use crate::mot::MotConfig;
use crate::rewards::{JudgeClient, MockJudge, QualityMode, RemoteJudge, RewardSpec};
use crate::task::TaskKind;

/// Everything a run needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Thread count; 0 uses every core.
    pub workers: usize,
    /// Checkpoint period in training steps.
    pub checkpoint_every: usize,
    pub pool: PoolSection,
    pub policy: PolicySection,
    pub rewards: RewardSpec,
    pub judge: JudgeSection,
    pub grpo: GrpoConfig,
    pub curriculum: CurriculumConfig,
    pub iterate: IterateSection,
    pub distill: OpdConfig,
    pub opd: OpdSection,
    pub mot: MotConfig,
    pub mot_check: MotCheckSection,
    pub reward_eval: RewardEvalSection,
    pub filter: FilterSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("runs/default"),
            workers: 0,
            checkpoint_every: 50,
            pool: PoolSection::default(),
            policy: PolicySection::default(),
            rewards: RewardSpec::default(),
            judge: JudgeSection::default(),
            grpo: GrpoConfig::default(),
            curriculum: CurriculumConfig::default(),
            iterate: IterateSection::default(),
            distill: OpdConfig::default(),
            opd: OpdSection::default(),
            mot: MotConfig::default(),
            mot_check: MotCheckSection::default(),
            reward_eval: RewardEvalSection::default(),
            filter: FilterSection::default(),
        }
    }
}

/// Task pool: read from `path`, or generated from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSection {
    pub path: Option<PathBuf>,
    pub kinds: Vec<TaskKind>,
    pub size: usize,
    pub max_prompt_len: usize,
    /// Held-out pool for distillation; generated when absent.
    pub heldout_path: Option<PathBuf>,
    pub heldout_size: usize,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            path: None,
            kinds: vec![TaskKind::Mcq],
            size: 256,
            max_prompt_len: 64,
            heldout_path: None,
            heldout_size: 64,
        }
    }
}

/// Initial policy: a checkpoint, or a fresh network with a format warm-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub checkpoint: Option<PathBuf>,
    pub hidden_dim: usize,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            hidden_dim: 32,
            warmup_steps: 3000,
            warmup_lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum JudgeSection {
    Mock { quality: QualityMode },
    Remote { endpoint: String, timeout_ms: u64, max_in_flight: usize },
}

impl Default for JudgeSection {
    fn default() -> Self {
        JudgeSection::Mock {
            quality: QualityMode::Structural,
        }
    }
}

impl JudgeSection {
    pub fn build(&self) -> Box<dyn JudgeClient> {
        match self {
            JudgeSection::Mock { quality } => Box::new(MockJudge { quality: *quality }),
            JudgeSection::Remote {
                endpoint,
                timeout_ms,
                max_in_flight,
            } => Box::new(RemoteJudge::new(
                endpoint.clone(),
                std::time::Duration::from_millis(*timeout_ms),
                *max_in_flight,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateSection {
    pub cycles: usize,
}

impl Default for IterateSection {
    fn default() -> Self {
        Self { cycles: 3 }
    }
}

/// Teacher and student for distillation. A missing teacher is trained supervised on
/// the pool; a missing student starts from random weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpdSection {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub teacher_hidden: usize,
    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub student_hidden: usize,
    /// Also run the other method from the same initialization.
    pub compare: bool,
}

impl Default for OpdSection {
    fn default() -> Self {
        Self {
            teacher: None,
            student: None,
            teacher_hidden: 32,
            teacher_steps: 8000,
            teacher_lr: 0.05,
            student_hidden: 16,
            compare: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotCheckSection {
    pub layouts: usize,
    pub probe_sequences: usize,
    pub grad_configs: usize,
    /// Finite-difference coordinates per parameter group; 0 checks all of them.
    pub coords_per_group: usize,
    /// Optional micro-batch file to check in addition to random sequences.
    pub records: Option<PathBuf>,
}

impl Default for MotCheckSection {
    fn default() -> Self {
        let s = SuiteSizes::default();
        Self {
            layouts: s.layouts,
            probe_sequences: s.probe_sequences,
            grad_configs: s.grad_configs,
            coords_per_group: s.coords_per_group.unwrap_or(0),
            records: None,
        }
    }
}

impl MotCheckSection {
    pub fn sizes(&self) -> SuiteSizes {
        SuiteSizes {
            layouts: self.layouts,
            probe_sequences: self.probe_sequences,
            grad_configs: self.grad_configs,
            coords_per_group: (self.coords_per_group > 0).then_some(self.coords_per_group),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardEvalSection {
    pub predictions: Option<PathBuf>,
    pub targets: Option<PathBuf>,
}

/// Source of the pass-rate records that the frontier filter consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterPolicy {
    /// Sample a policy checkpoint.
    Checkpoint { path: PathBuf },
    Oracle,
    Garbage,
    Bernoulli { p: f64 },
    /// Per-task success probabilities from a file of `{"id": .., "p": ..}` lines.
    PerTask { path: PathBuf },
    /// Pre-computed pass-rate records.
    Records { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub policy: FilterPolicy,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            policy: FilterPolicy::Bernoulli { p: 0.5 },
        }
    }
}

/// Which command a config is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    GenPool,
    RewardEval,
    RlTrain,
    Iterate,
    Opd,
    MotCheck,
    PoolFilter,
}

fn require_file(errors: &mut Vec<String>, what: &str, path: &Option<PathBuf>) {
    if let Some(p) = path {
        if !p.is_file() {
            errors.push(format!("{what}: no such file {}", p.display()));
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Every problem at once, so a run never starts half-configured.
    pub fn validate(&self, cmd: CommandKind) -> Vec<String> {
        let mut errors = Vec::new();
        let mut check = |name: &str, r: Result<(), String>| {
            if let Err(e) = r {
                errors.push(format!("{name}: {e}"));
            }
        };
        check("rewards", self.rewards.validate().map_err(|e| e.to_string()));
        let needs_pool = matches!(
            cmd,
            CommandKind::GenPool | CommandKind::RlTrain | CommandKind::Iterate | CommandKind::Opd | CommandKind::PoolFilter
        );
        if needs_pool {
            if self.pool.path.is_none() && (self.pool.size == 0 || self.pool.kinds.is_empty()) {
                check("pool", Err("a generated pool needs size > 0 and at least one kind".into()));
            }
            if let Some(k) = self.pool.kinds.iter().find(|k| !self.rewards.kinds.contains(k)) {
                check("pool", Err(format!("kind `{k}` has no reward in [rewards]")));
            }
        }
        if matches!(cmd, CommandKind::RlTrain | CommandKind::Iterate) {
            check("grpo", self.grpo.validate().map_err(|e| e.to_string()));
            if self.policy.checkpoint.is_none() && self.policy.hidden_dim == 0 {
                check("policy", Err("hidden_dim must be positive".into()));
            }
            if self.checkpoint_every == 0 {
                check("checkpoint_every", Err("must be positive".into()));
            }
        }
        if cmd == CommandKind::Iterate {
            check("curriculum", self.curriculum.validate().map_err(|e| e.to_string()));
            if self.iterate.cycles == 0 {
                check("iterate", Err("cycles must be >= 1".into()));
            }
        }
        if cmd == CommandKind::PoolFilter {
            check("curriculum", self.curriculum.validate().map_err(|e| e.to_string()));
            if let FilterPolicy::Bernoulli { p } = self.filter.policy {
                if !(0.0..=1.0).contains(&p) {
                    check("filter", Err(format!("p must lie in [0, 1], got {p}")));
                }
            }
        }
        if cmd == CommandKind::Opd {
            check("distill", self.distill.validate().map_err(|e| e.to_string()));
            if self.pool.heldout_path.is_none() && self.pool.heldout_size == 0 {
                check("pool", Err("heldout_size must be positive".into()));
            }
            if self.opd.teacher.is_none() && (self.opd.teacher_hidden == 0 || self.opd.teacher_steps == 0) {
                check("opd", Err("a trained teacher needs teacher_hidden and teacher_steps > 0".into()));
            }
            if self.opd.student.is_none() && self.opd.student_hidden == 0 {
                check("opd", Err("student_hidden must be positive".into()));
            }
        }
        if cmd == CommandKind::MotCheck {
            check("mot", self.mot.validate().map_err(|e| e.to_string()));
            if self.mot.n_layers > 2 || self.mot.d_model > 16 || self.mot.d_ff > 16 || self.mot.code_hidden > 16 {
                check("mot", Err("gradient checks need a micro config (<= 2 layers, widths <= 16)".into()));
            }
        }
        if needs_pool && cmd != CommandKind::GenPool {
            require_file(&mut errors, "pool.path", &self.pool.path);
        }
        match cmd {
            CommandKind::RlTrain | CommandKind::Iterate => require_file(&mut errors, "policy.checkpoint", &self.policy.checkpoint),
            CommandKind::Opd => {
                require_file(&mut errors, "pool.heldout_path", &self.pool.heldout_path);
                require_file(&mut errors, "opd.teacher", &self.opd.teacher);
                require_file(&mut errors, "opd.student", &self.opd.student);
            }
            CommandKind::MotCheck => require_file(&mut errors, "mot_check.records", &self.mot_check.records),
            CommandKind::RewardEval => {
                for (what, p) in [
                    ("reward_eval.predictions", &self.reward_eval.predictions),
                    ("reward_eval.targets", &self.reward_eval.targets),
                ] {
                    if p.is_none() {
                        errors.push(format!("{what}: required"));
                    }
                    require_file(&mut errors, what, p);
                }
            }
            CommandKind::PoolFilter => match &self.filter.policy {
                FilterPolicy::Checkpoint { path } | FilterPolicy::PerTask { path } | FilterPolicy::Records { path } => {
                    require_file(&mut errors, "filter.policy.path", &Some(path.clone()))
                }
                _ => {}
            },
            CommandKind::GenPool => {}
        }
        errors
    }
}

/// Path of the resolved config inside an output directory.
pub fn resolved_path(out: &Path) -> PathBuf {
    out.join("config.resolved.toml")
}
