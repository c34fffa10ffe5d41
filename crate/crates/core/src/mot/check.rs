//! Verification suites for the kernel: mask rules, perturbation probes, branch
//! isolation, initialization equivalence, loss decomposition and gradient checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layout::{build_mask, Branch, MaskMode, Segment, SegmentLayout};
use super::loss::{self, TrainingPhase};
use super::model::{self, branch_ffn, branch_projections, embed, mot_forward, HeadGrads};
use super::params::{MotConfig, MotParams};
use super::teacher::{SyntheticTeacher, TeacherSignals};
use super::{random_layout, random_sequence, sequence_loss, sequence_loss_and_grad, MotError, MotSequence};
use crate::numerics::{finite_diff_coords, relative_error, RngStream, DEFAULT_FD_STEP};

/// Magnitude floor for gradient relative errors.
pub const GRAD_REL_FLOOR: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Visibility of key `k` from query `q`, decided entry by entry.
pub fn mask_entry_rule(layout: &SegmentLayout, mode: MaskMode, q: usize, k: usize) -> bool {
    let spans = layout.spans();
    let seg = spans.iter().position(|&(s, e)| (s..e).contains(&q)).expect("query inside layout");
    let (start, end) = spans[seg];
    match layout.segments()[seg] {
        Segment::Text { .. } => k <= q,
        Segment::Vision { .. } => match mode {
            MaskMode::SegmentBidirectional => k < end,
            MaskMode::VisionIsolated => start <= k && k < end,
        },
    }
}

pub fn random_micro_config(rng: &mut RngStream) -> MotConfig {
    let d_model = [4, 6, 8, 12, 16][rng.below(5)];
    let heads: Vec<usize> = [1, 2, 4].into_iter().filter(|h| d_model % h == 0).collect();
    MotConfig {
        d_model,
        n_layers: [0, 1, 1, 2, 2][rng.below(5)],
        n_heads: heads[rng.below(heads.len())],
        d_ff: 4 + rng.below(13),
        text_vocab: 4 + rng.below(9),
        patch_dim: 2 + rng.below(7),
        code_hidden: 4 + rng.below(13),
        code_head_depth: 1 + rng.below(2),
        max_len: 16,
        mask_mode: if rng.below(2) == 0 {
            MaskMode::SegmentBidirectional
        } else {
            MaskMode::VisionIsolated
        },
        ..MotConfig::default()
    }
}

/// Initialized, then jittered so that branches and biases differ.
pub fn random_params(config: MotConfig, rng: &mut RngStream) -> Result<MotParams, MotError> {
    let mut p = MotParams::init(config, rng)?;
    p.perturb(0.1, rng);
    Ok(p)
}

/// A random record with teacher signals from a teacher seeded by `teacher_seed`.
pub fn random_example(
    config: &MotConfig,
    teacher_seed: u64,
    rng: &mut RngStream,
) -> Result<(MotSequence, TeacherSignals), MotError> {
    let layout = random_layout(config.max_len, 4, 4, rng);
    let seq = random_sequence(config, layout, rng);
    let signals = SyntheticTeacher::new(config.patch_dim, teacher_seed)?.signals(&seq.elements())?;
    Ok((seq, signals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
}

/// Analytic gradient of the phase's total loss against central differences, for every
/// parameter group. Groups larger than `coords_per_group` are sampled.
pub fn grad_check(
    params: &MotParams,
    seq: &MotSequence,
    signals: &TeacherSignals,
    phase: TrainingPhase,
    coords_per_group: Option<usize>,
    rng: &mut RngStream,
) -> Result<GradCheckReport, MotError> {
    let (_, analytic) = sequence_loss_and_grad(params, seq, signals, phase)?;
    let config = params.config().clone();
    let f = |theta: &[f64]| {
        MotParams::from_values(config.clone(), theta.to_vec())
            .and_then(|p| sequence_loss(&p, seq, signals, phase))
            .map_or(f64::NAN, |b| b.total)
    };
    let mut groups = Vec::new();
    for (name, range) in params.layout().groups() {
        let mut coords: Vec<usize> = range.clone().collect();
        if let Some(cap) = coords_per_group {
            if coords.len() > cap {
                rng.shuffle(&mut coords);
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        let numeric: Vec<f64> = coords
            .par_chunks(16)
            .map(|chunk| finite_diff_coords(f, params.values(), chunk, DEFAULT_FD_STEP))
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let max_rel_err = coords
            .iter()
            .zip(&numeric)
            .map(|(&i, &n)| relative_error(analytic[i], n, GRAD_REL_FLOOR))
            .fold(0.0, f64::max);
        groups.push(GroupError {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { groups, max_rel_err })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checks: usize,
    pub violations: usize,
}

impl ProbeReport {
    fn add(&mut self, other: ProbeReport) {
        self.checks += other.checks;
        self.violations += other.violations;
    }
}

/// Perturbs each input position in turn. Positions that cannot see it must keep a
/// bit-identical hidden state; positions that can must change (when depth > 0).
pub fn perturbation_probe(params: &MotParams, seq: &MotSequence, rng: &mut RngStream) -> Result<ProbeReport, MotError> {
    let x = embed(params, seq)?;
    let base = mot_forward(params, &x, &seq.layout)?;
    let mask = build_mask(&seq.layout, params.config().mask_mode);
    let deep = params.config().n_layers > 0;
    let mut report = ProbeReport::default();
    for q in 0..x.len() {
        let mut xp = x.clone();
        for v in &mut xp[q] {
            *v += rng.normal();
        }
        let out = mot_forward(params, &xp, &seq.layout)?;
        for t in 0..x.len() {
            if t == q {
                continue;
            }
            let same = out.hidden[t] == base.hidden[t];
            if !mask[t][q] {
                report.checks += 1;
                report.violations += usize::from(!same);
            } else if deep {
                report.checks += 1;
                report.violations += usize::from(same);
            }
        }
    }
    Ok(report)
}

fn fill_branch(params: &mut MotParams, branch: Branch, mut value: impl FnMut() -> f64) {
    let ranges = params.layout().branch_ranges(params.config(), branch);
    for r in ranges {
        for v in &mut params.values_mut()[r] {
            *v = value();
        }
    }
}

/// Text-only sequences ignore the vision branch entirely, a lone visual element ignores
/// the text branch, and text-only input sends no gradient to the vision branch.
pub fn branch_isolation(params: &MotParams, rng: &mut RngStream) -> Result<ProbeReport, MotError> {
    let c = params.config().clone();
    let mut report = ProbeReport::default();
    let text_len = 1 + rng.below(c.max_len.min(8));
    let text_layout = SegmentLayout::new(vec![Segment::Text { len: text_len }], c.max_len)?;
    let text_seq = random_sequence(&c, text_layout, rng);
    let base = model::forward_sequence(params, &text_seq)?;
    let mut zeroed = params.clone();
    fill_branch(&mut zeroed, Branch::Vision, || 0.0);
    let mut scrambled = params.clone();
    fill_branch(&mut scrambled, Branch::Vision, || rng.normal());
    for p in [&zeroed, &scrambled] {
        let out = model::forward_sequence(p, &text_seq)?;
        report.checks += 1;
        report.violations += usize::from(out.hidden != base.hidden || out.text_logits != base.text_logits);
    }

    let vision_len = 1 + rng.below(c.max_len.min(8) - 1);
    let vision_layout = SegmentLayout::new(vec![Segment::Vision { len: vision_len, latent: true }], c.max_len)?;
    let vision_seq = random_sequence(&c, vision_layout, rng);
    let base = model::forward_sequence(params, &vision_seq)?;
    let mut no_text = params.clone();
    fill_branch(&mut no_text, Branch::Text, || 0.0);
    let out = model::forward_sequence(&no_text, &vision_seq)?;
    report.checks += 1;
    report.violations += usize::from(out.hidden != base.hidden);

    let signals = TeacherSignals {
        codes: Vec::new(),
        f_teacher: Vec::new(),
    };
    let (_, grad) = sequence_loss_and_grad(params, &text_seq, &signals, TrainingPhase::PreTraining)?;
    let leaked = params
        .layout()
        .branch_ranges(&c, Branch::Vision)
        .into_iter()
        .any(|r| grad[r].iter().any(|&g| g != 0.0));
    report.checks += 1;
    report.violations += usize::from(leaked);
    Ok(report)
}

/// Right after duplication both branches compute the same projections and FFN.
pub fn init_equivalence(config: &MotConfig, rng: &mut RngStream) -> Result<ProbeReport, MotError> {
    let params = MotParams::init(config.clone(), rng)?;
    let mut report = ProbeReport::default();
    for layer in 0..config.n_layers {
        for _ in 0..4 {
            let a: Vec<f64> = (0..config.d_model).map(|_| rng.normal()).collect();
            report.checks += 2;
            let same_proj = branch_projections(&params, layer, Branch::Text, &a) == branch_projections(&params, layer, Branch::Vision, &a);
            let same_ffn = branch_ffn(&params, layer, Branch::Text, &a) == branch_ffn(&params, layer, Branch::Vision, &a);
            report.violations += usize::from(!same_proj) + usize::from(!same_ffn);
        }
    }
    Ok(report)
}

/// `total = llm + vision + global` in pre-training; in mid-training the total and the
/// gradient are exactly those of the language loss alone.
pub fn loss_decomposition(
    params: &MotParams,
    seq: &MotSequence,
    signals: &TeacherSignals,
) -> Result<ProbeReport, MotError> {
    let out = model::forward_sequence(params, seq)?;
    let llm = loss::loss_llm_grad(&out.text_logits, &seq.text_targets)?;
    let vision = loss::loss_vision(&out.code_logits, &signals.codes, &seq.layout)?;
    let global = loss::loss_global(&out.latents, &signals.f_teacher)?;
    let (pre, _) = sequence_loss_and_grad(params, seq, signals, TrainingPhase::PreTraining)?;
    let (mid, mid_grad) = sequence_loss_and_grad(params, seq, signals, TrainingPhase::MidTraining)?;
    let llm_only = model::backward_sequence(
        params,
        seq,
        &out,
        &HeadGrads {
            text_logits: llm.grad,
            ..HeadGrads::default()
        },
    );
    let checks = [
        pre.total == llm.value + vision + global,
        (pre.llm, pre.vision, pre.global) == (llm.value, vision, global),
        mid.total == llm.value,
        mid_grad == llm_only,
    ];
    Ok(ProbeReport {
        checks: checks.len(),
        violations: checks.iter().filter(|&&ok| !ok).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteSizes {
    pub layouts: usize,
    pub probe_sequences: usize,
    pub grad_configs: usize,
    /// `None` checks every coordinate.
    pub coords_per_group: Option<usize>,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            layouts: 1000,
            probe_sequences: 200,
            grad_configs: 20,
            coords_per_group: Some(64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    pub detail: String,
}

fn probe_row(suite: &str, r: ProbeReport) -> SuiteResult {
    SuiteResult {
        suite: suite.into(),
        passed: r.violations == 0 && r.checks > 0,
        detail: format!("{} checks, {} violations", r.checks, r.violations),
    }
}

/// Every suite on `config` (and on random micro configs for the gradient check).
pub fn run_suites(config: &MotConfig, sizes: &SuiteSizes, seed: u64) -> Result<Vec<SuiteResult>, MotError> {
    config.validate()?;
    let root = RngStream::new(seed, 0x3070);
    let mut rows = Vec::new();

    let mut rng = root.split(1);
    let mut mask = ProbeReport::default();
    let mut routing = ProbeReport::default();
    for _ in 0..sizes.layouts {
        let layout = random_layout(config.max_len, 6, 5, &mut rng);
        for mode in [MaskMode::SegmentBidirectional, MaskMode::VisionIsolated] {
            let m = build_mask(&layout, mode);
            let n = layout.len();
            mask.checks += 1;
            mask.violations += usize::from((0..n).any(|q| (0..n).any(|k| m[q][k] != mask_entry_rule(&layout, mode, q, k))));
        }
        let routes = super::route_modality(&layout);
        let spans = layout.spans();
        routing.checks += 1;
        routing.violations += usize::from(layout.segments().iter().zip(&spans).any(|(s, &(a, b))| {
            let want = match s {
                Segment::Text { .. } => Branch::Text,
                Segment::Vision { .. } => Branch::Vision,
            };
            routes[a..b].iter().any(|&r| r != want)
        }));
    }
    rows.push(probe_row("mask", mask));
    rows.push(probe_row("routing", routing));

    let mut rng = root.split(2);
    let mut probes = ProbeReport::default();
    for i in 0..sizes.probe_sequences {
        let mut c = config.clone();
        if c.n_layers == 0 {
            c.n_layers = 1;
        }
        if i % 2 == 1 {
            c.mask_mode = match c.mask_mode {
                MaskMode::SegmentBidirectional => MaskMode::VisionIsolated,
                MaskMode::VisionIsolated => MaskMode::SegmentBidirectional,
            };
        }
        let params = random_params(c.clone(), &mut rng)?;
        let seq = random_sequence(&c, random_layout(c.max_len, 4, 4, &mut rng), &mut rng);
        probes.add(perturbation_probe(&params, &seq, &mut rng)?);
    }
    rows.push(probe_row("causality_bidirectionality", probes));

    let mut rng = root.split(3);
    let mut isolation = ProbeReport::default();
    let mut init = ProbeReport::default();
    let mut decomposition = ProbeReport::default();
    for _ in 0..20 {
        let params = random_params(config.clone(), &mut rng)?;
        isolation.add(branch_isolation(&params, &mut rng)?);
        init.add(init_equivalence(config, &mut rng)?);
        let (seq, signals) = random_example(config, seed, &mut rng)?;
        decomposition.add(loss_decomposition(&params, &seq, &signals)?);
    }
    if config.n_layers == 0 {
        init.checks = init.checks.max(1);
    }
    rows.push(probe_row("branch_isolation", isolation));
    rows.push(probe_row("init_equivalence", init));
    rows.push(probe_row("loss_decomposition", decomposition));

    let mut rng = root.split(4);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..=sizes.grad_configs {
        let c = if i == 0 { config.clone() } else { random_micro_config(&mut rng) };
        let params = random_params(c.clone(), &mut rng)?;
        let (seq, signals) = random_example(&c, seed, &mut rng)?;
        let report = grad_check(&params, &seq, &signals, TrainingPhase::PreTraining, sizes.coords_per_group, &mut rng)?;
        if report.max_rel_err > GRAD_TOLERANCE {
            failures.push(i);
        }
        worst = worst.max(report.max_rel_err);
    }
    rows.push(SuiteResult {
        suite: "grad_check".into(),
        passed: failures.is_empty(),
        detail: format!("{} configs, max rel err {worst:.3e}, failing {failures:?}", sizes.grad_configs + 1),
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_on_default_config() {
        let mut rng = RngStream::new(1, 0);
        let config = MotConfig::default();
        let params = random_params(config.clone(), &mut rng).unwrap();
        let layout = SegmentLayout::new(
            vec![
                Segment::Text { len: 2 },
                Segment::Vision { len: 3, latent: true },
                Segment::Text { len: 2 },
                Segment::Vision { len: 2, latent: false },
            ],
            config.max_len,
        )
        .unwrap();
        let seq = random_sequence(&config, layout, &mut rng);
        let signals = SyntheticTeacher::new(config.patch_dim, 1).unwrap().signals(&seq.elements()).unwrap();
        let r = grad_check(&params, &seq, &signals, TrainingPhase::PreTraining, Some(24), &mut rng).unwrap();
        let worst = r.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
        assert!(r.max_rel_err <= GRAD_TOLERANCE, "{worst:?}");
    }

    #[test]
    fn vision_branch_silent_on_text_and_latent_connected() {
        let mut rng = RngStream::new(2, 0);
        let params = random_params(MotConfig::default(), &mut rng).unwrap();
        assert_eq!(branch_isolation(&params, &mut rng).unwrap().violations, 0);
        let c = params.config().clone();
        let layout = SegmentLayout::new(vec![Segment::Vision { len: 3, latent: true }], c.max_len).unwrap();
        let seq = random_sequence(&c, layout, &mut rng);
        let signals = SyntheticTeacher::new(c.patch_dim, 2).unwrap().signals(&seq.elements()).unwrap();
        let (_, g) = sequence_loss_and_grad(&params, &seq, &signals, TrainingPhase::PreTraining).unwrap();
        let l = params.layout().latent_embedding;
        assert!(g[l..l + c.d_model].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn probes_and_equivalence_pass() {
        let mut rng = RngStream::new(3, 0);
        let config = MotConfig::default();
        assert_eq!(init_equivalence(&config, &mut rng).unwrap().violations, 0);
        let params = random_params(config.clone(), &mut rng).unwrap();
        for _ in 0..10 {
            let seq = random_sequence(&config, random_layout(config.max_len, 4, 4, &mut rng), &mut rng);
            let r = perturbation_probe(&params, &seq, &mut rng).unwrap();
            assert_eq!(r.violations, 0);
            let signals = SyntheticTeacher::new(config.patch_dim, 3).unwrap().signals(&seq.elements()).unwrap();
            assert_eq!(loss_decomposition(&params, &seq, &signals).unwrap().violations, 0);
        }
    }

    #[test]
    fn zero_depth_heads_read_embeddings() {
        let mut rng = RngStream::new(4, 0);
        let config = MotConfig {
            n_layers: 0,
            ..MotConfig::default()
        };
        let params = random_params(config.clone(), &mut rng).unwrap();
        let seq = random_sequence(&config, random_layout(config.max_len, 4, 4, &mut rng), &mut rng);
        let x = embed(&params, &seq).unwrap();
        let out = mot_forward(&params, &x, &seq.layout).unwrap();
        assert_eq!(out.hidden, x);
    }
}
