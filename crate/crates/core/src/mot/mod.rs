//! Micro Mixture-of-Transformers: text and vision tokens share embeddings, attention
//! output projection and layer norms, but each modality has its own Q/K/V projections
//! and FFN. Vision segments attend bidirectionally within themselves, text is causal,
//! and each visual element may end in a learnable latent token.
//!
//! Pre-training supervises three heads: language modeling on text, next-code
//! prediction on patches and cosine alignment of latent tokens with a teacher feature.

pub mod check;
pub mod layout;
pub mod loss;
pub mod model;
pub mod params;
pub mod teacher;

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, RngStream};
use crate::optim::{Optimizer, OptimizerKind};

pub use layout::{build_mask, route_modality, Branch, MaskMode, Segment, SegmentLayout, Slot};
pub use loss::{loss_global, loss_llm, loss_total, loss_vision, LossBreakdown, TrainingPhase};
pub use model::{embed, forward_sequence, mot_forward, HeadGrads, LatentOutput, MotOutput};
pub use params::{MotConfig, MotParams, CODEBOOK_SIZE};
pub use teacher::{SyntheticTeacher, TeacherSignals};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// One micro-batch record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotSequence {
    #[serde(rename = "segments")]
    pub layout: SegmentLayout,
    /// Text token ids in sequence order.
    pub token_ids: Vec<u32>,
    /// Patch vectors in sequence order, latent positions excluded.
    pub patch_vectors: Vec<Vec<f64>>,
    /// Language-model target per text token; `None` leaves it unsupervised.
    pub text_targets: Vec<Option<u32>>,
}

impl MotSequence {
    pub fn validate(&self, config: &MotConfig) -> Result<(), MotError> {
        self.layout.validate(config.max_len)?;
        let texts = self.layout.text_count();
        if self.token_ids.len() != texts || self.text_targets.len() != texts {
            return Err(MotError::InvalidArgument(format!(
                "layout has {texts} text positions, got {} tokens and {} targets",
                self.token_ids.len(),
                self.text_targets.len()
            )));
        }
        let vocab = config.text_vocab as u32;
        if let Some(t) = self.token_ids.iter().chain(self.text_targets.iter().flatten()).find(|&&t| t >= vocab) {
            return Err(MotError::InvalidArgument(format!("token {t} outside vocabulary {vocab}")));
        }
        if self.patch_vectors.len() != self.layout.patch_count() {
            return Err(MotError::InvalidArgument(format!(
                "layout has {} patches, got {} vectors",
                self.layout.patch_count(),
                self.patch_vectors.len()
            )));
        }
        if self
            .patch_vectors
            .iter()
            .any(|p| p.len() != config.patch_dim || p.iter().any(|v| !v.is_finite()))
        {
            return Err(MotError::InvalidArgument(format!(
                "every patch needs {} finite entries",
                config.patch_dim
            )));
        }
        Ok(())
    }

    /// Patch vectors grouped by visual element.
    pub fn elements(&self) -> Vec<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let mut next = 0;
        for s in self.layout.segments() {
            if let Segment::Vision { len, .. } = *s {
                out.push(self.patch_vectors[next..next + len].to_vec());
                next += len;
            }
        }
        out
    }
}

/// Next-token targets inside each text run; the last token of a run is unsupervised.
pub fn next_token_targets(layout: &SegmentLayout, token_ids: &[u32]) -> Vec<Option<u32>> {
    let mut out = Vec::with_capacity(token_ids.len());
    let mut next = 0;
    for s in layout.segments() {
        if let Segment::Text { len } = *s {
            for i in next..next + len {
                out.push((i + 1 < next + len).then(|| token_ids[i + 1]));
            }
            next += len;
        }
    }
    out
}

/// Random layout within the context cap, segment lengths 1..=`max_segment`.
pub fn random_layout(max_len: usize, max_segments: usize, max_segment: usize, rng: &mut RngStream) -> SegmentLayout {
    let target = 1 + rng.below(max_segments.max(1));
    let mut segments = Vec::new();
    let mut used = 0;
    while segments.len() < target {
        let len = 1 + rng.below(max_segment.max(1));
        let seg = if rng.below(2) == 0 {
            Segment::Text { len }
        } else {
            Segment::Vision {
                len,
                latent: rng.below(2) == 0,
            }
        };
        if used + seg.span() > max_len {
            break;
        }
        used += seg.span();
        segments.push(seg);
    }
    if segments.is_empty() {
        segments.push(Segment::Text { len: 1 });
    }
    SegmentLayout::new(segments, max_len).expect("generated layout respects the cap")
}

/// Random record over `layout`, Gaussian patches and next-token targets.
pub fn random_sequence(config: &MotConfig, layout: SegmentLayout, rng: &mut RngStream) -> MotSequence {
    let token_ids: Vec<u32> = (0..layout.text_count()).map(|_| rng.below(config.text_vocab) as u32).collect();
    let patch_vectors = (0..layout.patch_count())
        .map(|_| (0..config.patch_dim).map(|_| rng.normal()).collect())
        .collect();
    let text_targets = next_token_targets(&layout, &token_ids);
    MotSequence {
        layout,
        token_ids,
        patch_vectors,
        text_targets,
    }
}

fn losses(
    out: &MotOutput,
    seq: &MotSequence,
    signals: &TeacherSignals,
    phase: TrainingPhase,
) -> Result<(LossBreakdown, HeadGrads), MotError> {
    let llm = loss::loss_llm_grad(&out.text_logits, &seq.text_targets)?;
    let vision = loss::loss_vision_grad(&out.code_logits, &signals.codes, &seq.layout)?;
    let global = loss::loss_global_grad(&out.latents, &signals.f_teacher)?;
    let breakdown = LossBreakdown {
        llm: llm.value,
        vision: vision.value,
        global: global.value,
        total: loss_total(llm.value, vision.value, global.value, phase),
    };
    let heads = match phase {
        TrainingPhase::PreTraining => HeadGrads {
            text_logits: llm.grad,
            code_logits: vision.grad,
            latent_features: global.grad,
        },
        TrainingPhase::MidTraining => HeadGrads {
            text_logits: llm.grad,
            ..HeadGrads::default()
        },
    };
    Ok((breakdown, heads))
}

/// All three losses; `total` follows the phase.
pub fn sequence_loss(
    params: &MotParams,
    seq: &MotSequence,
    signals: &TeacherSignals,
    phase: TrainingPhase,
) -> Result<LossBreakdown, MotError> {
    let out = forward_sequence(params, seq)?;
    Ok(losses(&out, seq, signals, phase)?.0)
}

/// Losses and the gradient of `total` w.r.t. every parameter.
pub fn sequence_loss_and_grad(
    params: &MotParams,
    seq: &MotSequence,
    signals: &TeacherSignals,
    phase: TrainingPhase,
) -> Result<(LossBreakdown, Vec<f64>), MotError> {
    let out = forward_sequence(params, seq)?;
    let (breakdown, heads) = losses(&out, seq, signals, phase)?;
    Ok((breakdown, model::backward_sequence(params, seq, &out, &heads)))
}

/// Mean losses and gradient over a batch, sequences in parallel.
pub fn batch_loss_and_grad(
    params: &MotParams,
    batch: &[(MotSequence, TeacherSignals)],
    phase: TrainingPhase,
) -> Result<(LossBreakdown, Vec<f64>), MotError> {
    if batch.is_empty() {
        return Err(MotError::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(LossBreakdown, Vec<f64>)> = batch
        .par_iter()
        .map(|(s, t)| sequence_loss_and_grad(params, s, t, phase))
        .collect::<Result<_, _>>()?;
    let k = parts.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut mean = LossBreakdown {
        llm: 0.0,
        vision: 0.0,
        global: 0.0,
        total: 0.0,
    };
    for (b, g) in parts {
        mean.llm += b.llm / k;
        mean.vision += b.vision / k;
        mean.global += b.global / k;
        mean.total += b.total / k;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v / k;
        }
    }
    Ok((mean, grad))
}

/// Full-batch Adam; returns the losses before each step.
pub fn fit(
    params: &mut MotParams,
    batch: &[(MotSequence, TeacherSignals)],
    phase: TrainingPhase,
    steps: usize,
    lr: f64,
) -> Result<Vec<LossBreakdown>, MotError> {
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, params.len());
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (b, g) = batch_loss_and_grad(params, batch, phase)?;
        opt.apply(params.values_mut(), &g);
        history.push(b);
    }
    Ok(history)
}

pub fn read_sequences(reader: impl BufRead) -> Result<Vec<MotSequence>, MotError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| MotError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MotError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_sequences(mut writer: impl Write, seqs: &[MotSequence]) -> Result<(), MotError> {
    for s in seqs {
        let line = serde_json::to_string(s).map_err(|e| MotError::Io(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| MotError::Io(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64) -> (MotParams, MotSequence, TeacherSignals) {
        let config = MotConfig::default();
        let mut rng = RngStream::new(seed, 0);
        let mut params = MotParams::init(config.clone(), &mut rng).unwrap();
        params.perturb(0.05, &mut rng);
        let layout = SegmentLayout::new(
            vec![Segment::Text { len: 3 }, Segment::Vision { len: 4, latent: true }, Segment::Text { len: 2 }],
            config.max_len,
        )
        .unwrap();
        let seq = random_sequence(&config, layout, &mut rng);
        let signals = SyntheticTeacher::new(config.patch_dim, seed).unwrap().signals(&seq.elements()).unwrap();
        (params, seq, signals)
    }

    #[test]
    fn targets_stay_inside_text_runs() {
        let layout = SegmentLayout::new(
            vec![Segment::Text { len: 2 }, Segment::Vision { len: 1, latent: false }, Segment::Text { len: 2 }],
            16,
        )
        .unwrap();
        assert_eq!(next_token_targets(&layout, &[1, 2, 3, 4]), vec![Some(2), None, Some(4), None]);
    }

    #[test]
    fn total_is_sum_and_phase_switch() {
        let (params, seq, signals) = setup(1);
        let (pre, g_pre) = sequence_loss_and_grad(&params, &seq, &signals, TrainingPhase::PreTraining).unwrap();
        assert_eq!(pre.total, pre.llm + pre.vision + pre.global);
        let (mid, g_mid) = sequence_loss_and_grad(&params, &seq, &signals, TrainingPhase::MidTraining).unwrap();
        assert_eq!(mid.total, mid.llm);
        let l = params.layout();
        assert!(g_pre[l.global_w..l.global_w + 4].iter().any(|&v| v != 0.0));
        let heads_start = l.code_w1.unwrap_or(l.code_w2);
        assert!(g_mid[heads_start..].iter().all(|&v| v == 0.0));
        assert!(g_mid[l.latent_embedding..l.latent_embedding + 8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn records_round_trip() {
        let (_, seq, _) = setup(2);
        let mut buf = Vec::new();
        write_sequences(&mut buf, &[seq.clone(), seq.clone()]).unwrap();
        let back = read_sequences(buf.as_slice()).unwrap();
        assert_eq!(back, vec![seq.clone(), seq]);
        let bad = read_sequences("{\"segments\": []}\n".as_bytes());
        assert!(matches!(bad, Err(MotError::Format { line: 1, .. })));
    }

    #[test]
    fn fitting_reduces_loss() {
        let (mut params, seq, signals) = setup(3);
        let h = fit(&mut params, &[(seq, signals)], TrainingPhase::PreTraining, 60, 1e-2).unwrap();
        assert!(h.last().unwrap().total < h[0].total - 0.5, "{:?} -> {:?}", h[0], h.last());
    }
}
