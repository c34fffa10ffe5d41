use log::warn;
use serde::{Deserialize, Serialize};

use super::layout::{Segment, SegmentLayout};
use super::model::LatentOutput;
use super::params::CODEBOOK_SIZE;
use super::MotError;
use crate::numerics::{self, log_softmax};

/// Which supervision signals are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingPhase {
    /// Language, next-code and global losses together.
    #[default]
    PreTraining,
    /// Language loss only.
    MidTraining,
}

/// A scalar loss and its gradient w.r.t. the rows it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

fn mean_ce(rows: &[(&[f64], usize)], n_rows: usize, widths: impl Fn(usize) -> usize, at: &[usize]) -> Result<LossGrad, MotError> {
    let mut grad: Vec<Vec<f64>> = (0..n_rows).map(|i| vec![0.0; widths(i)]).collect();
    if rows.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / rows.len() as f64;
    let mut value = 0.0;
    for (&(logits, target), &row) in rows.iter().zip(at) {
        let lp = log_softmax(logits)?;
        value -= lp[target] * inv;
        for (g, l) in grad[row].iter_mut().zip(&lp) {
            *g += l.exp() * inv;
        }
        grad[row][target] -= inv;
    }
    Ok(LossGrad { value, grad })
}

/// Mean token cross-entropy over text positions with a target.
pub fn loss_llm_grad(text_logits: &[Vec<f64>], targets: &[Option<u32>]) -> Result<LossGrad, MotError> {
    if text_logits.len() != targets.len() {
        return Err(MotError::InvalidArgument(format!(
            "{} text logit rows for {} targets",
            text_logits.len(),
            targets.len()
        )));
    }
    let mut rows = Vec::new();
    let mut at = Vec::new();
    for (i, (z, t)) in text_logits.iter().zip(targets).enumerate() {
        if let Some(t) = *t {
            if t as usize >= z.len() {
                return Err(MotError::InvalidArgument(format!("text target {t} outside vocabulary {}", z.len())));
            }
            rows.push((z.as_slice(), t as usize));
            at.push(i);
        }
    }
    if rows.is_empty() {
        warn!("language loss has no supervised positions; returning 0");
    }
    mean_ce(&rows, text_logits.len(), |i| text_logits[i].len(), &at)
}

pub fn loss_llm(text_logits: &[Vec<f64>], targets: &[Option<u32>]) -> Result<f64, MotError> {
    Ok(loss_llm_grad(text_logits, targets)?.value)
}

/// Next-code cross-entropy: patch `i` predicts the code of patch `i + 1` of the same
/// segment; the last patch of each segment has no target.
pub fn loss_vision_grad(code_logits: &[Vec<f64>], codes: &[u32], layout: &SegmentLayout) -> Result<LossGrad, MotError> {
    let n = layout.patch_count();
    if code_logits.len() != n || codes.len() != n {
        return Err(MotError::InvalidArgument(format!(
            "layout has {n} patches, got {} logit rows and {} codes",
            code_logits.len(),
            codes.len()
        )));
    }
    if let Some(&bad) = codes.iter().find(|&&z| z as usize >= CODEBOOK_SIZE) {
        return Err(MotError::InvalidArgument(format!("code {bad} outside [0, {CODEBOOK_SIZE})")));
    }
    let mut rows = Vec::new();
    let mut at = Vec::new();
    let mut start = 0;
    for seg in layout.segments() {
        if let Segment::Vision { len, .. } = *seg {
            for i in start..start + len - 1 {
                let target = codes[i + 1] as usize;
                if target >= code_logits[i].len() {
                    return Err(MotError::InvalidArgument(format!(
                        "code {target} outside logit width {}",
                        code_logits[i].len()
                    )));
                }
                rows.push((code_logits[i].as_slice(), target));
                at.push(i);
            }
            start += len;
        }
    }
    if rows.is_empty() {
        warn!("vision loss has no supervised positions; returning 0");
    }
    mean_ce(&rows, n, |i| code_logits[i].len(), &at)
}

pub fn loss_vision(code_logits: &[Vec<f64>], codes: &[u32], layout: &SegmentLayout) -> Result<f64, MotError> {
    Ok(loss_vision_grad(code_logits, codes, layout)?.value)
}

/// `-cos(f, t)` and its gradient w.r.t. `f`.
pub fn negative_cosine_grad(f: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>), MotError> {
    let cos = numerics::cosine_similarity(f, t)?;
    let (nf, nt) = (numerics::norm(f), numerics::norm(t));
    let grad = f
        .iter()
        .zip(t)
        .map(|(fv, tv)| -(tv / (nf * nt) - cos * fv / (nf * nf)))
        .collect();
    Ok((-cos, grad))
}

/// Mean over latent tokens of `-cos(feature, f_teacher[segment])`.
pub fn loss_global_grad(latents: &[LatentOutput], f_teacher: &[Vec<f64>]) -> Result<LossGrad, MotError> {
    if latents.is_empty() {
        warn!("global loss has no latent tokens; returning 0");
        return Ok(LossGrad { value: 0.0, grad: Vec::new() });
    }
    let inv = 1.0 / latents.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(latents.len());
    for lat in latents {
        let t = f_teacher.get(lat.segment).ok_or_else(|| {
            MotError::InvalidArgument(format!("no teacher feature for vision segment {}", lat.segment))
        })?;
        if t.len() != lat.feature.len() {
            return Err(MotError::InvalidArgument(format!(
                "teacher feature width {} vs projection width {}",
                t.len(),
                lat.feature.len()
            )));
        }
        let (v, g) = negative_cosine_grad(&lat.feature, t)?;
        value += v * inv;
        grad.push(g.into_iter().map(|x| x * inv).collect());
    }
    Ok(LossGrad { value, grad })
}

pub fn loss_global(latents: &[LatentOutput], f_teacher: &[Vec<f64>]) -> Result<f64, MotError> {
    Ok(loss_global_grad(latents, f_teacher)?.value)
}

/// Unweighted sum in pre-training; language loss alone afterwards.
pub fn loss_total(llm: f64, vision: f64, global: f64, phase: TrainingPhase) -> f64 {
    match phase {
        TrainingPhase::PreTraining => llm + vision + global,
        TrainingPhase::MidTraining => llm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub llm: f64,
    pub vision: f64,
    pub global: f64,
    pub total: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(segment: usize, feature: Vec<f64>) -> LatentOutput {
        LatentOutput {
            segment,
            position: 0,
            hidden: Vec::new(),
            feature,
        }
    }

    #[test]
    fn llm_loss_cases() {
        let sharp = vec![vec![0.0, 60.0, 0.0], vec![60.0, 0.0, 0.0]];
        assert!(loss_llm(&sharp, &[Some(1), Some(0)]).unwrap() < 1e-20);
        let flat = vec![vec![0.0; 5]; 3];
        assert!((loss_llm(&flat, &[Some(0), None, Some(4)]).unwrap() - 5f64.ln()).abs() < 1e-12);
        // hand: rows [ln 1, ln 3] target 1 → -ln(3/4); [0,0] target 0 → ln 2
        let hand = vec![vec![0.0, 3f64.ln()], vec![0.0, 0.0]];
        let expect = (-(0.75f64).ln() + 2f64.ln()) / 2.0;
        assert!((loss_llm(&hand, &[Some(1), Some(0)]).unwrap() - expect).abs() < 1e-12);
        assert_eq!(loss_llm(&flat, &[None, None, None]).unwrap(), 0.0);
        assert!(loss_llm(&flat, &[Some(9), None, None]).is_err());
    }

    #[test]
    fn vision_loss_shifts_targets() {
        let layout = SegmentLayout::new(vec![Segment::Vision { len: 3, latent: true }], 8).unwrap();
        let mut logits = vec![vec![0.0; CODEBOOK_SIZE]; 3];
        // position 0 predicts code of patch 1 (= 7), position 1 predicts patch 2 (= 9)
        logits[0][7] = 2.0;
        logits[1][9] = -1.0;
        logits[2][3] = 50.0;
        let codes = [3, 7, 9];
        let ce = |z: &[f64], k: usize| -log_softmax(z).unwrap()[k];
        let expect = (ce(&logits[0], 7) + ce(&logits[1], 9)) / 2.0;
        assert!((loss_vision(&logits, &codes, &layout).unwrap() - expect).abs() < 1e-12);
        let flat = vec![vec![0.0; CODEBOOK_SIZE]; 3];
        assert!((loss_vision(&flat, &codes, &layout).unwrap() - (CODEBOOK_SIZE as f64).ln()).abs() < 1e-12);
        assert!(loss_vision(&flat, &[0, 2048, 1], &layout).is_err());
    }

    #[test]
    fn global_loss_cases() {
        let t = vec![vec![0.6, 0.8]];
        assert!((loss_global(&[lat(0, vec![3.0, 4.0])], &t).unwrap() + 1.0).abs() < 1e-15);
        assert!(loss_global(&[lat(0, vec![-0.8, 0.6])], &t).unwrap().abs() < 1e-15);
        let v = loss_global(&[lat(0, vec![1.0, 0.0])], &t).unwrap();
        assert!((v + 0.6).abs() < 1e-15);
        assert!(matches!(loss_global(&[lat(0, vec![0.0, 0.0])], &t), Err(MotError::Numerics(_))));
    }

    #[test]
    fn total_and_phase() {
        assert_eq!(loss_total(1.0, 2.0, -0.5, TrainingPhase::PreTraining), 2.5);
        assert_eq!(loss_total(1.0, 2.0, -0.5, TrainingPhase::MidTraining), 1.0);
    }
}
