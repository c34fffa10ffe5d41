use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::layout::{Branch, MaskMode};
use super::MotError;
use crate::numerics::RngStream;

/// Vision quantizer codebook size.
pub const CODEBOOK_SIZE: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub text_vocab: usize,
    /// Patch vector width; the teacher's global feature has the same width.
    pub patch_dim: usize,
    /// Hidden width of the code head MLP.
    pub code_hidden: usize,
    /// 1 = linear code head, 2 = one hidden layer.
    pub code_head_depth: usize,
    pub max_len: usize,
    pub mask_mode: MaskMode,
    pub ln_eps: f64,
    /// Recorded for completeness. There is no vision encoder to update here.
    pub vit_grad_interval: usize,
}

impl Default for MotConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            text_vocab: 16,
            patch_dim: 6,
            code_hidden: 8,
            code_head_depth: 2,
            max_len: 32,
            mask_mode: MaskMode::SegmentBidirectional,
            ln_eps: 1e-5,
            vit_grad_interval: 5,
        }
    }
}

impl MotConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), MotError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("text_vocab", self.text_vocab),
            ("patch_dim", self.patch_dim),
            ("code_hidden", self.code_hidden),
            ("max_len", self.max_len),
            ("vit_grad_interval", self.vit_grad_interval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MotError::InvalidArgument(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(MotError::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !matches!(self.code_head_depth, 1 | 2) {
            return Err(MotError::InvalidArgument(format!(
                "code_head_depth must be 1 or 2, got {}",
                self.code_head_depth
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(MotError::InvalidArgument("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Offsets of one modality branch: attention projections and FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchBlock {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub wo: usize,
    pub bo: usize,
    pub text: BranchBlock,
    pub vision: BranchBlock,
}

impl LayerBlock {
    pub fn branch(&self, b: Branch) -> &BranchBlock {
        match b {
            Branch::Text => &self.text,
            Branch::Vision => &self.vision,
        }
    }
}

/// Where every tensor lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub patch_projection: usize,
    pub latent_embedding: usize,
    pub layers: Vec<LayerBlock>,
    pub lm_w: usize,
    pub lm_b: usize,
    /// Present only for the two-layer code head.
    pub code_w1: Option<usize>,
    pub code_b1: Option<usize>,
    pub code_w2: usize,
    pub code_b2: usize,
    pub global_w: usize,
    pub global_b: usize,
    pub total: usize,
    groups: Vec<(String, Range<usize>)>,
}

struct Allocator {
    next: usize,
    groups: Vec<(String, Range<usize>)>,
}

impl Allocator {
    fn take(&mut self, name: String, n: usize) -> usize {
        let start = self.next;
        self.next += n;
        self.groups.push((name, start..self.next));
        start
    }
}

impl ParamLayout {
    pub fn new(c: &MotConfig) -> Self {
        let d = c.d_model;
        let mut a = Allocator { next: 0, groups: Vec::new() };
        let token_embedding = a.take("token_embedding".into(), c.text_vocab * d);
        let position_embedding = a.take("position_embedding".into(), c.max_len * d);
        let patch_projection = a.take("patch_projection".into(), d * c.patch_dim);
        let latent_embedding = a.take("latent_embedding".into(), d);
        let layers = (0..c.n_layers)
            .map(|l| {
                let mut branch = |tag: &str| BranchBlock {
                    wq: a.take(format!("layer{l}.{tag}.wq"), d * d),
                    wk: a.take(format!("layer{l}.{tag}.wk"), d * d),
                    wv: a.take(format!("layer{l}.{tag}.wv"), d * d),
                    w1: a.take(format!("layer{l}.{tag}.ffn_w1"), c.d_ff * d),
                    b1: a.take(format!("layer{l}.{tag}.ffn_b1"), c.d_ff),
                    w2: a.take(format!("layer{l}.{tag}.ffn_w2"), d * c.d_ff),
                    b2: a.take(format!("layer{l}.{tag}.ffn_b2"), d),
                };
                let text = branch("text");
                let vision = branch("vision");
                LayerBlock {
                    text,
                    vision,
                    ln1_g: a.take(format!("layer{l}.ln1_gain"), d),
                    ln1_b: a.take(format!("layer{l}.ln1_bias"), d),
                    ln2_g: a.take(format!("layer{l}.ln2_gain"), d),
                    ln2_b: a.take(format!("layer{l}.ln2_bias"), d),
                    wo: a.take(format!("layer{l}.wo"), d * d),
                    bo: a.take(format!("layer{l}.bo"), d),
                }
            })
            .collect();
        let lm_w = a.take("lm_head_w".into(), c.text_vocab * d);
        let lm_b = a.take("lm_head_b".into(), c.text_vocab);
        let (code_w1, code_b1, code_w2) = if c.code_head_depth == 2 {
            let w1 = a.take("code_head_w1".into(), c.code_hidden * d);
            let b1 = a.take("code_head_b1".into(), c.code_hidden);
            (Some(w1), Some(b1), a.take("code_head_w2".into(), CODEBOOK_SIZE * c.code_hidden))
        } else {
            (None, None, a.take("code_head_w".into(), CODEBOOK_SIZE * d))
        };
        let code_b2 = a.take("code_head_b".into(), CODEBOOK_SIZE);
        let global_w = a.take("global_head_w".into(), c.patch_dim * d);
        let global_b = a.take("global_head_b".into(), c.patch_dim);
        Self {
            token_embedding,
            position_embedding,
            patch_projection,
            latent_embedding,
            layers,
            lm_w,
            lm_b,
            code_w1,
            code_b1,
            code_w2,
            code_b2,
            global_w,
            global_b,
            total: a.next,
            groups: a.groups,
        }
    }

    /// Named tensors in storage order.
    pub fn groups(&self) -> &[(String, Range<usize>)] {
        &self.groups
    }

    /// Ranges belonging to one modality branch, across all layers.
    pub fn branch_ranges(&self, c: &MotConfig, b: Branch) -> Vec<Range<usize>> {
        let d = c.d_model;
        self.layers
            .iter()
            .flat_map(|l| {
                let br = l.branch(b);
                [
                    br.wq..br.wq + d * d,
                    br.wk..br.wk + d * d,
                    br.wv..br.wv + d * d,
                    br.w1..br.w1 + c.d_ff * d,
                    br.b1..br.b1 + c.d_ff,
                    br.w2..br.w2 + d * c.d_ff,
                    br.b2..br.b2 + d,
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotParams {
    config: MotConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl MotParams {
    /// Random text branch, vision branch copied from it.
    pub fn init(config: MotConfig, rng: &mut RngStream) -> Result<Self, MotError> {
        let mut p = Self::zeros(config)?;
        let c = p.config.clone();
        let d = c.d_model;
        let dense = |rng: &mut RngStream, fan_in: usize| rng.normal() / (fan_in as f64).sqrt();
        let fill = |values: &mut [f64], start: usize, n: usize, scale: f64, fan_in: usize, rng: &mut RngStream| {
            for v in &mut values[start..start + n] {
                *v = scale * dense(rng, fan_in);
            }
        };
        let l = p.layout.clone();
        fill(&mut p.values, l.token_embedding, c.text_vocab * d, 1.0, 1, rng);
        fill(&mut p.values, l.position_embedding, c.max_len * d, 0.1, 1, rng);
        fill(&mut p.values, l.patch_projection, d * c.patch_dim, 1.0, c.patch_dim, rng);
        fill(&mut p.values, l.latent_embedding, d, 1.0, 1, rng);
        for layer in &l.layers {
            let t = &layer.text;
            for w in [t.wq, t.wk, t.wv] {
                fill(&mut p.values, w, d * d, 1.0, d, rng);
            }
            fill(&mut p.values, t.w1, c.d_ff * d, 1.0, d, rng);
            fill(&mut p.values, t.w2, d * c.d_ff, 1.0, c.d_ff, rng);
            fill(&mut p.values, layer.wo, d * d, 1.0, d, rng);
            p.values[layer.ln1_g..layer.ln1_g + d].fill(1.0);
            p.values[layer.ln2_g..layer.ln2_g + d].fill(1.0);
        }
        fill(&mut p.values, l.lm_w, c.text_vocab * d, 1.0, d, rng);
        match l.code_w1 {
            Some(w1) => {
                fill(&mut p.values, w1, c.code_hidden * d, 1.0, d, rng);
                fill(&mut p.values, l.code_w2, CODEBOOK_SIZE * c.code_hidden, 1.0, c.code_hidden, rng);
            }
            None => fill(&mut p.values, l.code_w2, CODEBOOK_SIZE * d, 1.0, d, rng),
        }
        fill(&mut p.values, l.global_w, c.patch_dim * d, 1.0, d, rng);
        p.copy_text_to_vision();
        Ok(p)
    }

    pub fn zeros(config: MotConfig) -> Result<Self, MotError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let values = vec![0.0; layout.total];
        Ok(Self { config, layout, values })
    }

    pub fn from_values(config: MotConfig, values: Vec<f64>) -> Result<Self, MotError> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(MotError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    /// Overwrite every vision-branch tensor with its text-branch counterpart.
    pub fn copy_text_to_vision(&mut self) {
        let text = self.layout.branch_ranges(&self.config, Branch::Text);
        let vision = self.layout.branch_ranges(&self.config, Branch::Vision);
        for (t, v) in text.into_iter().zip(vision) {
            self.values.copy_within(t, v.start);
        }
    }

    /// Jitter every entry, so that tests do not rely on symmetric initial values.
    pub fn perturb(&mut self, scale: f64, rng: &mut RngStream) {
        for v in &mut self.values {
            *v += scale * rng.normal();
        }
    }

    pub fn config(&self) -> &MotConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_tile_the_vector() {
        for depth in [1, 2] {
            let c = MotConfig {
                code_head_depth: depth,
                ..MotConfig::default()
            };
            let l = ParamLayout::new(&c);
            let mut next = 0;
            for (_, r) in l.groups() {
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, l.total);
        }
    }

    #[test]
    fn init_duplicates_branches() {
        let p = MotParams::init(MotConfig::default(), &mut RngStream::new(1, 0)).unwrap();
        let c = p.config();
        let t = p.layout().branch_ranges(c, Branch::Text);
        let v = p.layout().branch_ranges(c, Branch::Vision);
        for (t, v) in t.into_iter().zip(v) {
            assert_eq!(p.values()[t], p.values()[v]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(MotConfig {
            n_heads: 3,
            ..MotConfig::default()
        }
        .validate()
        .is_err());
        assert!(MotConfig {
            code_head_depth: 3,
            ..MotConfig::default()
        }
        .validate()
        .is_err());
    }
}
