//! Forward pass and reverse-mode gradient of the modality-routed transformer.
//!
//! Pre-norm blocks: `x += Wo·attn(LN1 x)`, then `x += FFN_b(LN2 x)`, where the
//! Q/K/V projections and the FFN come from each token's own branch. The heads read the
//! residual stream directly.

use super::layout::{build_mask, route_modality, Branch, SegmentLayout, Slot};
use super::params::{MotParams, CODEBOOK_SIZE};
use super::{MotError, MotSequence};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let th = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

/// `W x` for a row-major `rows × cols` block at `w`.
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `out += Wᵀ dy`.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], out: &mut [f64]) {
    for (r, &g) in dy.iter().enumerate().take(rows) {
        if g != 0.0 {
            for (o, wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *o += g * wv;
            }
        }
    }
}

/// `dW += dy ⊗ x`.
fn outer_acc(dw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            for (d, xv) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
}

fn add_bias(y: &mut [f64], b: &[f64]) {
    for (v, bv) in y.iter_mut().zip(b) {
        *v += bv;
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    rstd: f64,
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vec<f64>, NormCache) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mu) * rstd).collect();
    let y = xhat.iter().zip(gain).zip(bias).map(|((h, g), b)| g * h + b).collect();
    (y, NormCache { xhat, rstd })
}

/// Accumulates gain/bias gradients and returns the input gradient.
fn layer_norm_backward(dy: &[f64], cache: &NormCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64]) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let mean = dxhat.iter().sum::<f64>() / n;
    let mean_x = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(g, h)| cache.rstd * (g - mean - h * mean_x))
        .collect()
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: Vec<NormCache>,
    a: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention weights per position and head, aligned with `visible[position]`.
    alpha: Vec<Vec<Vec<f64>>>,
    o: Vec<Vec<f64>>,
    ln2: Vec<NormCache>,
    c: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentOutput {
    pub segment: usize,
    pub position: usize,
    pub hidden: Vec<f64>,
    /// Global head projection of `hidden`.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MotOutput {
    /// Residual stream after the last block, one row per position.
    pub hidden: Vec<Vec<f64>>,
    /// LM head logits, one row per text token.
    pub text_logits: Vec<Vec<f64>>,
    /// Code head logits, one row per patch.
    pub code_logits: Vec<Vec<f64>>,
    pub latents: Vec<LatentOutput>,
    cache: ForwardCache,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    slots: Vec<Slot>,
    routes: Vec<Branch>,
    visible: Vec<Vec<usize>>,
    layers: Vec<LayerCache>,
    /// Code head pre-activations per patch (two-layer head only).
    code_pre: Vec<Vec<f64>>,
}

/// Gradients flowing into the heads, in the same shapes as the outputs.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads {
    pub text_logits: Vec<Vec<f64>>,
    pub code_logits: Vec<Vec<f64>>,
    /// One row per entry of `MotOutput::latents`.
    pub latent_features: Vec<Vec<f64>>,
}

/// Input embeddings: token, patch projection or latent vector, plus position.
pub fn embed(params: &MotParams, seq: &MotSequence) -> Result<Vec<Vec<f64>>, MotError> {
    seq.validate(params.config())?;
    let c = params.config();
    let l = params.layout();
    let w = params.values();
    let d = c.d_model;
    Ok(seq
        .layout
        .slots()
        .iter()
        .enumerate()
        .map(|(p, slot)| {
            let mut x = match *slot {
                Slot::Text { index } => {
                    let t = seq.token_ids[index] as usize;
                    w[l.token_embedding + t * d..l.token_embedding + (t + 1) * d].to_vec()
                }
                Slot::Patch { index, .. } => matvec(&w[l.patch_projection..], d, c.patch_dim, &seq.patch_vectors[index]),
                Slot::Latent { .. } => w[l.latent_embedding..l.latent_embedding + d].to_vec(),
            };
            add_bias(&mut x, &w[l.position_embedding + p * d..l.position_embedding + (p + 1) * d]);
            x
        })
        .collect())
}

fn embed_backward(params: &MotParams, seq: &MotSequence, dx: &[Vec<f64>], grad: &mut [f64]) {
    let c = params.config();
    let l = params.layout();
    let d = c.d_model;
    for (p, (slot, g)) in seq.layout.slots().iter().zip(dx).enumerate() {
        add_bias(&mut grad[l.position_embedding + p * d..l.position_embedding + (p + 1) * d], g);
        match *slot {
            Slot::Text { index } => {
                let t = seq.token_ids[index] as usize;
                add_bias(&mut grad[l.token_embedding + t * d..l.token_embedding + (t + 1) * d], g);
            }
            Slot::Patch { index, .. } => outer_acc(
                &mut grad[l.patch_projection..l.patch_projection + d * c.patch_dim],
                c.patch_dim,
                g,
                &seq.patch_vectors[index],
            ),
            Slot::Latent { .. } => add_bias(&mut grad[l.latent_embedding..l.latent_embedding + d], g),
        }
    }
}

/// Runs every block and head on precomputed input embeddings.
pub fn mot_forward(params: &MotParams, inputs: &[Vec<f64>], layout: &SegmentLayout) -> Result<MotOutput, MotError> {
    let c = params.config();
    layout.validate(c.max_len)?;
    let d = c.d_model;
    if inputs.len() != layout.len() || inputs.iter().any(|x| x.len() != d) {
        return Err(MotError::InvalidArgument(format!(
            "expected {} input rows of width {d}, got {} rows",
            layout.len(),
            inputs.len()
        )));
    }
    let w = params.values();
    let pl = params.layout();
    let routes = route_modality(layout);
    let mask = build_mask(layout, c.mask_mode);
    let visible: Vec<Vec<usize>> = mask
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k).collect())
        .collect();
    let n = inputs.len();
    let (nh, dh) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x: Vec<Vec<f64>> = inputs.to_vec();
    let mut layers = Vec::with_capacity(c.n_layers);
    for lb in &pl.layers {
        let mut ln1 = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n);
        let (mut q, mut k, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (xt, &b) in x.iter().zip(&routes) {
            let (at, cache) = layer_norm(xt, &w[lb.ln1_g..lb.ln1_g + d], &w[lb.ln1_b..lb.ln1_b + d], c.ln_eps);
            let br = lb.branch(b);
            q.push(matvec(&w[br.wq..], d, d, &at));
            k.push(matvec(&w[br.wk..], d, d, &at));
            v.push(matvec(&w[br.wv..], d, d, &at));
            ln1.push(cache);
            a.push(at);
        }
        let mut alpha = Vec::with_capacity(n);
        let mut o = Vec::with_capacity(n);
        for t in 0..n {
            let mut ot = vec![0.0; d];
            let mut heads = Vec::with_capacity(nh);
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = visible[t]
                    .iter()
                    .map(|&u| q[t][hs.clone()].iter().zip(&k[u][hs.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let wts: Vec<f64> = e.iter().map(|v| v / z).collect();
                for (&u, &al) in visible[t].iter().zip(&wts) {
                    for i in hs.clone() {
                        ot[i] += al * v[u][i];
                    }
                }
                heads.push(wts);
            }
            alpha.push(heads);
            o.push(ot);
        }
        let mut ln2 = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        let mut gs = Vec::with_capacity(n);
        for t in 0..n {
            let mut y = matvec(&w[lb.wo..], d, d, &o[t]);
            add_bias(&mut y, &w[lb.bo..lb.bo + d]);
            add_bias(&mut x[t], &y);
            let (ct, cache) = layer_norm(&x[t], &w[lb.ln2_g..lb.ln2_g + d], &w[lb.ln2_b..lb.ln2_b + d], c.ln_eps);
            let br = lb.branch(routes[t]);
            let mut zt = matvec(&w[br.w1..], c.d_ff, d, &ct);
            add_bias(&mut zt, &w[br.b1..br.b1 + c.d_ff]);
            let gt: Vec<f64> = zt.iter().map(|&z| gelu(z)).collect();
            let mut f = matvec(&w[br.w2..], d, c.d_ff, &gt);
            add_bias(&mut f, &w[br.b2..br.b2 + d]);
            add_bias(&mut x[t], &f);
            ln2.push(cache);
            cs.push(ct);
            zs.push(zt);
            gs.push(gt);
        }
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            alpha,
            o,
            ln2,
            c: cs,
            z: zs,
            g: gs,
        });
    }

    let slots = layout.slots();
    let mut text_logits = Vec::new();
    let mut code_logits = Vec::new();
    let mut code_pre = Vec::new();
    let mut latents = Vec::new();
    for (p, slot) in slots.iter().enumerate() {
        let h = &x[p];
        match *slot {
            Slot::Text { .. } => {
                let mut z = matvec(&w[pl.lm_w..], c.text_vocab, d, h);
                add_bias(&mut z, &w[pl.lm_b..pl.lm_b + c.text_vocab]);
                text_logits.push(z);
            }
            Slot::Patch { .. } => {
                let mut z = match (pl.code_w1, pl.code_b1) {
                    (Some(w1), Some(b1)) => {
                        let mut u = matvec(&w[w1..], c.code_hidden, d, h);
                        add_bias(&mut u, &w[b1..b1 + c.code_hidden]);
                        let r: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
                        code_pre.push(u);
                        matvec(&w[pl.code_w2..], CODEBOOK_SIZE, c.code_hidden, &r)
                    }
                    _ => matvec(&w[pl.code_w2..], CODEBOOK_SIZE, d, h),
                };
                add_bias(&mut z, &w[pl.code_b2..pl.code_b2 + CODEBOOK_SIZE]);
                code_logits.push(z);
            }
            Slot::Latent { segment } => {
                let mut f = matvec(&w[pl.global_w..], c.patch_dim, d, h);
                add_bias(&mut f, &w[pl.global_b..pl.global_b + c.patch_dim]);
                latents.push(LatentOutput {
                    segment,
                    position: p,
                    hidden: h.clone(),
                    feature: f,
                });
            }
        }
    }
    Ok(MotOutput {
        hidden: x,
        text_logits,
        code_logits,
        latents,
        cache: ForwardCache {
            slots,
            routes,
            visible,
            layers,
            code_pre,
        },
    })
}

/// Parameter gradient and input-embedding gradient for the given head gradients.
/// Empty head-gradient vectors are treated as zero.
pub fn mot_backward(params: &MotParams, out: &MotOutput, heads: &HeadGrads) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c = params.config();
    let pl = params.layout();
    let w = params.values();
    let d = c.d_model;
    let cache = &out.cache;
    let n = out.hidden.len();
    let mut grad = vec![0.0; params.len()];
    let mut dx = vec![vec![0.0; d]; n];

    let (mut ti, mut pi, mut li) = (0, 0, 0);
    for (p, slot) in cache.slots.iter().enumerate() {
        let h = &out.hidden[p];
        match slot {
            Slot::Text { .. } => {
                if let Some(g) = heads.text_logits.get(ti) {
                    outer_acc(&mut grad[pl.lm_w..pl.lm_w + c.text_vocab * d], d, g, h);
                    add_bias(&mut grad[pl.lm_b..pl.lm_b + c.text_vocab], g);
                    matvec_t_acc(&w[pl.lm_w..], c.text_vocab, d, g, &mut dx[p]);
                }
                ti += 1;
            }
            Slot::Patch { .. } => {
                if let Some(g) = heads.code_logits.get(pi) {
                    add_bias(&mut grad[pl.code_b2..pl.code_b2 + CODEBOOK_SIZE], g);
                    match (pl.code_w1, pl.code_b1) {
                        (Some(w1), Some(b1)) => {
                            let u = &cache.code_pre[pi];
                            let r: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
                            outer_acc(&mut grad[pl.code_w2..pl.code_w2 + CODEBOOK_SIZE * c.code_hidden], c.code_hidden, g, &r);
                            let mut dr = vec![0.0; c.code_hidden];
                            matvec_t_acc(&w[pl.code_w2..], CODEBOOK_SIZE, c.code_hidden, g, &mut dr);
                            let du: Vec<f64> = dr.iter().zip(u).map(|(a, &z)| a * gelu_grad(z)).collect();
                            outer_acc(&mut grad[w1..w1 + c.code_hidden * d], d, &du, h);
                            add_bias(&mut grad[b1..b1 + c.code_hidden], &du);
                            matvec_t_acc(&w[w1..], c.code_hidden, d, &du, &mut dx[p]);
                        }
                        _ => {
                            outer_acc(&mut grad[pl.code_w2..pl.code_w2 + CODEBOOK_SIZE * d], d, g, h);
                            matvec_t_acc(&w[pl.code_w2..], CODEBOOK_SIZE, d, g, &mut dx[p]);
                        }
                    }
                }
                pi += 1;
            }
            Slot::Latent { .. } => {
                if let Some(g) = heads.latent_features.get(li) {
                    outer_acc(&mut grad[pl.global_w..pl.global_w + c.patch_dim * d], d, g, h);
                    add_bias(&mut grad[pl.global_b..pl.global_b + c.patch_dim], g);
                    matvec_t_acc(&w[pl.global_w..], c.patch_dim, d, g, &mut dx[p]);
                }
                li += 1;
            }
        }
    }

    let (nh, dh) = (c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    for (lb, lc) in pl.layers.iter().zip(&cache.layers).rev() {
        // FFN sublayer; dx carries the gradient of the block output.
        let mut dx1 = dx.clone();
        for t in 0..n {
            let br = lb.branch(cache.routes[t]);
            let df = &dx[t];
            outer_acc(&mut grad[br.w2..br.w2 + d * c.d_ff], c.d_ff, df, &lc.g[t]);
            add_bias(&mut grad[br.b2..br.b2 + d], df);
            let mut dg = vec![0.0; c.d_ff];
            matvec_t_acc(&w[br.w2..], d, c.d_ff, df, &mut dg);
            let dz: Vec<f64> = dg.iter().zip(&lc.z[t]).map(|(a, &z)| a * gelu_grad(z)).collect();
            outer_acc(&mut grad[br.w1..br.w1 + c.d_ff * d], d, &dz, &lc.c[t]);
            add_bias(&mut grad[br.b1..br.b1 + c.d_ff], &dz);
            let mut dc = vec![0.0; d];
            matvec_t_acc(&w[br.w1..], c.d_ff, d, &dz, &mut dc);
            let (dg2, db2) = split_two(&mut grad, lb.ln2_g, lb.ln2_b, d);
            let back = layer_norm_backward(&dc, &lc.ln2[t], &w[lb.ln2_g..lb.ln2_g + d], dg2, db2);
            add_bias(&mut dx1[t], &back);
        }
        // Attention sublayer.
        let mut dxin = dx1.clone();
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for t in 0..n {
            let dy = &dx1[t];
            outer_acc(&mut grad[lb.wo..lb.wo + d * d], d, dy, &lc.o[t]);
            add_bias(&mut grad[lb.bo..lb.bo + d], dy);
            let mut dout = vec![0.0; d];
            matvec_t_acc(&w[lb.wo..], d, d, dy, &mut dout);
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let wts = &lc.alpha[t][h];
                let vis = &cache.visible[t];
                let dalpha: Vec<f64> = vis
                    .iter()
                    .map(|&u| hs.clone().map(|i| dout[i] * lc.v[u][i]).sum())
                    .collect();
                let inner: f64 = wts.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
                for (j, &u) in vis.iter().enumerate() {
                    let ds = wts[j] * (dalpha[j] - inner) * scale;
                    for i in hs.clone() {
                        dv[u][i] += wts[j] * dout[i];
                        dq[t][i] += ds * lc.k[u][i];
                        dk[u][i] += ds * lc.q[t][i];
                    }
                }
            }
        }
        for t in 0..n {
            let br = lb.branch(cache.routes[t]);
            let mut da = vec![0.0; d];
            for (wo, g) in [(br.wq, &dq[t]), (br.wk, &dk[t]), (br.wv, &dv[t])] {
                outer_acc(&mut grad[wo..wo + d * d], d, g, &lc.a[t]);
                matvec_t_acc(&w[wo..], d, d, g, &mut da);
            }
            let (dg1, db1) = split_two(&mut grad, lb.ln1_g, lb.ln1_b, d);
            let back = layer_norm_backward(&da, &lc.ln1[t], &w[lb.ln1_g..lb.ln1_g + d], dg1, db1);
            add_bias(&mut dxin[t], &back);
        }
        dx = dxin;
    }
    (grad, dx)
}

/// Disjoint mutable views of two equal-width tensors, `first < second`.
fn split_two(grad: &mut [f64], first: usize, second: usize, width: usize) -> (&mut [f64], &mut [f64]) {
    let (lo, hi) = grad.split_at_mut(second);
    (&mut lo[first..first + width], &mut hi[..width])
}

/// Forward from a sequence, and a backward that also reaches the embeddings.
pub fn forward_sequence(params: &MotParams, seq: &MotSequence) -> Result<MotOutput, MotError> {
    let x = embed(params, seq)?;
    mot_forward(params, &x, &seq.layout)
}

pub fn backward_sequence(params: &MotParams, seq: &MotSequence, out: &MotOutput, heads: &HeadGrads) -> Vec<f64> {
    let (mut grad, dx) = mot_backward(params, out, heads);
    embed_backward(params, seq, &dx, &mut grad);
    grad
}

/// Q/K/V projections of one branch at one layer, for the initialization check.
pub fn branch_projections(params: &MotParams, layer: usize, branch: Branch, a: &[f64]) -> [Vec<f64>; 3] {
    let d = params.config().d_model;
    let w = params.values();
    let br = params.layout().layers[layer].branch(branch);
    [
        matvec(&w[br.wq..], d, d, a),
        matvec(&w[br.wk..], d, d, a),
        matvec(&w[br.wv..], d, d, a),
    ]
}

/// FFN output of one branch at one layer.
pub fn branch_ffn(params: &MotParams, layer: usize, branch: Branch, c_in: &[f64]) -> Vec<f64> {
    let cfg = params.config();
    let w = params.values();
    let br = params.layout().layers[layer].branch(branch);
    let mut z = matvec(&w[br.w1..], cfg.d_ff, cfg.d_model, c_in);
    add_bias(&mut z, &w[br.b1..br.b1 + cfg.d_ff]);
    let g: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
    let mut f = matvec(&w[br.w2..], cfg.d_model, cfg.d_ff, &g);
    add_bias(&mut f, &w[br.b2..br.b2 + cfg.d_model]);
    f
}
