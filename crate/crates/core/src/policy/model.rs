//! Elman-style recurrent softmax policy with hand-written backpropagation.
//!
//! ```text
//! h_t      = tanh(E[x_t] + W_h h_{t-1} + b_h)              prompt tokens, h_0 = 0
//! h_t      = tanh(E[x_t] + W_h h_{t-1} + W_c c + b_h)      response tokens
//! logits_t = W_o h_t + b_o
//! ```
//!
//! `c` is the state at the end of the prompt, fed to every decoding step so the
//! response does not have to carry the observation through its own recurrence. The
//! distribution over response token `y_k` is read off the state after `prompt ++ y_<k`.

use std::io::{Read, Write};

use crate::numerics::{self, RngStream, SamplingParams};

use super::vocab::{self, Vocabulary};
use super::{PolicyError, Rollout};

const MAGIC: &[u8; 8] = b"EMBRLPOL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab_size: usize,
    hidden_dim: usize,
    params: Vec<f64>,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    d: usize,
    embed: usize,
    w_h: usize,
    w_c: usize,
    b_h: usize,
    w_o: usize,
    b_o: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, d: usize) -> Self {
        let embed = 0;
        let w_h = embed + v * d;
        let w_c = w_h + d * d;
        let b_h = w_c + d * d;
        let w_o = b_h + d;
        let b_o = w_o + v * d;
        Self {
            v,
            d,
            embed,
            w_h,
            w_c,
            b_h,
            w_o,
            b_o,
            total: b_o + v,
        }
    }
}

/// Hidden states and logits of one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<u32>,
    /// `states[s]` is the hidden state after consuming `inputs[s]`.
    states: Vec<Vec<f64>>,
    /// Logits for each response position, in order.
    pub logits: Vec<Vec<f64>>,
    first_response_state: usize,
}

/// Decoder state: the recurrent state plus the prompt context once the prompt is consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub hidden: Vec<f64>,
    pub context: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(hidden_dim: usize, rng: &mut RngStream) -> Self {
        let v = Vocabulary::standard().len();
        let l = Layout::new(v, hidden_dim);
        let mut params = vec![0.0; l.total];
        let d = hidden_dim as f64;
        for p in &mut params[l.embed..l.w_h] {
            *p = 0.5 * rng.normal();
        }
        for p in &mut params[l.w_h..l.b_h] {
            *p = rng.normal() / d.sqrt();
        }
        for p in &mut params[l.w_o..l.b_o] {
            *p = 0.01 * rng.normal();
        }
        Self {
            vocab_size: v,
            hidden_dim,
            params,
        }
    }

    pub fn from_params(hidden_dim: usize, params: Vec<f64>) -> Result<Self, PolicyError> {
        let v = Vocabulary::standard().len();
        let l = Layout::new(v, hidden_dim);
        if params.len() != l.total {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} parameters for hidden_dim {hidden_dim}, got {}",
                l.total,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(PolicyError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            vocab_size: v,
            hidden_dim,
            params,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(self.vocab_size, self.hidden_dim)
    }

    fn step_state(&self, l: &Layout, prev: &[f64], context: Option<&[f64]>, token: u32, out: &mut [f64]) {
        let d = l.d;
        let e = &self.params[l.embed + token as usize * d..l.embed + (token as usize + 1) * d];
        for i in 0..d {
            let row = &self.params[l.w_h + i * d..l.w_h + (i + 1) * d];
            let mut pre = e[i] + self.params[l.b_h + i] + numerics::dot(row, prev);
            if let Some(c) = context {
                pre += numerics::dot(&self.params[l.w_c + i * d..l.w_c + (i + 1) * d], c);
            }
            out[i] = pre.tanh();
        }
    }

    fn output(&self, l: &Layout, h: &[f64]) -> Vec<f64> {
        (0..l.v)
            .map(|k| {
                self.params[l.b_o + k] + numerics::dot(&self.params[l.w_o + k * l.d..l.w_o + (k + 1) * l.d], h)
            })
            .collect()
    }

    /// Decoder state after consuming the prompt from `h_0 = 0`.
    pub fn encode(&self, prompt: &[u32]) -> DecodeState {
        let l = self.layout();
        let mut h = vec![0.0; l.d];
        let mut next = vec![0.0; l.d];
        for &t in prompt {
            self.step_state(&l, &h, None, t, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        DecodeState {
            context: h.clone(),
            hidden: h,
        }
    }

    pub fn logits(&self, state: &DecodeState) -> Vec<f64> {
        self.output(&self.layout(), &state.hidden)
    }

    /// Advances the decoder by one response token.
    pub fn advance(&self, state: &DecodeState, token: u32) -> DecodeState {
        let l = self.layout();
        let mut hidden = vec![0.0; l.d];
        self.step_state(&l, &state.hidden, Some(&state.context), token, &mut hidden);
        DecodeState {
            hidden,
            context: state.context.clone(),
        }
    }

    /// Teacher-forced pass over `prompt ++ response`, keeping what backprop needs.
    pub fn forward(&self, prompt: &[u32], response: &[u32]) -> Result<ForwardTrace, PolicyError> {
        if prompt.is_empty() {
            return Err(PolicyError::InvalidArgument("empty prompt".into()));
        }
        let vocab = Vocabulary::standard();
        vocab.check(prompt)?;
        vocab.check(response)?;
        let l = self.layout();
        let mut inputs = prompt.to_vec();
        if response.len() > 1 {
            inputs.extend_from_slice(&response[..response.len() - 1]);
        }
        let first = prompt.len() - 1;
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
        let mut h = vec![0.0; l.d];
        for (s, &t) in inputs.iter().enumerate() {
            let mut next = vec![0.0; l.d];
            let context = (s > first).then(|| states[first].as_slice());
            self.step_state(&l, &h, context, t, &mut next);
            states.push(next.clone());
            h = next;
        }
        let logits = (0..response.len())
            .map(|k| self.output(&l, &states[first + k]))
            .collect();
        Ok(ForwardTrace {
            inputs,
            states,
            logits,
            first_response_state: first,
        })
    }

    /// Backpropagates per-position logit gradients through the trace into a flat gradient.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(dlogits.len(), trace.logits.len(), "one logit gradient per response position");
        let l = self.layout();
        let d = l.d;
        let mut grad = vec![0.0; l.total];
        let n = trace.states.len();
        let mut dh_from_out = vec![vec![0.0; d]; n];
        for (k, dz) in dlogits.iter().enumerate() {
            let s = trace.first_response_state + k;
            let h = &trace.states[s];
            for (vi, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[l.b_o + vi] += g;
                let row = l.w_o + vi * d;
                for i in 0..d {
                    grad[row + i] += g * h[i];
                    dh_from_out[s][i] += g * self.params[row + i];
                }
            }
        }
        let first = trace.first_response_state;
        let mut dcontext = vec![0.0; d];
        let mut carry = vec![0.0; d];
        for s in (0..n).rev() {
            let h = &trace.states[s];
            if s == first {
                for i in 0..d {
                    carry[i] += dcontext[i];
                }
            }
            let mut dpre = vec![0.0; d];
            for i in 0..d {
                dpre[i] = (dh_from_out[s][i] + carry[i]) * (1.0 - h[i] * h[i]);
            }
            let tok = trace.inputs[s] as usize;
            let zero = vec![0.0; d];
            let prev = if s > 0 { &trace.states[s - 1] } else { &zero };
            let mut next_carry = vec![0.0; d];
            for i in 0..d {
                let g = dpre[i];
                if g == 0.0 {
                    continue;
                }
                grad[l.embed + tok * d + i] += g;
                grad[l.b_h + i] += g;
                let row = l.w_h + i * d;
                for j in 0..d {
                    grad[row + j] += g * prev[j];
                    next_carry[j] += g * self.params[row + j];
                }
                if s > first {
                    let c = &trace.states[first];
                    let row = l.w_c + i * d;
                    for j in 0..d {
                        grad[row + j] += g * c[j];
                        dcontext[j] += g * self.params[row + j];
                    }
                }
            }
            carry = next_carry;
        }
        grad
    }

    /// Autoregressive sampling until EOS or `max_len` tokens.
    pub fn sample(
        &self,
        prompt: &[u32],
        params: &SamplingParams,
        max_len: usize,
        rng: &mut RngStream,
    ) -> Result<Rollout, PolicyError> {
        Vocabulary::standard().check(prompt)?;
        let l = self.layout();
        let DecodeState { hidden: mut h, context } = self.encode(prompt);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut next = vec![0.0; l.d];
        while tokens.len() < max_len {
            let logits = self.output(&l, &h);
            let tok = numerics::sample_categorical(&logits, params, rng)? as u32;
            let lp = numerics::log_softmax(&logits)?[tok as usize];
            tokens.push(tok);
            logprobs.push(lp);
            if tok == vocab::EOS {
                break;
            }
            self.step_state(&l, &h, Some(&context), tok, &mut next);
            std::mem::swap(&mut h, &mut next);
        }
        let truncated = tokens.last() != Some(&vocab::EOS);
        Ok(Rollout {
            tokens,
            logprobs,
            truncated,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(bad("missing policy checkpoint header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let vocab_size = u32_at(12) as usize;
        if vocab_size != Vocabulary::standard().len() {
            return Err(PolicyError::Checkpoint(format!(
                "checkpoint vocabulary has {vocab_size} symbols, expected {}",
                Vocabulary::standard().len()
            )));
        }
        let hidden_dim = u32_at(16) as usize;
        let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
        let body = &bytes[28..];
        if body.len() != count * 8 {
            return Err(bad("truncated parameter block"));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_params(hidden_dim, params)
    }

    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, PolicyError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| PolicyError::Io(e.to_string()))?;
        Self::from_bytes(&buf)
    }

    /// FNV-1a digest of the serialized parameters.
    pub fn fingerprint(&self) -> u64 {
        self.to_bytes().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}
