//! Deterministic numerical substrate shared by every other module.
//!
//! Everything here is `f64`. Gradient tolerances elsewhere in the crate assume it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no valid token: every logit is -inf")]
    NoValidToken,
    #[error("degenerate vector: zero norm")]
    DegenerateVector,
    #[error("non-finite function value {value} at coordinate {coord}")]
    NonFinite { coord: usize, value: f64 },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Dense row-major real array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidArgument(format!(
                "shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::InvalidArgument(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a 2-D array.
    pub fn row(&self, r: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() on non-matrix");
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Reproducible random stream. Two streams built from the same `(seed, stream_id)`
/// produce the same draws on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream keyed by `key`. Independent of how many draws the parent has made.
    pub fn split(&self, key: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(key.wrapping_add(1))))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// `-1` disables top-k filtering.
    pub top_k: i64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            top_k: -1,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            top_k: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NumericsError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(NumericsError::InvalidArgument(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == 0 || self.top_k < -1 {
            return Err(NumericsError::InvalidArgument(format!(
                "top_k must be -1 or positive, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

fn check_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(NumericsError::InvalidArgument("empty logits".into()));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(NumericsError::InvalidArgument(
            "logits contain NaN or +inf".into(),
        ));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::NoValidToken);
    }
    Ok(max)
}

/// Max-subtracted softmax. `-inf` entries are allowed and map to probability zero.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = check_logits(logits)?;
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = check_logits(logits)?;
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// Draws a token index from the temperature-scaled softmax, restricted by top-k and then
/// by nucleus top-p. Ties in the probability ordering go to the lower index.
pub fn sample_categorical(
    logits: &[f64],
    params: &SamplingParams,
    rng: &mut RngStream,
) -> Result<usize> {
    params.validate()?;
    let scaled: Vec<f64> = logits.iter().map(|&z| z / params.temperature).collect();
    let probs = softmax(&scaled)?;

    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    if order.is_empty() {
        return Err(NumericsError::NoValidToken);
    }
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    if params.top_k > 0 {
        order.truncate(params.top_k as usize);
    }
    if params.top_p < 1.0 {
        let kept_mass: f64 = order.iter().map(|&i| probs[i]).sum();
        let mut cum = 0.0;
        let mut cut = order.len();
        for (n, &i) in order.iter().enumerate() {
            cum += probs[i] / kept_mass;
            if cum >= params.top_p {
                cut = n + 1;
                break;
            }
        }
        order.truncate(cut);
    }

    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let u = rng.next_f64() * mass;
    let mut cum = 0.0;
    for &i in &order {
        cum += probs[i];
        if u < cum {
            return Ok(i);
        }
    }
    Ok(*order.last().expect("non-empty support"))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { coord: i, value: v });
            }
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Central difference along selected coordinates only.
pub fn finite_diff_coords<F>(f: F, theta: &[f64], coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFinite {
                    coord: i,
                    value: if plus.is_finite() { minus } else { plus },
                });
            }
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Relative error with a magnitude floor so near-zero gradients compare on absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_oracle(z: &[f64]) -> Vec<f64> {
        // direct exp-normalize without shifting; fine for small inputs
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, o) in got.iter().zip(softmax_oracle(&[1.0, 2.0, 3.0])) {
            assert!((g - o).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(softmax(&[]), Err(NumericsError::InvalidArgument(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let half = 0.5f64.ln();
        assert_eq!(log_softmax(&[0.0, 0.0]).unwrap(), vec![half, half]);
        assert_eq!(log_softmax(&[5.0]).unwrap(), vec![0.0]);
        for (g, o) in log_softmax(&[1.0, 2.0, 3.0])
            .unwrap()
            .iter()
            .zip(softmax_oracle(&[1.0, 2.0, 3.0]))
        {
            assert!((g - o.ln()).abs() < 1e-12);
            assert!(*g <= 0.0);
        }
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn sampling_forced_support_and_top_k() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..100 {
            let i = sample_categorical(&[0.0, f64::NEG_INFINITY], &SamplingParams::default(), &mut rng)
                .unwrap();
            assert_eq!(i, 0);
        }
        let logits = [0.1, 2.0, -1.0, 1.9];
        for _ in 0..100 {
            assert_eq!(sample_categorical(&logits, &SamplingParams::greedy(), &mut rng).unwrap(), 1);
        }
        assert_eq!(
            sample_categorical(&[f64::NEG_INFINITY; 3], &SamplingParams::default(), &mut rng),
            Err(NumericsError::NoValidToken)
        );
    }

    #[test]
    fn sampling_monte_carlo_balanced() {
        let mut rng = RngStream::new(11, 3);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| {
                sample_categorical(&[0.0, 0.0], &SamplingParams::default(), &mut rng).unwrap() == 1
            })
            .count();
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn top_p_keeps_minimal_prefix() {
        // probs ~ [0.6, 0.3, 0.1]; top_p=0.6 keeps only index 0
        let logits = [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()];
        let params = SamplingParams {
            top_p: 0.6,
            ..Default::default()
        };
        let mut rng = RngStream::new(1, 1);
        for _ in 0..200 {
            assert_eq!(sample_categorical(&logits, &params, &mut rng).unwrap(), 0);
        }
        // ties broken toward lower index: [0.5,0.5] with top_p 0.5 keeps index 0
        let params = SamplingParams {
            top_p: 0.5,
            ..Default::default()
        };
        for _ in 0..200 {
            assert_eq!(sample_categorical(&[0.0, 0.0], &params, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn rng_streams_reproduce_and_split() {
        let mut a = RngStream::new(42, 5);
        let mut b = RngStream::new(42, 5);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let mut c = RngStream::new(42, 6);
        assert_ne!(xs[0], c.next_u64());
        let parent = RngStream::new(1, 0);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(parent.split(3).next_u64(), advanced.split(3).next_u64());
        assert_ne!(parent.split(3).next_u64(), parent.split(4).next_u64());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(NumericsError::DegenerateVector)
        );
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|t| t[0] * t[0], &[3.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 0.5], DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let err = finite_diff_gradient(|t| 1.0 / (t[0] - 1e-6).max(0.0), &[0.0], 1e-5);
        assert!(matches!(err, Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn dense_array_validates() {
        assert!(DenseArray::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(DenseArray::new(vec![1], vec![f64::NAN]).is_err());
        let m = DenseArray::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
                let a = softmax(&z).unwrap();
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let b = softmax(&shifted).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                let la = log_softmax(&z).unwrap();
                let lb = log_softmax(&shifted).unwrap();
                for ((x, y), p) in la.iter().zip(&lb).zip(&a) {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((x.exp() - p).abs() < 1e-12);
                }
            }

            #[test]
            fn cosine_scale_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..8), c in 0.01f64..100.0) {
                prop_assume!(norm(&v) > 1e-6);
                let w: Vec<f64> = v.iter().map(|x| x * c).collect();
                prop_assert!((cosine_similarity(&v, &w).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}
