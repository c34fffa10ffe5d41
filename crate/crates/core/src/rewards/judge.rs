//! Judge adapters for free-form answers and reasoning-trace quality.
//!
//! The remote adapter speaks newline-delimited JSON over TCP. One request per line:
//!
//! ```text
//! -> {"q": "...", "y": "...", "y_star": "..."}
//! <- {"score": 0.75}
//! ```
//!
//! Quality requests add a channel tag: `{"channel": "quality", "q": ..., "y": ..., "kind": "mcq"}`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::grpo::repetition_rate;
use crate::policy::parse::parse_text;
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("invalid judge request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub q: String,
    pub y: String,
    pub y_star: String,
}

impl JudgeRequest {
    pub fn validate(&self) -> Result<(), JudgeError> {
        for (name, field) in [("q", &self.q), ("y", &self.y), ("y_star", &self.y_star)] {
            if field.trim().is_empty() {
                return Err(JudgeError::InvalidRequest(format!("field `{name}` is empty")));
            }
        }
        Ok(())
    }
}

/// Request on the trace-quality channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityRequest {
    pub q: String,
    pub y: String,
    pub kind: TaskKind,
}

pub trait JudgeClient: Send + Sync {
    /// Correctness verdict for a free-form answer; expected in `[0, 1]`.
    fn score(&self, req: &JudgeRequest) -> Result<f64, JudgeError>;

    /// Quality of a full response, reasoning included; expected in `[0, 1]`.
    fn score_quality(&self, req: &QualityRequest) -> Result<f64, JudgeError>;
}

/// Free-form reward: the judge's verdict clamped to `[0, 1]`.
pub fn judge_reward(req: &JudgeRequest, judge: &dyn JudgeClient) -> Result<f64, JudgeError> {
    req.validate()?;
    let score = judge.score(req)?;
    if score.is_nan() {
        return Err(JudgeError::Unavailable("judge returned NaN".into()));
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Multiset token-overlap F1 over whitespace tokens.
pub fn token_f1(y: &str, y_star: &str) -> f64 {
    let pred: Vec<&str> = y.split_whitespace().collect();
    let gold: Vec<&str> = y_star.split_whitespace().collect();
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum QualityMode {
    /// Parse validity times `1 - repetition rate` of the response tokens.
    Structural,
    /// Deterministic pseudo-uniform score keyed on the request text.
    Uniform { seed: u64 },
}

/// Deterministic offline judge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockJudge {
    pub quality: QualityMode,
}

impl Default for MockJudge {
    fn default() -> Self {
        Self {
            quality: QualityMode::Structural,
        }
    }
}

impl MockJudge {
    pub fn uniform_quality(seed: u64) -> Self {
        Self {
            quality: QualityMode::Uniform { seed },
        }
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // final avalanche so nearby strings spread over [0, 1)
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

impl JudgeClient for MockJudge {
    fn score(&self, req: &JudgeRequest) -> Result<f64, JudgeError> {
        Ok(token_f1(&req.y, &req.y_star))
    }

    fn score_quality(&self, req: &QualityRequest) -> Result<f64, JudgeError> {
        match self.quality {
            QualityMode::Structural => {
                let valid = parse_text(req.kind, &req.y).is_ok();
                if !valid {
                    return Ok(0.0);
                }
                let toks: Vec<&str> = req.y.split_whitespace().collect();
                Ok(1.0 - repetition_rate(&toks, 2))
            }
            QualityMode::Uniform { seed } => {
                let mut key = req.q.as_bytes().to_vec();
                key.push(0);
                key.extend_from_slice(req.y.as_bytes());
                Ok((fnv1a(&key, seed) >> 11) as f64 / (1u64 << 53) as f64)
            }
        }
    }
}

#[derive(Debug, Serialize)]
struct WireAnswer<'a> {
    q: &'a str,
    y: &'a str,
    y_star: &'a str,
}

#[derive(Debug, Serialize)]
struct WireQuality<'a> {
    channel: &'static str,
    q: &'a str,
    y: &'a str,
    kind: TaskKind,
}

#[derive(Debug, Deserialize)]
struct WireScore {
    score: f64,
}

/// Counting semaphore bounding in-flight remote requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Line-delimited JSON judge over TCP. Opens one connection per request.
#[derive(Debug)]
pub struct RemoteJudge {
    endpoint: String,
    timeout: Duration,
    slots: Slots,
}

impl RemoteJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            slots: Slots {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        }
    }

    fn round_trip(&self, line: String) -> Result<f64, JudgeError> {
        let _slot = self.slots.acquire();
        let unavailable = |e: std::io::Error| JudgeError::Unavailable(format!("{}: {e}", self.endpoint));
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| JudgeError::Unavailable(format!("{}: no address", self.endpoint)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(unavailable)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(unavailable)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(unavailable)?;
        stream.write_all(line.as_bytes()).map_err(unavailable)?;
        stream.write_all(b"\n").map_err(unavailable)?;
        stream.flush().map_err(unavailable)?;

        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply).map_err(unavailable)?;
        if reply.trim().is_empty() {
            return Err(JudgeError::Unavailable(format!("{}: empty reply", self.endpoint)));
        }
        let parsed: WireScore = serde_json::from_str(reply.trim())
            .map_err(|e| JudgeError::Unavailable(format!("{}: bad reply: {e}", self.endpoint)))?;
        if !parsed.score.is_finite() {
            return Err(JudgeError::Unavailable(format!("{}: non-finite score", self.endpoint)));
        }
        Ok(parsed.score.clamp(0.0, 1.0))
    }
}

impl JudgeClient for RemoteJudge {
    fn score(&self, req: &JudgeRequest) -> Result<f64, JudgeError> {
        let line = serde_json::to_string(&WireAnswer {
            q: &req.q,
            y: &req.y,
            y_star: &req.y_star,
        })
        .expect("serializable");
        self.round_trip(line)
    }

    fn score_quality(&self, req: &QualityRequest) -> Result<f64, JudgeError> {
        let line = serde_json::to_string(&WireQuality {
            channel: "quality",
            q: &req.q,
            y: &req.y,
            kind: req.kind,
        })
        .expect("serializable");
        self.round_trip(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    fn req(q: &str, y: &str, s: &str) -> JudgeRequest {
        JudgeRequest {
            q: q.into(),
            y: y.into(),
            y_star: s.into(),
        }
    }

    #[test]
    fn mock_contract() {
        let j = MockJudge::default();
        assert_eq!(judge_reward(&req("q", "cup on plate", "cup on plate"), &j).unwrap(), 1.0);
        assert_eq!(judge_reward(&req("q", "cup bowl", "apple knife"), &j).unwrap(), 0.0);
        // common = {cup, on} -> p = 2/3, r = 2/4, F1 = 2pr/(p+r) = 4/7
        let f1 = judge_reward(&req("q", "cup on bowl", "cup on the plate"), &j).unwrap();
        assert!((f1 - 4.0 / 7.0).abs() < 1e-15);
        assert!(matches!(
            judge_reward(&req("", "a", "b"), &j),
            Err(JudgeError::InvalidRequest(_))
        ));
    }

    #[test]
    fn uniform_quality_is_deterministic_and_spread() {
        let j = MockJudge::uniform_quality(3);
        let scores: Vec<f64> = (0..2000)
            .map(|i| {
                j.score_quality(&QualityRequest {
                    q: "q".into(),
                    y: format!("answer {i}"),
                    kind: TaskKind::Mcq,
                })
                .unwrap()
            })
            .collect();
        let above = scores.iter().filter(|s| **s >= 0.7).count() as f64 / scores.len() as f64;
        assert!((above - 0.3).abs() < 0.04, "{above}");
        let again = j
            .score_quality(&QualityRequest {
                q: "q".into(),
                y: "answer 0".into(),
                kind: TaskKind::Mcq,
            })
            .unwrap();
        assert_eq!(again, scores[0]);
    }

    #[test]
    fn remote_round_trip_and_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for _ in 0..2 {
                let (stream, _) = listener.accept().unwrap();
                let mut line = String::new();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                reader.read_line(&mut line).unwrap();
                let v: serde_json::Value = serde_json::from_str(&line).unwrap();
                seen.push(v.clone());
                let score = if v.get("channel").is_some() { 0.25 } else { 1.7 };
                let mut w = stream;
                writeln!(w, "{{\"score\": {score}}}").unwrap();
            }
            seen
        });
        let judge = RemoteJudge::new(addr.to_string(), Duration::from_secs(5), 2);
        assert_eq!(judge_reward(&req("q", "y", "ys"), &judge).unwrap(), 1.0);
        let q = judge
            .score_quality(&QualityRequest {
                q: "q".into(),
                y: "A".into(),
                kind: TaskKind::Mcq,
            })
            .unwrap();
        assert_eq!(q, 0.25);
        let seen = server.join().unwrap();
        assert_eq!(seen[0], serde_json::json!({"q": "q", "y": "y", "y_star": "ys"}));
        assert_eq!(seen[1]["channel"], "quality");

        let dead = TcpListener::bind("127.0.0.1:0").unwrap();
        let dead_addr = dead.local_addr().unwrap();
        drop(dead);
        let judge = RemoteJudge::new(dead_addr.to_string(), Duration::from_millis(200), 1);
        assert!(matches!(
            judge_reward(&req("q", "y", "ys"), &judge),
            Err(JudgeError::Unavailable(_))
        ));
    }
}
