//! Task-aware rewards `r = R_kind(prediction, target)` in `[0, 1]`.
//!
//! Each output structure gets its own family:
//!
//! | kind                    | reward                                               |
//! |-------------------------|------------------------------------------------------|
//! | box                     | IoU                                                  |
//! | multibox                | Hungarian-matched IoU / max(#pred, #gt)              |
//! | point                   | `1 - dist / sqrt(2)`, clamped                        |
//! | pointset                | `exp(-chamfer / tau_chamfer)`                        |
//! | trajectory              | blend of `1 - DFD` (or DTW decay) and endpoint score |
//! | mcq, binary, count      | exact match                                          |
//! | ordering                | normalized LCS                                       |
//! | regression              | `1 - |err| / (|gt| + eps)`, clamped                  |
//! | freeform                | judge verdict                                        |
//!
//! Unparseable predictions score 0. A judge that cannot be reached is an error.

pub mod assignment;
pub mod judge;
pub mod path;

use serde::{Deserialize, Serialize};

use crate::policy::vocab::Vocabulary;
use crate::task::{Answer, TaskInstance, TaskKind};
pub use judge::{JudgeClient, JudgeError, JudgeRequest, MockJudge, QualityMode, QualityRequest, RemoteJudge};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty structure: {0}")]
    EmptyStructure(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Image-normalized point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, RewardError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(RewardError::InvalidArgument(format!("box {self:?} leaves the unit square")));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(RewardError::InvalidArgument(format!("box {self:?} has inverted extents")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointSet(pub Vec<Point>);

/// Ordered waypoints, at least two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(pub Vec<Point>);

/// Upper bound on waypoints in a target trajectory.
pub const MAX_TARGET_WAYPOINTS: usize = 15;

impl Trajectory {
    pub fn new(waypoints: Vec<Point>) -> Result<Self, RewardError> {
        if waypoints.len() < 2 {
            return Err(RewardError::InvalidArgument(format!(
                "trajectory needs at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        Ok(Self(waypoints))
    }

    pub fn validate_target(&self) -> Result<(), RewardError> {
        if self.0.len() < 2 || self.0.len() > MAX_TARGET_WAYPOINTS {
            return Err(RewardError::InvalidArgument(format!(
                "target trajectory length {} outside [2, {MAX_TARGET_WAYPOINTS}]",
                self.0.len()
            )));
        }
        Ok(())
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryMetric {
    Frechet,
    Dtw,
}

/// Reward hyperparameters plus the set of kinds this spec dispatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub tau_chamfer: f64,
    pub tau_dtw: f64,
    pub endpoint_weight: f64,
    pub rel_err_floor: f64,
    pub trajectory_metric: TrajectoryMetric,
    pub kinds: Vec<TaskKind>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            tau_chamfer: 0.1,
            tau_dtw: 0.1,
            endpoint_weight: 0.2,
            rel_err_floor: 1e-6,
            trajectory_metric: TrajectoryMetric::Frechet,
            kinds: TaskKind::ALL.to_vec(),
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, v) in [
            ("tau_chamfer", self.tau_chamfer),
            ("tau_dtw", self.tau_dtw),
            ("rel_err_floor", self.rel_err_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RewardError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.endpoint_weight) {
            return Err(RewardError::Config(format!(
                "endpoint_weight must lie in [0, 1], got {}",
                self.endpoint_weight
            )));
        }
        Ok(())
    }
}

pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Optimal one-to-one IoU matching, normalized by the larger of the two set sizes.
pub fn hungarian_matched_iou(preds: &[Box2D], gts: &[Box2D]) -> f64 {
    if preds.is_empty() || gts.is_empty() {
        return 0.0;
    }
    let weights: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| iou(p, g)).collect())
        .collect();
    let total: f64 = assignment::max_weight_matching(&weights)
        .into_iter()
        .map(|(r, c)| weights[r][c])
        .sum();
    (total / preds.len().max(gts.len()) as f64).clamp(0.0, 1.0)
}

pub fn point_reward(pred: &Point, gt: &Point) -> Result<f64, RewardError> {
    for p in [pred, gt] {
        if !p.in_unit_square() {
            return Err(RewardError::InvalidArgument(format!("point {p:?} outside [0,1]^2")));
        }
    }
    Ok((1.0 - pred.distance(gt) / std::f64::consts::SQRT_2).max(0.0))
}

/// Symmetric Chamfer distance: half of each direction's mean nearest-neighbour distance.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64, RewardError> {
    if a.is_empty() || b.is_empty() {
        return Err(RewardError::EmptyStructure("point set"));
    }
    let directed = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| to.iter().map(|q| p.distance(q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * directed(a, b) + 0.5 * directed(b, a))
}

pub fn chamfer_reward(pred: &PointSet, gt: &PointSet, spec: &RewardSpec) -> Result<f64, RewardError> {
    let cd = chamfer_distance(&pred.0, &gt.0)?;
    Ok((-cd / spec.tau_chamfer).exp().clamp(0.0, 1.0))
}

pub fn dtw_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    path::dtw(&a.0, &b.0)
}

pub fn discrete_frechet(a: &Trajectory, b: &Trajectory) -> f64 {
    path::discrete_frechet(&a.0, &b.0)
}

/// Curve score blended with an endpoint term:
/// `(1 - w) * base + w * point_reward(last(pred), last(gt))`.
///
/// `base` is `max(0, 1 - DFD)` under the Fréchet metric and
/// `exp(-DTW / (tau_dtw * max(|pred|, |gt|)))` under DTW.
pub fn trajectory_reward(pred: &Trajectory, gt: &Trajectory, spec: &RewardSpec) -> Result<f64, RewardError> {
    let (Some(pe), Some(ge)) = (pred.0.last(), gt.0.last()) else {
        return Err(RewardError::EmptyStructure("trajectory"));
    };
    let base = match spec.trajectory_metric {
        TrajectoryMetric::Frechet => (1.0 - discrete_frechet(pred, gt)).max(0.0),
        TrajectoryMetric::Dtw => {
            let steps = pred.0.len().max(gt.0.len()) as f64;
            (-dtw_distance(pred, gt) / (spec.tau_dtw * steps)).exp()
        }
    };
    let endpoint = point_reward(pe, ge)?;
    let w = spec.endpoint_weight;
    Ok(((1.0 - w) * base + w * endpoint).clamp(0.0, 1.0))
}

fn canonical(s: &str) -> String {
    s.trim().to_lowercase()
}

pub fn exact_match_reward(pred: &str, gt: &str) -> f64 {
    if canonical(pred) == canonical(gt) {
        1.0
    } else {
        0.0
    }
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(pred, gt) / max(|pred|, |gt|)`; 0 when either side is empty.
pub fn normalized_lcs_reward<T: PartialEq>(pred: &[T], gt: &[T]) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    lcs_len(pred, gt) as f64 / pred.len().max(gt.len()) as f64
}

pub fn regression_reward(pred: f64, gt: f64, spec: &RewardSpec) -> f64 {
    if !pred.is_finite() || !gt.is_finite() {
        return 0.0;
    }
    (1.0 - (pred - gt).abs() / (gt.abs() + spec.rel_err_floor)).clamp(0.0, 1.0)
}

/// Routes a parsed prediction to the reward family of the task's kind.
/// `prediction = None` means the output failed to parse and scores 0.
pub fn dispatch_reward(
    task: &TaskInstance,
    prediction: Option<&Answer>,
    spec: &RewardSpec,
    judge: &dyn JudgeClient,
) -> Result<f64, RewardError> {
    if !spec.kinds.contains(&task.kind) {
        return Err(RewardError::Config(format!("kind `{}` has no reward in this spec", task.kind)));
    }
    let Some(pred) = prediction else {
        return Ok(0.0);
    };
    let r = match (pred, &task.target) {
        (Answer::Box(p), Answer::Box(g)) => iou(p, g),
        (Answer::Multibox(p), Answer::Multibox(g)) => hungarian_matched_iou(p, g),
        (Answer::Point(p), Answer::Point(g)) => point_reward(p, g)?,
        (Answer::Pointset(p), Answer::Pointset(g)) => {
            if p.0.is_empty() {
                0.0
            } else {
                chamfer_reward(p, g, spec)?
            }
        }
        (Answer::Trajectory(p), Answer::Trajectory(g)) => {
            if p.0.is_empty() {
                0.0
            } else {
                trajectory_reward(p, g, spec)?
            }
        }
        (Answer::Mcq(p), Answer::Mcq(g)) => exact_match_reward(&p.to_string(), &g.to_string()),
        (Answer::Binary(p), Answer::Binary(g)) => {
            exact_match_reward(if *p { "yes" } else { "no" }, if *g { "yes" } else { "no" })
        }
        (Answer::Count(p), Answer::Count(g)) => exact_match_reward(&p.to_string(), &g.to_string()),
        (Answer::Ordering(p), Answer::Ordering(g)) => normalized_lcs_reward(p, g),
        (Answer::Regression(p), Answer::Regression(g)) => regression_reward(*p, *g, spec),
        (Answer::Freeform(p), Answer::Freeform(g)) => {
            if p.trim().is_empty() {
                return Ok(0.0);
            }
            let q = Vocabulary::standard().decode(&task.prompt_tokens);
            judge::judge_reward(
                &JudgeRequest {
                    q,
                    y: p.clone(),
                    y_star: g.clone(),
                },
                judge,
            )?
        }
        _ => 0.0,
    };
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Dimension;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> Box2D {
        Box2D::new(a, b, c, d).unwrap()
    }

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(0.5, 0.5, 0.7, 0.7)), 0.0);
        // inter 0.01, union 0.04 + 0.04 - 0.01
        let v = iou(&a, &bx(0.1, 0.1, 0.3, 0.3));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        let degenerate = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&degenerate, &degenerate), 0.0);
        assert!(Box2D::new(0.5, 0.0, 0.2, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, 1.2, 1.0).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let gts = vec![bx(0.0, 0.0, 0.2, 0.2), bx(0.5, 0.5, 0.9, 0.9), bx(0.1, 0.6, 0.3, 0.8)];
        let preds = vec![gts[2], gts[0], gts[1]];
        assert!((hungarian_matched_iou(&preds, &gts) - 1.0).abs() < 1e-15);
        assert_eq!(hungarian_matched_iou(&[], &gts), 0.0);
        // one perfect prediction out of three targets
        assert!((hungarian_matched_iou(&gts[..1], &gts) - 1.0 / 3.0).abs() < 1e-15);
        // duplicate predictions are penalized by the denominator
        let dup = vec![gts[0], gts[0]];
        assert!((hungarian_matched_iou(&dup, &gts[..1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn point_examples() {
        let p = Point::new(0.2, 0.9);
        assert_eq!(point_reward(&p, &p).unwrap(), 1.0);
        assert_eq!(point_reward(&Point::new(0.0, 0.0), &Point::new(1.0, 1.0)).unwrap(), 0.0);
        let v = point_reward(&Point::new(0.0, 0.0), &Point::new(0.3, 0.4)).unwrap();
        assert!((v - (1.0 - 0.5 / 2f64.sqrt())).abs() < 1e-12);
        assert!(point_reward(&Point::new(1.5, 0.0), &p).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let spec = RewardSpec::default();
        let s = PointSet(pts(&[(0.1, 0.1), (0.4, 0.2)]));
        assert_eq!(chamfer_reward(&s, &s, &spec).unwrap(), 1.0);
        let a = PointSet(pts(&[(0.0, 0.0)]));
        let b = PointSet(pts(&[(0.3, 0.4)]));
        let v = chamfer_reward(&a, &b, &spec).unwrap();
        assert!((v - (-0.5f64 / 0.1).exp()).abs() < 1e-12);
        assert_eq!(
            chamfer_reward(&PointSet(vec![]), &b, &spec),
            Err(RewardError::EmptyStructure("point set"))
        );
    }

    #[test]
    fn chamfer_four_vs_three_matches_exhaustive_pairing() {
        let a = pts(&[(0.1, 0.1), (0.9, 0.2), (0.5, 0.5), (0.2, 0.8)]);
        let b = pts(&[(0.15, 0.05), (0.6, 0.6), (0.9, 0.9)]);
        // nearest neighbours by enumerating every pair distance
        let mut d_ab = 0.0;
        for p in &a {
            let mut best = f64::MAX;
            for q in &b {
                best = best.min(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt());
            }
            d_ab += best;
        }
        let mut d_ba = 0.0;
        for q in &b {
            let mut best = f64::MAX;
            for p in &a {
                best = best.min(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt());
            }
            d_ba += best;
        }
        let oracle = 0.5 * d_ab / 4.0 + 0.5 * d_ba / 3.0;
        assert!((chamfer_distance(&a, &b).unwrap() - oracle).abs() < 1e-15);
        assert!((chamfer_distance(&b, &a).unwrap() - oracle).abs() < 1e-15);
    }

    #[test]
    fn trajectory_examples() {
        let spec = RewardSpec::default();
        let t = Trajectory::new(pts(&[(0.0, 0.0), (0.5, 0.5), (1.0, 0.5)])).unwrap();
        assert_eq!(trajectory_reward(&t, &t, &spec).unwrap(), 1.0);
        assert_eq!(dtw_distance(&t, &t), 0.0);
        assert_eq!(discrete_frechet(&t, &t), 0.0);

        let a = Trajectory::new(pts(&[(0.0, 0.0), (1.0, 0.0)])).unwrap();
        let b = Trajectory::new(pts(&[(0.0, 1.0), (1.0, 1.0)])).unwrap();
        assert_eq!(discrete_frechet(&a, &b), 1.0);

        let w0 = RewardSpec {
            endpoint_weight: 0.0,
            ..spec.clone()
        };
        let p = Trajectory::new(pts(&[(0.0, 0.0), (0.3, 0.3), (0.6, 0.4)])).unwrap();
        let g = Trajectory::new(pts(&[(0.0, 0.1), (0.3, 0.2), (0.5, 0.5)])).unwrap();
        let dfd = discrete_frechet(&p, &g);
        assert_eq!(trajectory_reward(&p, &g, &w0).unwrap(), (1.0 - dfd).max(0.0));

        let half = RewardSpec {
            endpoint_weight: 0.5,
            ..spec
        };
        let endpoint = 1.0 - Point::new(0.6, 0.4).distance(&Point::new(0.5, 0.5)) / 2f64.sqrt();
        let expected = 0.5 * (1.0 - dfd) + 0.5 * endpoint;
        assert!((trajectory_reward(&p, &g, &half).unwrap() - expected).abs() < 1e-12);
        assert!(Trajectory::new(pts(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn dtw_singleton_collapses_to_pair_sum() {
        let single = pts(&[(0.0, 0.0)]);
        let other = pts(&[(0.3, 0.4), (0.0, 1.0)]);
        assert!((path::dtw(&single, &other) - (0.5 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dtw_trajectory_metric_decays() {
        let spec = RewardSpec {
            trajectory_metric: TrajectoryMetric::Dtw,
            endpoint_weight: 0.0,
            ..RewardSpec::default()
        };
        let p = Trajectory::new(pts(&[(0.0, 0.0), (0.5, 0.5)])).unwrap();
        let g = Trajectory::new(pts(&[(0.0, 0.1), (0.5, 0.5)])).unwrap();
        let v = trajectory_reward(&p, &g, &spec).unwrap();
        assert!((v - (-0.1f64 / (0.1 * 2.0)).exp()).abs() < 1e-12);
    }

    #[test]
    fn discrete_examples() {
        assert_eq!(exact_match_reward("B", "B"), 1.0);
        assert_eq!(exact_match_reward("b", " B "), 1.0);
        assert_eq!(exact_match_reward("7", "8"), 0.0);
        assert_eq!(normalized_lcs_reward(&["a", "b", "c"], &["a", "b", "c"]), 1.0);
        assert!((normalized_lcs_reward(&["c", "b", "a"], &["a", "b", "c"]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((normalized_lcs_reward(&["A", "B", "C"], &["A", "C"]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(normalized_lcs_reward::<&str>(&[], &["a"]), 0.0);
    }

    #[test]
    fn regression_examples() {
        let spec = RewardSpec::default();
        assert_eq!(regression_reward(100.0, 100.0, &spec), 1.0);
        assert!((regression_reward(110.0, 100.0, &spec) - 0.9).abs() < 1e-6);
        assert_eq!(regression_reward(300.0, 100.0, &spec), 0.0);
        assert_eq!(regression_reward(f64::NAN, 100.0, &spec), 0.0);
    }

    #[test]
    fn dispatch_routes_by_kind() {
        let spec = RewardSpec::default();
        let judge = MockJudge::default();
        let mk = |kind, target| TaskInstance {
            id: 0,
            kind,
            dimension: Dimension::Perception,
            prompt_tokens: vec![],
            target,
        };
        let mcq = mk(TaskKind::Mcq, Answer::Mcq('B'));
        assert_eq!(dispatch_reward(&mcq, Some(&Answer::Mcq('B')), &spec, &judge).unwrap(), 1.0);
        assert_eq!(dispatch_reward(&mcq, Some(&Answer::Mcq('C')), &spec, &judge).unwrap(), 0.0);
        assert_eq!(dispatch_reward(&mcq, None, &spec, &judge).unwrap(), 0.0);
        let b = bx(0.2, 0.2, 0.4, 0.6);
        let boxed = mk(TaskKind::Box, Answer::Box(b));
        assert_eq!(dispatch_reward(&boxed, Some(&Answer::Box(b)), &spec, &judge).unwrap(), 1.0);

        let p = Trajectory::new(pts(&[(0.0, 0.0), (0.3, 0.3)])).unwrap();
        let g = Trajectory::new(pts(&[(0.1, 0.0), (0.4, 0.4)])).unwrap();
        let traj = mk(TaskKind::Trajectory, Answer::Trajectory(g.clone()));
        assert_eq!(
            dispatch_reward(&traj, Some(&Answer::Trajectory(p.clone())), &spec, &judge).unwrap(),
            trajectory_reward(&p, &g, &spec).unwrap()
        );

        let restricted = RewardSpec {
            kinds: vec![TaskKind::Mcq],
            ..RewardSpec::default()
        };
        assert!(matches!(
            dispatch_reward(&boxed, Some(&Answer::Box(b)), &restricted, &judge),
            Err(RewardError::Config(_))
        ));
        // structure mismatch is a failed answer, not an error
        assert_eq!(dispatch_reward(&mcq, Some(&Answer::Count(2)), &spec, &judge).unwrap(), 0.0);
    }

    #[test]
    fn freeform_propagates_judge_failure() {
        struct Down;
        impl JudgeClient for Down {
            fn score(&self, _: &JudgeRequest) -> Result<f64, JudgeError> {
                Err(JudgeError::Unavailable("down".into()))
            }
            fn score_quality(&self, _: &QualityRequest) -> Result<f64, JudgeError> {
                Err(JudgeError::Unavailable("down".into()))
            }
        }
        let vocab = Vocabulary::standard();
        let task = TaskInstance {
            id: 1,
            kind: TaskKind::Freeform,
            dimension: Dimension::Planning,
            prompt_tokens: vocab.encode("<bos>[freeform]cup").unwrap(),
            target: Answer::Freeform("cup on plate".into()),
        };
        let pred = Answer::Freeform("cup on plate".into());
        let spec = RewardSpec::default();
        assert_eq!(dispatch_reward(&task, Some(&pred), &spec, &MockJudge::default()).unwrap(), 1.0);
        assert!(matches!(
            dispatch_reward(&task, Some(&pred), &spec, &Down),
            Err(RewardError::Judge(JudgeError::Unavailable(_)))
        ));
    }
}
