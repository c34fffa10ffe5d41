//! Task instances and their structured answers.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::rewards::{Box2D, Point, PointSet, Trajectory};

/// Output structure of a task, which also selects its reward family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Box,
    Multibox,
    Point,
    Pointset,
    Trajectory,
    Mcq,
    Binary,
    Count,
    Ordering,
    Regression,
    Freeform,
}

impl TaskKind {
    pub const ALL: [TaskKind; 11] = [
        TaskKind::Box,
        TaskKind::Multibox,
        TaskKind::Point,
        TaskKind::Pointset,
        TaskKind::Trajectory,
        TaskKind::Mcq,
        TaskKind::Binary,
        TaskKind::Count,
        TaskKind::Ordering,
        TaskKind::Regression,
        TaskKind::Freeform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Box => "box",
            TaskKind::Multibox => "multibox",
            TaskKind::Point => "point",
            TaskKind::Pointset => "pointset",
            TaskKind::Trajectory => "trajectory",
            TaskKind::Mcq => "mcq",
            TaskKind::Binary => "binary",
            TaskKind::Count => "count",
            TaskKind::Ordering => "ordering",
            TaskKind::Regression => "regression",
            TaskKind::Freeform => "freeform",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task kind `{0}`")]
pub struct UnknownKind(pub String);

impl FromStr for TaskKind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

/// Capability dimension used for curriculum balancing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Perception,
    Prediction,
    Interaction,
    Planning,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Perception,
        Dimension::Prediction,
        Dimension::Interaction,
        Dimension::Planning,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A structured answer: either a parsed model output or a task's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Answer {
    Box(Box2D),
    Multibox(Vec<Box2D>),
    Point(Point),
    Pointset(PointSet),
    Trajectory(Trajectory),
    Mcq(char),
    Binary(bool),
    Count(u64),
    Ordering(Vec<String>),
    Regression(f64),
    Freeform(String),
}

impl Answer {
    pub fn kind(&self) -> TaskKind {
        match self {
            Answer::Box(_) => TaskKind::Box,
            Answer::Multibox(_) => TaskKind::Multibox,
            Answer::Point(_) => TaskKind::Point,
            Answer::Pointset(_) => TaskKind::Pointset,
            Answer::Trajectory(_) => TaskKind::Trajectory,
            Answer::Mcq(_) => TaskKind::Mcq,
            Answer::Binary(_) => TaskKind::Binary,
            Answer::Count(_) => TaskKind::Count,
            Answer::Ordering(_) => TaskKind::Ordering,
            Answer::Regression(_) => TaskKind::Regression,
            Answer::Freeform(_) => TaskKind::Freeform,
        }
    }
}

/// One embodied problem: a symbolic observation plus question, and its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub id: u64,
    pub kind: TaskKind,
    pub dimension: Dimension,
    pub prompt_tokens: Vec<u32>,
    pub target: Answer,
}
