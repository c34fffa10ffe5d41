//! Strict per-kind output grammars and their inverse renderers.
//!
//! ```text
//! number     := digit+ ("." digit+)?
//! box        := number " " number " " number " " number        (all in [0,1])
//! multibox   := box (";" box)*
//! point      := number " " number                              (in [0,1]^2)
//! pointset   := point (";" point)*
//! trajectory := point ";" point (";" point)*
//! mcq        := letter
//! binary     := "yes" | "no"
//! count      := digit+
//! ordering   := item (" " item)*
//! regression := number
//! freeform   := any non-empty token run
//! ```
//!
//! `<think> ... </think>` blocks are dropped before matching, and everything after the
//! first `<eos>` is ignored.

use crate::rewards::{Box2D, Point, PointSet, Trajectory};
use crate::task::{Answer, TaskKind};

use super::vocab::{self, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse failure ({kind}): {reason}")]
pub struct ParseFailure {
    pub kind: TaskKind,
    pub reason: String,
}

fn fail<T>(kind: TaskKind, reason: impl Into<String>) -> Result<T, ParseFailure> {
    Err(ParseFailure {
        kind,
        reason: reason.into(),
    })
}

/// Removes think blocks and everything from the first EOS on, then trims separators.
pub fn strip_reasoning(tokens: &[u32]) -> Option<Vec<u32>> {
    let end = tokens.iter().position(|&t| t == vocab::EOS).unwrap_or(tokens.len());
    let mut out = Vec::with_capacity(end);
    let mut inside = false;
    for &t in &tokens[..end] {
        match t {
            vocab::THINK_OPEN if inside => return None,
            vocab::THINK_OPEN => inside = true,
            vocab::THINK_CLOSE if !inside => return None,
            vocab::THINK_CLOSE => inside = false,
            _ if inside => {}
            _ => out.push(t),
        }
    }
    if inside {
        return None;
    }
    let start = out.iter().position(|&t| t != vocab::SEP).unwrap_or(out.len());
    let stop = out.iter().rposition(|&t| t != vocab::SEP).map_or(start, |p| p + 1);
    Some(out[start..stop].to_vec())
}

fn is_digit(t: u32) -> bool {
    (vocab::DIGIT0..vocab::DIGIT0 + 10).contains(&t)
}

fn digit_char(t: u32) -> char {
    char::from(b'0' + (t - vocab::DIGIT0) as u8)
}

fn parse_number(kind: TaskKind, toks: &[u32]) -> Result<f64, ParseFailure> {
    let mut text = String::new();
    let mut seen_dot = false;
    for (i, &t) in toks.iter().enumerate() {
        if is_digit(t) {
            text.push(digit_char(t));
        } else if t == vocab::DOT && !seen_dot && i > 0 && i + 1 < toks.len() {
            seen_dot = true;
            text.push('.');
        } else {
            return fail(kind, "malformed number");
        }
    }
    if text.is_empty() {
        return fail(kind, "empty number");
    }
    text.parse::<f64>().or_else(|_| fail(kind, "malformed number"))
}

fn parse_numbers(kind: TaskKind, toks: &[u32], count: usize) -> Result<Vec<f64>, ParseFailure> {
    let parts: Vec<&[u32]> = toks.split(|&t| t == vocab::SEP).collect();
    if parts.len() != count {
        return fail(kind, format!("expected {count} numbers, found {}", parts.len()));
    }
    parts.into_iter().map(|p| parse_number(kind, p)).collect()
}

fn unit(kind: TaskKind, v: f64) -> Result<f64, ParseFailure> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        fail(kind, format!("coordinate {v} outside [0,1]"))
    }
}

fn parse_box(kind: TaskKind, toks: &[u32]) -> Result<Box2D, ParseFailure> {
    let n = parse_numbers(kind, toks, 4)?;
    for v in &n {
        unit(kind, *v)?;
    }
    Box2D::new(n[0], n[1], n[2], n[3]).or_else(|e| fail(kind, e.to_string()))
}

fn parse_point(kind: TaskKind, toks: &[u32]) -> Result<Point, ParseFailure> {
    let n = parse_numbers(kind, toks, 2)?;
    Ok(Point::new(unit(kind, n[0])?, unit(kind, n[1])?))
}

fn structures(toks: &[u32]) -> Vec<&[u32]> {
    toks.split(|&t| t == vocab::BAR)
        .map(|p| {
            let s = p.iter().position(|&t| t != vocab::SEP).unwrap_or(p.len());
            let e = p.iter().rposition(|&t| t != vocab::SEP).map_or(s, |x| x + 1);
            &p[s..e]
        })
        .collect()
}

pub fn parse_output(tokens: &[u32], kind: TaskKind) -> Result<Answer, ParseFailure> {
    let Some(body) = strip_reasoning(tokens) else {
        return fail(kind, "unbalanced think markers");
    };
    if body.is_empty() {
        return fail(kind, "empty answer");
    }
    let vocab = Vocabulary::standard();
    if vocab.check(&body).is_err() {
        return fail(kind, "token outside vocabulary");
    }
    match kind {
        TaskKind::Box => Ok(Answer::Box(parse_box(kind, &body)?)),
        TaskKind::Multibox => structures(&body)
            .into_iter()
            .map(|s| parse_box(kind, s))
            .collect::<Result<Vec<_>, _>>()
            .map(Answer::Multibox),
        TaskKind::Point => Ok(Answer::Point(parse_point(kind, &body)?)),
        TaskKind::Pointset => structures(&body)
            .into_iter()
            .map(|s| parse_point(kind, s))
            .collect::<Result<Vec<_>, _>>()
            .map(|p| Answer::Pointset(PointSet(p))),
        TaskKind::Trajectory => {
            let pts = structures(&body)
                .into_iter()
                .map(|s| parse_point(kind, s))
                .collect::<Result<Vec<_>, _>>()?;
            Trajectory::new(pts)
                .map(Answer::Trajectory)
                .or_else(|e| fail(kind, e.to_string()))
        }
        TaskKind::Mcq => match body.as_slice() {
            [t] if (vocab::LETTER_A..vocab::LETTER_A + 5).contains(t) => {
                Ok(Answer::Mcq(char::from(b'A' + (t - vocab::LETTER_A) as u8)))
            }
            _ => fail(kind, "expected a single option letter"),
        },
        TaskKind::Binary => match body.as_slice() {
            [vocab::YES] => Ok(Answer::Binary(true)),
            [vocab::NO] => Ok(Answer::Binary(false)),
            _ => fail(kind, "expected yes or no"),
        },
        TaskKind::Count => {
            if body.len() > 18 || !body.iter().all(|&t| is_digit(t)) {
                return fail(kind, "expected an integer");
            }
            let text: String = body.iter().map(|&t| digit_char(t)).collect();
            text.parse::<u64>()
                .map(Answer::Count)
                .or_else(|_| fail(kind, "expected an integer"))
        }
        TaskKind::Ordering => body
            .split(|&t| t == vocab::SEP)
            .map(|w| match w {
                [t] if (vocab::ITEM0..vocab::RELATION0).contains(t) => {
                    Ok(vocab::ITEMS[(t - vocab::ITEM0) as usize].to_string())
                }
                _ => fail(kind, "expected item names"),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Answer::Ordering),
        TaskKind::Regression => parse_number(kind, &body).map(Answer::Regression),
        TaskKind::Freeform => Ok(Answer::Freeform(vocab.decode(&body).trim().to_string())),
    }
}

/// Parses text by tokenizing it with the standard vocabulary first.
pub fn parse_text(kind: TaskKind, text: &str) -> Result<Answer, ParseFailure> {
    let toks = Vocabulary::standard()
        .encode(text)
        .or_else(|e| fail(kind, e.to_string()))?;
    parse_output(&toks, kind)
}

/// Shortest decimal that reads back to the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

pub fn render_text(answer: &Answer) -> String {
    let num = |v: f64| format_number(v);
    let bx = |b: &Box2D| format!("{} {} {} {}", num(b.x_min), num(b.y_min), num(b.x_max), num(b.y_max));
    let pt = |p: &Point| format!("{} {}", num(p.x), num(p.y));
    match answer {
        Answer::Box(b) => bx(b),
        Answer::Multibox(bs) => bs.iter().map(bx).collect::<Vec<_>>().join(";"),
        Answer::Point(p) => pt(p),
        Answer::Pointset(ps) => ps.0.iter().map(pt).collect::<Vec<_>>().join(";"),
        Answer::Trajectory(t) => t.0.iter().map(pt).collect::<Vec<_>>().join(";"),
        Answer::Mcq(c) => c.to_string(),
        Answer::Binary(b) => if *b { "yes" } else { "no" }.to_string(),
        Answer::Count(n) => n.to_string(),
        Answer::Ordering(items) => items.join(" "),
        Answer::Regression(v) => num(*v),
        Answer::Freeform(s) => s.clone(),
    }
}

/// Answer tokens followed by EOS.
pub fn render(answer: &Answer) -> Vec<u32> {
    let mut toks = Vocabulary::standard()
        .encode(&render_text(answer))
        .expect("rendered answers use vocabulary symbols");
    toks.push(vocab::EOS);
    toks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(
            parse_text(TaskKind::Box, "0.1 0.1 0.3 0.3").unwrap(),
            Answer::Box(Box2D::new(0.1, 0.1, 0.3, 0.3).unwrap())
        );
        assert!(parse_text(TaskKind::Regression, "banana").is_err());
        assert_eq!(parse_text(TaskKind::Mcq, "<think>A C yes</think> B").unwrap(), Answer::Mcq('B'));
    }

    #[test]
    fn grammar_rejections() {
        assert!(parse_text(TaskKind::Box, "0.1 0.1 0.3").is_err());
        assert!(parse_text(TaskKind::Box, "0.5 0.1 0.3 0.3").is_err());
        assert!(parse_text(TaskKind::Box, "0.1 0.1 1.3 0.3").is_err());
        assert!(parse_text(TaskKind::Regression, "1..2").is_err());
        assert!(parse_text(TaskKind::Regression, ".5").is_err());
        assert!(parse_text(TaskKind::Mcq, "A B").is_err());
        assert!(parse_text(TaskKind::Mcq, "<think>A").is_err());
        assert!(parse_text(TaskKind::Mcq, "A</think>").is_err());
        assert!(parse_text(TaskKind::Trajectory, "0.1 0.1").is_err());
        assert!(parse_text(TaskKind::Count, "3.5").is_err());
        assert!(parse_text(TaskKind::Ordering, "cup yes").is_err());
        assert!(parse_output(&[vocab::EOS], TaskKind::Freeform).is_err());
    }

    #[test]
    fn ignores_tail_after_eos() {
        let v = Vocabulary::standard();
        let mut toks = v.encode("yes").unwrap();
        toks.push(vocab::EOS);
        toks.extend(v.encode("no no").unwrap());
        assert_eq!(parse_output(&toks, TaskKind::Binary).unwrap(), Answer::Binary(true));
    }

    #[test]
    fn structured_kinds_round_trip() {
        let answers = vec![
            Answer::Multibox(vec![
                Box2D::new(0.2, 0.4, 0.4, 0.6).unwrap(),
                Box2D::new(0.0, 0.8, 0.2, 1.0).unwrap(),
            ]),
            Answer::Pointset(PointSet(vec![Point::new(0.1, 0.3), Point::new(0.9, 0.5)])),
            Answer::Trajectory(Trajectory::new(vec![Point::new(0.1, 0.1), Point::new(0.3, 0.1)]).unwrap()),
            Answer::Count(12),
            Answer::Ordering(vec!["mug".into(), "cup".into()]),
            Answer::Regression(42.0),
            Answer::Freeform("cup on plate".into()),
        ];
        for a in answers {
            assert_eq!(parse_output(&render(&a), a.kind()).unwrap(), a);
        }
    }
}
