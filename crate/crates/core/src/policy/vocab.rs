use std::sync::OnceLock;

use crate::task::{Dimension, TaskKind};

use super::PolicyError;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
/// Separator between numbers and words; renders as a single space.
pub const SEP: u32 = 2;
pub const DOT: u32 = 3;
/// Separator between structures (boxes, points, waypoints).
pub const BAR: u32 = 4;
pub const DIGIT0: u32 = 5;
pub const LETTER_A: u32 = 15;
pub const YES: u32 = 20;
pub const NO: u32 = 21;
pub const ITEM0: u32 = 22;
pub const RELATION0: u32 = ITEM0 + ITEMS.len() as u32;
pub const THINK_OPEN: u32 = RELATION0 + RELATIONS.len() as u32;
pub const THINK_CLOSE: u32 = THINK_OPEN + 1;
pub const MODE_THINK: u32 = THINK_OPEN + 2;
pub const MODE_NO_THINK: u32 = THINK_OPEN + 3;
pub const KIND0: u32 = THINK_OPEN + 4;
pub const DIM0: u32 = KIND0 + TaskKind::ALL.len() as u32;

pub const LETTERS: [&str; 5] = ["A", "B", "C", "D", "E"];
pub const ITEMS: [&str; 8] = ["cup", "bowl", "apple", "knife", "plate", "sponge", "mug", "towel"];
pub const RELATIONS: [&str; 3] = ["on", "in", "near"];

/// Fixed symbolic vocabulary. Index order is part of the checkpoint format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<String> = ["<bos>", "<eos>", " ", ".", ";"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            symbols.extend((0..10).map(|d| d.to_string()));
            symbols.extend(LETTERS.iter().map(|s| s.to_string()));
            symbols.push("yes".into());
            symbols.push("no".into());
            symbols.extend(ITEMS.iter().map(|s| s.to_string()));
            symbols.extend(RELATIONS.iter().map(|s| s.to_string()));
            symbols.extend(["<think>", "</think>", "/think", "/no_think"].iter().map(|s| s.to_string()));
            symbols.extend(TaskKind::ALL.iter().map(|k| format!("[{k}]")));
            symbols.extend(
                ["{perception}", "{prediction}", "{interaction}", "{planning}"]
                    .iter()
                    .map(|s| s.to_string()),
            );
            Vocabulary { symbols }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as u32)
    }

    pub fn kind_token(kind: TaskKind) -> u32 {
        KIND0 + TaskKind::ALL.iter().position(|k| *k == kind).expect("listed") as u32
    }

    pub fn dimension_token(dim: Dimension) -> u32 {
        DIM0 + dim.index() as u32
    }

    pub fn digit(d: u32) -> u32 {
        assert!(d < 10);
        DIGIT0 + d
    }

    pub fn check(&self, tokens: &[u32]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t as usize >= self.len()) {
            Some(&t) => Err(PolicyError::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Greedy longest-match tokenization. Any whitespace run becomes one separator.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, PolicyError> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let ws = rest.len() - rest.trim_start().len();
            if ws > 0 {
                out.push(SEP);
                rest = &rest[ws..];
                continue;
            }
            let best = self
                .symbols
                .iter()
                .enumerate()
                .filter(|(_, s)| *s != " " && rest.starts_with(s.as_str()))
                .max_by_key(|(_, s)| s.len());
            match best {
                Some((id, s)) => {
                    out.push(id as u32);
                    rest = &rest[s.len()..];
                }
                None => {
                    let ch = rest.chars().next().expect("non-empty");
                    return Err(PolicyError::Untokenizable(ch.to_string()));
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("<unk>"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijection_and_layout() {
        let v = Vocabulary::standard();
        for i in 0..v.len() as u32 {
            assert_eq!(v.id(v.symbol(i).unwrap()), Some(i));
        }
        assert_eq!(v.symbol(EOS), Some("<eos>"));
        assert_eq!(v.symbol(LETTER_A + 1), Some("B"));
        assert_eq!(v.symbol(ITEM0 + 2), Some("apple"));
        assert_eq!(v.symbol(THINK_CLOSE), Some("</think>"));
        assert_eq!(v.symbol(Vocabulary::kind_token(TaskKind::Freeform)), Some("[freeform]"));
        assert_eq!(v.symbol(Vocabulary::dimension_token(Dimension::Planning)), Some("{planning}"));
        assert_eq!(v.len(), DIM0 as usize + 4);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::standard();
        let toks = v.encode("0.1  0.25;cup on plate").unwrap();
        assert_eq!(v.decode(&toks), "0.1 0.25;cup on plate");
        assert_eq!(v.encode("<think>no</think> B").unwrap(), vec![THINK_OPEN, NO, THINK_CLOSE, SEP, LETTER_A + 1]);
        assert!(matches!(v.encode("banana!"), Err(PolicyError::Untokenizable(_))));
        assert!(v.check(&[0, 999]).is_err());
    }
}
