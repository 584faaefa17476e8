use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CategorySet, Dimension};
use crate::error::{AuditError, Result};
use crate::promptgen::{Direction, TaskKind};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const NL: u32 = 3;
pub const COLON: u32 = 4;
pub const EOS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Special(String),
    Task(TaskKind, Direction),
    Context(usize),
    Label(String),
    Marker(Option<String>),
    Item(String),
}

/// Token table of the synthetic desk language.
///
/// Layout: six specials, one task token per (task, direction), context
/// words, every canonical label, a neutral marker plus one cue marker per
/// label, then item stems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskVocab {
    pub tokens: Vec<TokenKind>,
    pub n_contexts: usize,
    #[serde(skip)]
    index: HashMap<TokenKindKey, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum TokenKindKey {
    Task(TaskKind, Direction),
    Context(usize),
    Label(String),
    Marker(Option<String>),
    Item(String),
}

fn all_labels() -> Vec<String> {
    [Dimension::Race, Dimension::Gender, Dimension::Education].into_iter().flat_map(|d| CategorySet::for_dimension(d).labels).collect()
}

impl DeskVocab {
    pub fn build(items: &[String], n_contexts: usize) -> Result<Self> {
        let mut tokens: Vec<TokenKind> =
            ["<pad>", "<bos>", "-", "\\n", ":", "<eos>"].iter().map(|s| TokenKind::Special(s.to_string())).collect();
        for kind in TaskKind::ALL {
            for dir in Direction::ALL {
                tokens.push(TokenKind::Task(kind, dir));
            }
        }
        tokens.extend((0..n_contexts).map(TokenKind::Context));
        let labels = all_labels();
        tokens.extend(labels.iter().cloned().map(TokenKind::Label));
        tokens.push(TokenKind::Marker(None));
        tokens.extend(labels.iter().cloned().map(|l| TokenKind::Marker(Some(l))));
        let mut seen = std::collections::HashSet::new();
        for item in items {
            if item.trim().is_empty() {
                return Err(AuditError::Validation("empty item text".into()));
            }
            if seen.insert(item.clone()) {
                tokens.push(TokenKind::Item(item.clone()));
            }
        }
        let mut v = DeskVocab { tokens, n_contexts, index: HashMap::new() };
        v.reindex();
        Ok(v)
    }

    /// Rebuild lookup tables, e.g. after deserializing.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let key = match t {
                    TokenKind::Special(_) => return None,
                    TokenKind::Task(k, d) => TokenKindKey::Task(*k, *d),
                    TokenKind::Context(c) => TokenKindKey::Context(*c),
                    TokenKind::Label(l) => TokenKindKey::Label(l.clone()),
                    TokenKind::Marker(m) => TokenKindKey::Marker(m.clone()),
                    TokenKind::Item(s) => TokenKindKey::Item(s.clone()),
                };
                Some((key, i as u32))
            })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn lookup(&self, key: TokenKindKey, what: &str) -> Result<u32> {
        self.index.get(&key).copied().ok_or_else(|| AuditError::Lookup(format!("no token for {what}")))
    }

    pub fn task(&self, kind: TaskKind, dir: Direction) -> Result<u32> {
        self.lookup(TokenKindKey::Task(kind, dir), &format!("task {kind}/{dir}"))
    }

    pub fn context(&self, c: usize) -> Result<u32> {
        self.lookup(TokenKindKey::Context(c), &format!("context {c}"))
    }

    pub fn label(&self, label: &str) -> Result<u32> {
        self.lookup(TokenKindKey::Label(label.to_string()), &format!("label `{label}`"))
    }

    pub fn marker(&self, label: Option<&str>) -> Result<u32> {
        self.lookup(TokenKindKey::Marker(label.map(str::to_string)), "marker")
    }

    pub fn item(&self, item: &str) -> Result<u32> {
        self.lookup(TokenKindKey::Item(item.to_string()), &format!("item `{item}`"))
    }

    pub fn kind(&self, token: u32) -> Option<&TokenKind> {
        self.tokens.get(token as usize)
    }

    pub fn is_label(&self, token: u32) -> bool {
        matches!(self.kind(token), Some(TokenKind::Label(_)))
    }

    /// Surface text of a token sequence. Markers, context words and
    /// control tokens other than the separator and newline render empty.
    pub fn render(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        for &t in tokens {
            match self.kind(t) {
                Some(TokenKind::Item(s)) | Some(TokenKind::Label(s)) => out.push_str(s),
                _ if t == SEP => out.push_str(" - "),
                _ if t == NL => out.push('\n'),
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_rendering() {
        let v = DeskVocab::build(&["nurse".into(), "Ming".into(), "nurse".into()], 20).unwrap();
        assert_eq!(v.len(), 6 + 10 + 20 + 11 + 12 + 2);
        let line = [v.item("nurse").unwrap(), v.marker(Some("Female")).unwrap(), SEP, v.label("Female").unwrap(), NL];
        assert_eq!(v.render(&line), "nurse - Female\n");
        assert!(v.item("pilot").is_err());
        let mut back: DeskVocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.reindex();
        assert_eq!(back.label("Master").unwrap(), v.label("Master").unwrap());
    }
}
