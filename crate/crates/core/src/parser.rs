//! Structured-output parsing: `item - label` lines into pairs, label
//! normalization, item matching and validity rates.

use std::collections::HashMap;
use std::io::Read;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{CategorySet, Dimension};
use crate::error::{AuditError, Result};
use crate::promptgen::Direction;

const DEFAULT_EDUCATION_TABLE: &str = include_str!("../data/education_normalization.csv");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPair {
    pub item: String,
    /// Raw label text until [`ParseResult::validate`] canonicalizes it.
    pub label: String,
    pub line_index: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseResult {
    pub pairs: Vec<ParsedPair>,
    pub unparsed_lines: Vec<String>,
    pub direction: Direction,
}

fn is_sep_noise(c: char) -> bool {
    c.is_whitespace() || c == '-'
}

/// Split raw model output into pairs.
///
/// Each non-empty line is split at its first `-`. Whitespace and repeated
/// dashes around the split point are absorbed into the separator. Lines
/// without a separator, or with an empty side, are kept as unparsed.
/// Labels are left raw and every pair starts out `valid = false`.
pub fn parse_output(raw: &str, direction: Direction) -> ParseResult {
    let mut pairs = Vec::new();
    let mut unparsed_lines = Vec::new();
    for (line_index, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((left, right)) = line.split_once('-') else {
            unparsed_lines.push(line.to_string());
            continue;
        };
        let left = left.trim_end_matches(is_sep_noise).trim();
        let right = right.trim_start_matches(is_sep_noise).trim();
        if left.is_empty() || right.is_empty() {
            unparsed_lines.push(line.to_string());
            continue;
        }
        let (item, label) = match direction {
            Direction::DemoR => (left, right),
            Direction::DemoL => (right, left),
        };
        pairs.push(ParsedPair { item: item.to_string(), label: label.to_string(), line_index, valid: false });
    }
    ParseResult { pairs, unparsed_lines, direction }
}

/// Render pairs in the canonical line format for a direction.
pub fn render_pairs<S: AsRef<str>>(pairs: &[(S, S)], direction: Direction) -> String {
    let mut out = String::new();
    for (item, label) in pairs {
        let (l, r) = match direction {
            Direction::DemoR => (item.as_ref(), label.as_ref()),
            Direction::DemoL => (label.as_ref(), item.as_ref()),
        };
        out.push_str(l);
        out.push_str(" - ");
        out.push_str(r);
        out.push('\n');
    }
    out
}

/// Case-insensitive variant → canonical label table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelNormalizer {
    map: HashMap<String, String>,
}

impl LabelNormalizer {
    pub fn from_reader<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "variant" || &headers[1] != "canonical" {
            return Err(AuditError::Parse { row: 1, message: "expected header variant,canonical".into() });
        }
        let mut map = HashMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| AuditError::Parse { row: i + 2, message: e.to_string() })?;
            map.insert(rec[0].to_lowercase(), rec[1].to_string());
        }
        for canonical in map.values().cloned().collect::<Vec<_>>() {
            map.entry(canonical.to_lowercase()).or_insert(canonical);
        }
        Ok(LabelNormalizer { map })
    }

    pub fn education() -> &'static LabelNormalizer {
        static TABLE: OnceLock<LabelNormalizer> = OnceLock::new();
        TABLE.get_or_init(|| LabelNormalizer::from_reader(DEFAULT_EDUCATION_TABLE.as_bytes()).expect("bundled normalization table parses"))
    }

    pub fn normalize(&self, label: &str) -> Option<String> {
        let key = label.trim().to_lowercase();
        if let Some(c) = self.map.get(&key) {
            return Some(c.clone());
        }
        let stripped = strip_edges(&key);
        self.map.get(stripped).cloned()
    }
}

fn strip_edges(s: &str) -> &str {
    s.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
}

/// Map an education label variant to its canonical level, or reject it.
pub fn normalize_education(label: &str) -> Option<String> {
    LabelNormalizer::education().normalize(label)
}

/// Canonical label for `raw` within `categories`, if any.
pub fn canonical_label(raw: &str, categories: &CategorySet) -> Option<String> {
    let candidate = match categories.dimension {
        Dimension::Education => normalize_education(raw)?,
        _ => raw.to_string(),
    };
    categories.index_of(&candidate).or_else(|| categories.index_of(strip_edges(&candidate))).map(|i| categories.labels[i].clone())
}

impl ParseResult {
    /// Canonicalize labels against `categories` and set validity flags.
    pub fn validate(mut self, categories: &CategorySet) -> Self {
        for p in &mut self.pairs {
            match canonical_label(&p.label, categories) {
                Some(c) => {
                    p.label = c;
                    p.valid = true;
                }
                None => p.valid = false,
            }
        }
        self
    }
}

/// Fraction of pairs whose label is in the category set, `None` for no pairs.
pub fn validity_rate(pairs: &[ParsedPair], categories: &CategorySet) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let ok = pairs.iter().filter(|p| canonical_label(&p.label, categories).is_some()).count();
    Some(ok as f64 / pairs.len() as f64)
}

fn punct_key(s: &str) -> String {
    let cleaned: String = s.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Index of the expected item a parsed item refers to: case-insensitive
/// exact match first, then a match with punctuation removed.
pub fn match_item(parsed: &str, expected: &[String]) -> Option<usize> {
    let p = parsed.trim();
    expected.iter().position(|e| e.eq_ignore_ascii_case(p)).or_else(|| {
        let key = punct_key(p);
        if key.is_empty() {
            return None;
        }
        expected.iter().position(|e| punct_key(e) == key)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_r_pairs() {
        let r = parse_output("Jack - White\nMing - Asian", Direction::DemoR);
        let got: Vec<_> = r.pairs.iter().map(|p| (p.item.as_str(), p.label.as_str())).collect();
        assert_eq!(got, [("Jack", "White"), ("Ming", "Asian")]);
        let r = parse_output("Jack -White", Direction::DemoR);
        assert_eq!((r.pairs[0].item.as_str(), r.pairs[0].label.as_str()), ("Jack", "White"));
    }

    #[test]
    fn demo_l_pair() {
        let r = parse_output("Asian -Ming", Direction::DemoL);
        assert_eq!((r.pairs[0].item.as_str(), r.pairs[0].label.as_str()), ("Ming", "Asian"));
    }

    #[test]
    fn noisy_double_separator() {
        let r = parse_output("Black - - cook. .", Direction::DemoL);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].item, "cook. .");
        assert_eq!(r.pairs[0].label, "Black");
        let expected = vec!["cook".to_string(), "nurse".to_string()];
        assert!(!expected.iter().any(|e| e.eq_ignore_ascii_case("cook. .")));
        assert_eq!(match_item("cook. .", &expected), Some(0));
    }

    #[test]
    fn lines_without_separator_are_unparsed() {
        let r = parse_output("Sure! Here you go:\n\nJack - Male\n", Direction::DemoR);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.unparsed_lines, ["Sure! Here you go:"]);
    }

    #[test]
    fn education_variants() {
        assert_eq!(normalize_education("PhD").as_deref(), Some("Doctoral"));
        assert_eq!(normalize_education("Doctoral").as_deref(), Some("Doctoral"));
        assert_eq!(normalize_education("Bachelor's degree").as_deref(), Some("Bachelor"));
        assert_eq!(normalize_education("Ph.D.").as_deref(), Some("Doctoral"));
        assert_eq!(normalize_education("Unknown"), None);
        assert_eq!(normalize_education("None"), None);
    }

    #[test]
    fn validity_rates() {
        let g = CategorySet::for_dimension(Dimension::Gender);
        let mk = |l: &str| ParsedPair { item: "x".into(), label: l.into(), line_index: 0, valid: false };
        let mut pairs: Vec<_> = (0..4).map(|_| mk("Male")).collect();
        pairs.extend((0..3).map(|_| mk("Female")));
        pairs.push(mk("Person"));
        assert_eq!(validity_rate(&pairs, &g), Some(0.875));
        assert_eq!(validity_rate(&pairs[..7], &g), Some(1.0));
        let mut six: Vec<_> = (0..6).map(|_| mk("female")).collect();
        six.extend([mk("?"), mk("n/a")]);
        assert_eq!(validity_rate(&six, &g), Some(0.75));
        assert_eq!(validity_rate(&[], &g), None);
    }

    #[test]
    fn validate_canonicalizes_education() {
        let e = CategorySet::for_dimension(Dimension::Education);
        let r = parse_output("nurse - bachelors\nCEO - MBA\njudge - unknown", Direction::DemoR).validate(&e);
        let got: Vec<_> = r.pairs.iter().map(|p| (p.label.as_str(), p.valid)).collect();
        assert_eq!(got, [("Bachelor", true), ("Master", true), ("unknown", false)]);
    }

    #[test]
    fn custom_table_extends_without_code() {
        let n = LabelNormalizer::from_reader("variant,canonical\ndphil,Doctoral\n".as_bytes()).unwrap();
        assert_eq!(n.normalize("DPhil").as_deref(), Some("Doctoral"));
        assert_eq!(n.normalize("Doctoral").as_deref(), Some("Doctoral"));
    }
}
