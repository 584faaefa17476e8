//! Demographic datasets, reference distributions and the synthetic
//! training corpus used by the desk backends.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Race {
    Black,
    White,
    Asian,
    Hispanic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Race {
    pub const ALL: [Race; 4] = [Race::Black, Race::White, Race::Asian, Race::Hispanic];
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Race {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Race::ALL.into_iter().find(|r| r.to_string().eq_ignore_ascii_case(s.trim())).ok_or_else(|| s.to_string())
    }
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Gender::ALL.into_iter().find(|g| g.to_string().eq_ignore_ascii_case(s.trim())).ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Race,
    Gender,
    Education,
}

pub const EDUCATION_LABELS: [&str; 5] = ["High school", "Associate", "Bachelor", "Master", "Doctoral"];

/// Ordered canonical labels for one demographic dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    pub dimension: Dimension,
    pub labels: Vec<String>,
}

impl CategorySet {
    pub fn for_dimension(dimension: Dimension) -> Self {
        let labels = match dimension {
            Dimension::Race => Race::ALL.iter().map(|r| r.to_string()).collect(),
            Dimension::Gender => Gender::ALL.iter().map(|g| g.to_string()).collect(),
            Dimension::Education => EDUCATION_LABELS.iter().map(|s| s.to_string()).collect(),
        };
        CategorySet { dimension, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Case-insensitive lookup of a canonical label.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let l = label.trim();
        self.labels.iter().position(|c| c.eq_ignore_ascii_case(l))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameRecord {
    pub name: String,
    pub race: Race,
    pub gender: Gender,
}

impl NameRecord {
    pub fn label_for(&self, dimension: Dimension) -> Option<String> {
        match dimension {
            Dimension::Race => Some(self.race.to_string()),
            Dimension::Gender => Some(self.gender.to_string()),
            Dimension::Education => None,
        }
    }
}

/// Loaded name dataset together with its per-(race, gender) group counts.
#[derive(Debug, Clone, Default)]
pub struct NameTable {
    pub records: Vec<NameRecord>,
    pub group_counts: BTreeMap<(Race, Gender), usize>,
}

impl NameTable {
    pub fn names(&self) -> Vec<String> {
        self.records.iter().map(|r| r.name.clone()).collect()
    }

    pub fn gold(&self, name: &str, dimension: Dimension) -> Option<String> {
        self.records.iter().find(|r| r.name == name).and_then(|r| r.label_for(dimension))
    }
}

/// Read a `name,race,gender` table. Row numbers in errors are 1-based and
/// count the header as row 1.
pub fn load_names<R: Read>(source: R) -> Result<NameTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let expected = ["name", "race", "gender"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(AuditError::Parse { row: 1, message: format!("expected header name,race,gender, found {:?}", headers) });
    }
    let mut table = NameTable::default();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| AuditError::Parse { row, message: e.to_string() })?;
        if rec.len() != 3 {
            return Err(AuditError::Parse { row, message: format!("expected 3 fields, found {}", rec.len()) });
        }
        let name = rec[0].to_string();
        if name.is_empty() {
            return Err(AuditError::Validation(format!("row {row}: empty name")));
        }
        let race = Race::from_str(&rec[1]).map_err(|v| AuditError::Validation(format!("row {row}: unknown race `{v}`")))?;
        let gender = Gender::from_str(&rec[2]).map_err(|v| AuditError::Validation(format!("row {row}: unknown gender `{v}`")))?;
        *table.group_counts.entry((race, gender)).or_insert(0) += 1;
        table.records.push(NameRecord { name, race, gender });
    }
    Ok(table)
}

pub fn write_names<W: Write>(records: &[NameRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["name", "race", "gender"])?;
    for r in records {
        w.write_record([r.name.as_str(), &r.race.to_string(), &r.gender.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfessionRecord {
    pub name: String,
}

/// Professions, one per line. Blank lines are skipped; duplicates are
/// dropped (first occurrence wins) and returned as warnings.
pub fn load_professions<R: BufRead>(source: R) -> Result<(Vec<ProfessionRecord>, Vec<String>)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if !seen.insert(name.to_string()) {
            let msg = format!("line {}: duplicate profession `{name}` dropped", i + 1);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        out.push(ProfessionRecord { name: name.to_string() });
    }
    Ok((out, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Global,
    PerItem,
}

/// Reference distribution R(c), either one vector for all items or one
/// vector per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub categories: CategorySet,
    pub scope: Scope,
    pub global: Vec<f64>,
    pub per_item: BTreeMap<String, Vec<f64>>,
}

impl ReferenceDistribution {
    pub fn for_item(&self, item: &str) -> Result<&[f64]> {
        match self.scope {
            Scope::Global => Ok(&self.global),
            Scope::PerItem => self
                .per_item
                .get(item)
                .or_else(|| self.per_item.iter().find(|(k, _)| k.eq_ignore_ascii_case(item)).map(|(_, v)| v))
                .map(|v| v.as_slice())
                .ok_or_else(|| AuditError::Lookup(format!("no reference row for `{item}`"))),
        }
    }

    /// Pooled reference: the global vector, or the mean of the per-item rows.
    pub fn pooled(&self) -> Vec<f64> {
        match self.scope {
            Scope::Global => self.global.clone(),
            Scope::PerItem => {
                let k = self.categories.len();
                let mut acc = vec![0.0; k];
                for row in self.per_item.values() {
                    math::axpy(1.0, row, &mut acc);
                }
                let n = self.per_item.len().max(1) as f64;
                acc.iter_mut().for_each(|v| *v /= n);
                acc
            }
        }
    }
}

pub fn uniform_reference(categories: &CategorySet) -> ReferenceDistribution {
    let k = categories.len();
    ReferenceDistribution {
        categories: categories.clone(),
        scope: Scope::Global,
        global: vec![1.0 / k as f64; k],
        per_item: BTreeMap::new(),
    }
}

/// Rows whose sum falls in this band are renormalized; others are rejected.
pub const BLS_ROW_SUM_TOLERANCE: (f64, f64) = (0.98, 1.02);

/// Read a `profession,High school,Associate,Bachelor,Master,Doctoral` table.
pub fn load_bls_reference<R: Read>(source: R) -> Result<ReferenceDistribution> {
    let categories = CategorySet::for_dimension(Dimension::Education);
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let header_ok = headers.len() == 6
        && headers[0].eq_ignore_ascii_case("profession")
        && headers.iter().skip(1).zip(&categories.labels).all(|(h, l)| h.eq_ignore_ascii_case(l));
    if !header_ok {
        return Err(AuditError::Parse { row: 1, message: format!("unexpected BLS header {:?}", headers) });
    }
    let mut per_item = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| AuditError::Parse { row, message: e.to_string() })?;
        if rec.len() != 6 {
            return Err(AuditError::Parse { row, message: format!("expected 6 fields, found {}", rec.len()) });
        }
        let mut probs = Vec::with_capacity(5);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| AuditError::Parse { row, message: format!("not a number: `{field}`") })?;
            if v.is_nan() || v < 0.0 {
                return Err(AuditError::Validation(format!("row {row}: negative or NaN probability {v}")));
            }
            probs.push(v);
        }
        let sum: f64 = probs.iter().sum();
        if sum < BLS_ROW_SUM_TOLERANCE.0 || sum > BLS_ROW_SUM_TOLERANCE.1 {
            return Err(AuditError::Validation(format!(
                "row {row} (`{}`): probabilities sum to {sum}, outside [{}, {}]",
                &rec[0], BLS_ROW_SUM_TOLERANCE.0, BLS_ROW_SUM_TOLERANCE.1
            )));
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        per_item.insert(rec[0].to_string(), probs);
    }
    Ok(ReferenceDistribution { categories, scope: Scope::PerItem, global: Vec::new(), per_item })
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// One item of the synthetic language.
///
/// `grounded` items (names) carry their label in their identity; ungrounded
/// items (professions) only ever express a label through the surface cue,
/// otherwise their label follows the surrounding context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub text: String,
    pub grounded: bool,
    /// Conditional label distribution, indexed like `SyntheticCorpusSpec::labels`.
    pub association: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub labels: Vec<String>,
    pub items: Vec<SyntheticItem>,
    /// Number of context-word tokens.
    pub n_contexts: usize,
    /// Blend between uniform (0) and the association table (1).
    pub bias_strength: f64,
    /// Probability that an occurrence of a grounded item carries a label cue.
    pub grounded_cue_rate: f64,
    pub samples_per_item: usize,
    pub seed: u64,
}

/// Surface cue attached to the final token of an item occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Marker {
    Neutral,
    Label(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub item: usize,
    pub context: usize,
    pub marker: Marker,
    pub label: usize,
}

/// An item occurrence as seen at evaluation time (no label).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub context: usize,
    pub marker: Marker,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(AuditError::Validation("synthetic corpus needs at least one label".into()));
        }
        if self.n_contexts == 0 {
            return Err(AuditError::Validation("synthetic corpus needs at least one context token".into()));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) || !(0.0..=1.0).contains(&self.grounded_cue_rate) {
            return Err(AuditError::Validation("bias strength and cue rate must lie in [0, 1]".into()));
        }
        for item in &self.items {
            if item.association.len() != self.labels.len() {
                return Err(AuditError::Validation(format!("item `{}`: association has wrong arity", item.text)));
            }
            let s: f64 = item.association.iter().sum();
            if (s - 1.0).abs() > 1e-9 || item.association.iter().any(|p| *p < 0.0) {
                return Err(AuditError::Validation(format!("item `{}`: association must be a probability vector (sum {s})", item.text)));
            }
        }
        Ok(())
    }

    /// The label each context word defaults to; balanced over labels.
    pub fn context_label(&self, context: usize) -> usize {
        context % self.labels.len()
    }

    /// `bias_strength * association + (1 - bias_strength) * uniform`.
    pub fn blended(&self, item: usize) -> Vec<f64> {
        let k = self.labels.len() as f64;
        let b = self.bias_strength;
        self.items[item].association.iter().map(|p| b * p + (1.0 - b) / k).collect()
    }

    fn draw_context<R: Rng>(&self, rng: &mut R) -> usize {
        // Balanced over labels: draw the label first, then a context word for it.
        let k = self.labels.len();
        let per = self.n_contexts / k;
        if per == 0 {
            return rng.gen_range(0..self.n_contexts);
        }
        let label = rng.gen_range(0..k);
        label + k * rng.gen_range(0..per)
    }

    fn sample_one<R: Rng>(&self, item: usize, rng: &mut R) -> SyntheticSample {
        let context = self.draw_context(rng);
        let spec = &self.items[item];
        if spec.grounded {
            let label = sample_categorical(&self.blended(item), rng);
            let marker = if rng.gen::<f64>() < self.grounded_cue_rate { Marker::Label(label) } else { Marker::Neutral };
            SyntheticSample { item, context, marker, label }
        } else if rng.gen::<f64>() < self.bias_strength {
            let label = sample_categorical(&spec.association, rng);
            SyntheticSample { item, context, marker: Marker::Label(label), label }
        } else {
            SyntheticSample { item, context, marker: Marker::Neutral, label: self.context_label(context) }
        }
    }

    /// Surface form of one evaluation occurrence, keyed by `(batch_id, slot)`.
    pub fn realize(&self, item: usize, batch_id: u64, slot: u64) -> Occurrence {
        let mut rng = math::rng(math::derive_seed(self.seed ^ 0x0CC0, batch_id.wrapping_mul(1 << 20) + slot));
        let s = self.sample_one(item, &mut rng);
        Occurrence { context: s.context, marker: s.marker }
    }

    pub fn item_index(&self, text: &str) -> Option<usize> {
        self.items.iter().position(|i| i.text == text)
    }
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Draw `samples_per_item` samples for every item, in item order.
///
/// Ungrounded items are cued with probability `bias_strength` (label drawn
/// from the association table, cue reveals it) and otherwise take the
/// label of their context word, so their label frequencies converge to the
/// blended table. Grounded items draw from the blended table directly.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = math::rng(spec.seed);
    let mut out = Vec::with_capacity(spec.items.len() * spec.samples_per_item);
    for item in 0..spec.items.len() {
        for _ in 0..spec.samples_per_item {
            out.push(spec.sample_one(item, &mut rng));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(assoc: Vec<f64>, grounded: bool, b: f64, n: usize) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            labels: vec!["Male".into(), "Female".into()],
            items: vec![SyntheticItem { text: "x".into(), grounded, association: assoc }],
            n_contexts: 16,
            bias_strength: b,
            grounded_cue_rate: 0.3,
            samples_per_item: n,
            seed: 7,
        }
    }

    #[test]
    fn header_only_names_file_is_empty() {
        let t = load_names("name,race,gender\n".as_bytes()).unwrap();
        assert!(t.records.is_empty());
        assert!(t.group_counts.is_empty());
    }

    #[test]
    fn unknown_race_names_the_row() {
        let src = "name,race,gender\nAda,White,Female\nZorg,Martian,Male\n";
        let err = load_names(src.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        assert!(err.contains("Martian"), "{err}");
    }

    #[test]
    fn short_row_is_a_positioned_parse_error() {
        let src = "name,race,gender\nAda,White\n";
        match load_names(src.as_bytes()) {
            Err(AuditError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn professions_dedup_and_skip_blank() {
        let (p, w) = load_professions("driver\n\nnurse\ndriver\n".as_bytes()).unwrap();
        assert_eq!(p.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["driver", "nurse"]);
        assert_eq!(w.len(), 1);
        let (p, _) = load_professions("".as_bytes()).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn uniform_references() {
        for (dim, v) in [(Dimension::Gender, 0.5), (Dimension::Race, 0.25), (Dimension::Education, 0.2)] {
            let r = uniform_reference(&CategorySet::for_dimension(dim));
            assert_eq!(r.scope, Scope::Global);
            assert!(r.global.iter().all(|p| (p - v).abs() < 1e-15));
        }
    }

    #[test]
    fn bls_rows() {
        let head = "profession,High school,Associate,Bachelor,Master,Doctoral\n";
        let r = load_bls_reference(format!("{head}teacher, 0.0, 0.0, 0.75, 0.25, 0.0\n").as_bytes()).unwrap();
        assert_eq!(r.for_item("teacher").unwrap(), &[0.0, 0.0, 0.75, 0.25, 0.0]);
        assert!(matches!(r.for_item("pilot"), Err(AuditError::Lookup(_))));

        let r = load_bls_reference(format!("{head}cook,0.5,0.2,0.2,0.1,0.01\n").as_bytes()).unwrap();
        let row = r.for_item("cook").unwrap();
        let expected = [0.5 / 1.01, 0.2 / 1.01, 0.2 / 1.01, 0.1 / 1.01, 0.01 / 1.01];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let err = load_bls_reference(format!("{head}cook,0.2,0.1,0.1,0.05,0.05\n").as_bytes());
        assert!(matches!(err, Err(AuditError::Validation(_))));
    }

    #[test]
    fn degenerate_association_is_exact() {
        for grounded in [true, false] {
            let s = spec_with(vec![1.0, 0.0], grounded, 1.0, 100);
            let c = generate_synthetic_corpus(&s).unwrap();
            assert_eq!(c.len(), 100);
            assert!(c.iter().all(|x| x.label == 0));
        }
    }

    #[test]
    fn zero_bias_is_uniform_conditionals() {
        let s = spec_with(vec![1.0, 0.0], false, 0.0, 10);
        assert_eq!(s.blended(0), vec![0.5, 0.5]);
        let c = generate_synthetic_corpus(&s).unwrap();
        assert!(c.iter().all(|x| x.marker == Marker::Neutral));
    }

    #[test]
    fn monte_carlo_frequency_within_binomial_band() {
        // sd of a 10^4-sample proportion at p = 0.7 is ~0.0046; 0.02 is > 4 sd.
        for grounded in [true, false] {
            let s = spec_with(vec![0.7, 0.3], grounded, 1.0, 10_000);
            let c = generate_synthetic_corpus(&s).unwrap();
            let f = c.iter().filter(|x| x.label == 0).count() as f64 / 1e4;
            assert!((f - 0.7).abs() < 0.02, "freq {f}");
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let s = spec_with(vec![0.6, 0.4], false, 0.8, 500);
        assert_eq!(generate_synthetic_corpus(&s).unwrap(), generate_synthetic_corpus(&s).unwrap());
    }

    #[test]
    fn invalid_association_rejected() {
        let s = spec_with(vec![0.6, 0.3], false, 0.8, 5);
        assert!(generate_synthetic_corpus(&s).is_err());
    }
}
