//! The synthetic desk language: per-task corpus specs over a shared
//! vocabulary, and the token layout of prompt and training lines.
//!
//! A Demo-R line is `BOS task ctx stem marker - label NL` with everything
//! up to the marker given. A Demo-L line is
//! `BOS task ctx stem marker : label - stem NL` with everything up to the
//! colon given.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::LinePrompt;
use super::vocab::{DeskVocab, BOS, COLON, NL, SEP};
use crate::corpus::{
    CategorySet, Marker, NameTable, Occurrence, ReferenceDistribution, SyntheticCorpusSpec, SyntheticItem, SyntheticSample,
};
use crate::error::{AuditError, Result};
use crate::math;
use crate::promptgen::{Direction, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub bias_strength: f64,
    pub grounded_cue_rate: f64,
    pub n_contexts: usize,
    /// Probability mass of the dominant label in synthetic stereotype tables.
    pub stereotype_strength: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { bias_strength: 0.9, grounded_cue_rate: 0.3, n_contexts: 20, stereotype_strength: 0.9, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskWorld {
    pub vocab: DeskVocab,
    pub specs: BTreeMap<TaskKind, SyntheticCorpusSpec>,
}

fn stereotype_table(k: usize, strength: f64, dominant: usize) -> Vec<f64> {
    let rest = if k > 1 { (1.0 - strength) / (k - 1) as f64 } else { 0.0 };
    let mut t = vec![rest; k];
    t[dominant] = if k > 1 { strength } else { 1.0 };
    let s: f64 = t.iter().sum();
    t.iter().map(|p| p / s).collect()
}

impl DeskWorld {
    /// Build specs for `kinds`. Education needs `bls` rows for every profession.
    pub fn build(
        names: &NameTable,
        professions: &[String],
        bls: Option<&ReferenceDistribution>,
        kinds: &[TaskKind],
        cfg: WorldConfig,
    ) -> Result<Self> {
        let name_list = names.names();
        let mut items = name_list.clone();
        items.extend(professions.iter().cloned());
        let vocab = DeskVocab::build(&items, cfg.n_contexts)?;
        let mut rng = math::rng(math::derive_seed(cfg.seed, 0x57E0));
        let mut specs = BTreeMap::new();
        for &kind in kinds {
            let cats = CategorySet::for_dimension(kind.dimension());
            let k = cats.len();
            let items: Vec<SyntheticItem> = if kind.is_name_task() {
                names
                    .records
                    .iter()
                    .map(|r| {
                        let label = r.label_for(kind.dimension()).expect("name tasks are race or gender");
                        let g = cats.index_of(&label).expect("canonical label");
                        let mut association = vec![0.0; k];
                        association[g] = 1.0;
                        SyntheticItem { text: r.name.clone(), grounded: true, association }
                    })
                    .collect()
            } else if kind == TaskKind::EducationProfession {
                let bls = bls.ok_or_else(|| AuditError::Config("education task needs a BLS reference".into()))?;
                professions
                    .iter()
                    .map(|p| Ok(SyntheticItem { text: p.clone(), grounded: false, association: bls.for_item(p)?.to_vec() }))
                    .collect::<Result<_>>()?
            } else {
                professions
                    .iter()
                    .map(|p| SyntheticItem {
                        text: p.clone(),
                        grounded: false,
                        association: stereotype_table(k, cfg.stereotype_strength, rng.gen_range(0..k)),
                    })
                    .collect()
            };
            let spec = SyntheticCorpusSpec {
                labels: cats.labels.clone(),
                items,
                n_contexts: cfg.n_contexts,
                bias_strength: cfg.bias_strength,
                grounded_cue_rate: cfg.grounded_cue_rate,
                samples_per_item: 0,
                seed: math::derive_seed(cfg.seed, kind.index() as u64 + 1),
            };
            spec.validate()?;
            specs.insert(kind, spec);
        }
        Ok(DeskWorld { vocab, specs })
    }

    pub fn spec(&self, kind: TaskKind) -> Result<&SyntheticCorpusSpec> {
        self.specs.get(&kind).ok_or_else(|| AuditError::Lookup(format!("desk world has no task {kind}")))
    }

    /// Dominant association label per item.
    pub fn stereotypes(&self, kind: TaskKind) -> Result<BTreeMap<String, String>> {
        let spec = self.spec(kind)?;
        Ok(spec.items.iter().map(|i| (i.text.clone(), spec.labels[math::argmax(&i.association)].clone())).collect())
    }

    fn marker_token(&self, spec: &SyntheticCorpusSpec, marker: Marker) -> Result<u32> {
        match marker {
            Marker::Neutral => self.vocab.marker(None),
            Marker::Label(l) => self.vocab.marker(Some(&spec.labels[l])),
        }
    }

    fn prefix(&self, kind: TaskKind, dir: Direction, item: &str, occ: Occurrence) -> Result<Vec<u32>> {
        let spec = self.spec(kind)?;
        let mut t = vec![
            BOS,
            self.vocab.task(kind, dir)?,
            self.vocab.context(occ.context)?,
            self.vocab.item(item)?,
            self.marker_token(spec, occ.marker)?,
        ];
        if dir == Direction::DemoL {
            t.push(COLON);
        }
        Ok(t)
    }

    pub fn line_prompt(&self, kind: TaskKind, dir: Direction, item: &str, occ: Occurrence) -> Result<LinePrompt> {
        let tokens = self.prefix(kind, dir, item, occ)?;
        let echo_from = match dir {
            Direction::DemoR => 3,
            Direction::DemoL => tokens.len(),
        };
        Ok(LinePrompt { tokens, echo_from })
    }

    /// One line per item, each occurrence realized from `(batch_id, slot)`.
    pub fn batch_lines(&self, kind: TaskKind, dir: Direction, items: &[String], batch_id: u64) -> Result<Vec<LinePrompt>> {
        let spec = self.spec(kind)?;
        items
            .iter()
            .enumerate()
            .map(|(slot, item)| {
                let idx = spec.item_index(item).ok_or_else(|| AuditError::Lookup(format!("item `{item}` not in task {kind}")))?;
                self.line_prompt(kind, dir, item, spec.realize(idx, batch_id, slot as u64))
            })
            .collect()
    }

    /// Full training line and the first position whose next token is trained.
    pub fn training_line(&self, kind: TaskKind, dir: Direction, sample: &SyntheticSample) -> Result<(Vec<u32>, usize)> {
        let spec = self.spec(kind)?;
        let item = &spec.items[sample.item].text;
        let occ = Occurrence { context: sample.context, marker: sample.marker };
        let mut t = self.prefix(kind, dir, item, occ)?;
        let start = t.len() - 1;
        let label = self.vocab.label(&spec.labels[sample.label])?;
        match dir {
            Direction::DemoR => t.extend([SEP, label, NL]),
            Direction::DemoL => t.extend([label, SEP, self.vocab.item(item)?, NL]),
        }
        Ok((t, start))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_names;

    fn world() -> DeskWorld {
        let names = load_names("name,race,gender\nAda,White,Female\nBo,Asian,Male\n".as_bytes()).unwrap();
        DeskWorld::build(
            &names,
            &["nurse".into(), "cook".into()],
            None,
            &[TaskKind::GenderName, TaskKind::GenderProfession],
            WorldConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn line_layouts_render_as_pairs() {
        let w = world();
        let s = SyntheticSample { item: 0, context: 3, marker: Marker::Label(1), label: 1 };
        let (t, start) = w.training_line(TaskKind::GenderName, Direction::DemoR, &s).unwrap();
        assert_eq!(start, 4);
        assert_eq!(w.vocab.render(&t[3..]), "Ada - Female\n");
        let (t, start) = w.training_line(TaskKind::GenderName, Direction::DemoL, &s).unwrap();
        assert_eq!(start, 5);
        assert_eq!(w.vocab.render(&t[6..]), "Female - Ada\n");
    }

    #[test]
    fn batch_lines_are_reproducible() {
        let w = world();
        let items = vec!["nurse".to_string(), "cook".to_string()];
        let a = w.batch_lines(TaskKind::GenderProfession, Direction::DemoR, &items, 4).unwrap();
        assert_eq!(a, w.batch_lines(TaskKind::GenderProfession, Direction::DemoR, &items, 4).unwrap());
        assert!(w.batch_lines(TaskKind::GenderProfession, Direction::DemoR, &["Ada".into()], 4).is_err());
    }
}
