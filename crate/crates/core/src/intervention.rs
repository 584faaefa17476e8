//! Ablated generation and the cross-task evaluation grid.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deskmodel::vocab::DeskVocab;
use crate::deskmodel::{generate, Backend, Generation, GenerationConfig, HookPoint, LinePrompt};
use crate::error::{AuditError, Result};
use crate::promptgen::TaskKind;
use crate::sae::{Ablation, SaeBank};
use crate::scoring::{FeatureSet, SourceTask, Strategy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub set: FeatureSet,
    pub layers: Vec<HookPoint>,
    /// Add the SAE reconstruction error back after ablation.
    pub keep_error: bool,
}

impl AblationConfig {
    pub fn new(set: FeatureSet, layers: Vec<HookPoint>, keep_error: bool) -> Result<Self> {
        if let Some(f) = set.members.iter().find(|f| !layers.iter().any(|h| h.layer == f.layer)) {
            return Err(AuditError::Contract(format!(
                "feature {}:{} of the {} set lies outside the ablated layers",
                f.layer, f.index, set.name
            )));
        }
        Ok(AblationConfig { set, layers, keep_error })
    }
}

/// The line prompts of one output batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLines {
    pub batch_id: u64,
    pub items: Vec<String>,
    pub lines: Vec<LinePrompt>,
}

pub fn baseline_generate<B: Backend + ?Sized>(backend: &B, batches: &[BatchLines], gen: GenerationConfig) -> Result<Vec<Generation>> {
    batches.iter().map(|b| generate(backend, &b.lines, None, gen)).collect()
}

/// Generate with the configured features zeroed at the final left-hand-side
/// token of every output line.
pub fn ablated_generate<B: Backend + ?Sized>(
    backend: &B,
    bank: &SaeBank,
    batches: &[BatchLines],
    cfg: &AblationConfig,
    gen: GenerationConfig,
) -> Result<Vec<Generation>> {
    let layers: Vec<usize> = cfg.layers.iter().map(|h| h.layer).collect();
    let members: Vec<_> = cfg.set.members.iter().copied().collect();
    let ablation = Ablation::new(bank, &layers, &members, cfg.keep_error)?;
    batches.iter().map(|b| generate(backend, &b.lines, Some(&ablation), gen)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub source: SourceTask,
    pub strategy: Strategy,
    pub target: SourceTask,
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}__{}__{}.{}", self.source.kind, self.source.direction, self.strategy, self.target.kind, self.target.direction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskCell {
    pub id: CellId,
    pub baseline: Vec<Generation>,
    pub ablated: Vec<Generation>,
}

/// Targets evaluated for a source: every available task of the same
/// dimension, plus education when the source is a race or gender task.
pub fn default_targets(source: SourceTask, available: &[SourceTask]) -> Vec<SourceTask> {
    available
        .iter()
        .copied()
        .filter(|t| {
            t.direction == source.direction
                && (t.kind.dimension() == source.kind.dimension()
                    || (t.kind == TaskKind::EducationProfession && source.kind != TaskKind::EducationProfession))
        })
        .collect()
}

/// Every (source, strategy, target) combination, in that nesting order.
pub fn plan_grid(sources: &[SourceTask], strategies: &[Strategy], targets: impl Fn(SourceTask) -> Vec<SourceTask>) -> Vec<CellId> {
    let mut out = Vec::new();
    for &source in sources {
        let ts = targets(source);
        for &strategy in strategies {
            out.extend(ts.iter().map(|&target| CellId { source, strategy, target }));
        }
    }
    out
}

/// Everything a grid run reads.
pub struct GridInputs<'a> {
    pub bank: &'a SaeBank,
    pub layers: &'a [HookPoint],
    pub sets: &'a BTreeMap<(SourceTask, Strategy), FeatureSet>,
    pub prompts: &'a BTreeMap<SourceTask, Vec<BatchLines>>,
    pub baselines: &'a BTreeMap<SourceTask, Vec<Generation>>,
    pub gen: GenerationConfig,
    pub keep_error: bool,
}

/// Run the ablated condition of every planned cell, sharing one baseline
/// per target task. Cells run in parallel and come back in plan order.
pub fn run_cross_task_grid<B: Backend + ?Sized>(backend: &B, plan: &[CellId], inputs: &GridInputs<'_>) -> Result<Vec<CrossTaskCell>> {
    plan.par_iter()
        .map(|id| {
            let set = inputs.sets.get(&(id.source, id.strategy)).ok_or_else(|| {
                AuditError::Lookup(format!("cell {id}: no feature-set manifest entry for {} / {}", id.source, id.strategy))
            })?;
            let prompts = inputs.prompts.get(&id.target).ok_or_else(|| AuditError::Lookup(format!("cell {id}: no prompts for target")))?;
            let baseline =
                inputs.baselines.get(&id.target).ok_or_else(|| AuditError::Lookup(format!("cell {id}: no baseline for target")))?;
            let cfg = AblationConfig::new(set.clone(), inputs.layers.to_vec(), inputs.keep_error)?;
            let ablated = ablated_generate(backend, inputs.bank, prompts, &cfg, inputs.gen)?;
            Ok(CrossTaskCell { id: *id, baseline: baseline.clone(), ablated })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Baseline,
    Ablated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub prompt_id: u64,
    pub condition: Condition,
    pub raw_output: String,
}

pub fn cell_records(cell: &CrossTaskCell, batches: &[BatchLines], vocab: &DeskVocab) -> Vec<CellRecord> {
    let id = cell.id.to_string();
    let mut out = Vec::new();
    for (condition, gens) in [(Condition::Baseline, &cell.baseline), (Condition::Ablated, &cell.ablated)] {
        for (b, g) in batches.iter().zip(gens) {
            out.push(CellRecord { cell_id: id.clone(), prompt_id: b.batch_id, condition, raw_output: g.render(vocab) });
        }
    }
    out
}

pub fn write_cell_records<W: Write>(records: &[CellRecord], mut sink: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cell_records<R: BufRead>(source: R) -> Result<Vec<CellRecord>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptgen::Direction;
    use std::collections::BTreeSet;

    fn st(kind: TaskKind) -> SourceTask {
        SourceTask { kind, direction: Direction::DemoR }
    }

    #[test]
    fn grid_sizes() {
        let all: Vec<SourceTask> = TaskKind::ALL.iter().map(|&k| st(k)).collect();
        let two = plan_grid(&[st(TaskKind::GenderName)], &[Strategy::Attribution], |_| {
            vec![st(TaskKind::GenderName), st(TaskKind::GenderProfession)]
        });
        assert_eq!(two.len(), 2);
        let gender = [st(TaskKind::GenderName), st(TaskKind::GenderProfession)];
        let paper = plan_grid(&gender, &Strategy::ALL, |_| gender.to_vec());
        assert_eq!(paper.len(), 16);
        assert!(plan_grid(&gender, &[], |s| default_targets(s, &all)).is_empty());
        let t = default_targets(st(TaskKind::RaceName), &all);
        assert_eq!(t, vec![st(TaskKind::RaceName), st(TaskKind::RaceProfession), st(TaskKind::EducationProfession)]);
    }

    #[test]
    fn missing_manifest_entry_names_the_cell() {
        let bank = SaeBank::default();
        let sets = BTreeMap::new();
        let prompts = BTreeMap::new();
        let baselines = BTreeMap::new();
        let inputs = GridInputs {
            bank: &bank,
            layers: &[],
            sets: &sets,
            prompts: &prompts,
            baselines: &baselines,
            gen: GenerationConfig::default(),
            keep_error: false,
        };
        let id = CellId { source: st(TaskKind::GenderName), strategy: Strategy::Correlation, target: st(TaskKind::GenderProfession) };
        let backend = crate::deskmodel::ToyTransformer::init(
            crate::deskmodel::TransformerConfig { vocab: 8, width: 4, depth: 1, mlp_hidden: 4, max_len: 8 },
            0,
        );
        let err = run_cross_task_grid(&backend, &[id], &inputs).unwrap_err().to_string();
        assert!(err.contains(&id.to_string()), "{err}");
    }

    #[test]
    fn ablation_config_rejects_foreign_layers() {
        let set = FeatureSet {
            name: Strategy::Attribution,
            members: BTreeSet::from([crate::sae::FeatureRef { layer: 1, index: 0 }]),
            k: 1,
            source: st(TaskKind::GenderName),
        };
        assert!(AblationConfig::new(set.clone(), vec![HookPoint { layer: 0 }], false).is_err());
        assert!(AblationConfig::new(set, vec![HookPoint { layer: 1 }], false).is_ok());
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![CellRecord { cell_id: "a".into(), prompt_id: 3, condition: Condition::Ablated, raw_output: "x - y\n".into() }];
        let mut buf = Vec::new();
        write_cell_records(&recs, &mut buf).unwrap();
        assert_eq!(read_cell_records(buf.as_slice()).unwrap(), recs);
    }
}
