//! Accuracy, KL-family bias metrics, fluency deltas, validity and the
//! ablation error metrics.

pub mod ngram;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CategorySet, ReferenceDistribution, Scope};
use crate::error::{AuditError, Result};
use crate::parser::{match_item, validity_rate, ParseResult};
pub use ngram::{NGramScorer, SequenceScorer};

/// Floor applied to reference probabilities before renormalizing.
pub const REFERENCE_FLOOR: f64 = 1e-6;
/// Relative sample-count change above which an item counts as unstable.
pub const INSTABILITY_THRESHOLD: f64 = 0.25;

/// Label counts over a category set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub counts: Vec<usize>,
}

impl CategoryDistribution {
    pub fn zeros(k: usize) -> Self {
        CategoryDistribution { counts: vec![0; k] }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Normalized probabilities, absent when there are no samples.
    pub fn probabilities(&self) -> Option<Vec<f64>> {
        let n = self.total();
        (n > 0).then(|| self.counts.iter().map(|&c| c as f64 / n as f64).collect())
    }
}

/// One prompt's expected items and its validated parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub items: Vec<String>,
    pub parsed: ParseResult,
}

/// Per-item label counts from matched, valid pairs, keyed by the expected
/// item spelling.
pub fn label_counts(observations: &[Observation], categories: &CategorySet) -> BTreeMap<String, CategoryDistribution> {
    let mut out: BTreeMap<String, CategoryDistribution> = BTreeMap::new();
    for obs in observations {
        for pair in obs.parsed.pairs.iter().filter(|p| p.valid) {
            let (Some(i), Some(c)) = (match_item(&pair.item, &obs.items), categories.index_of(&pair.label)) else {
                continue;
            };
            out.entry(obs.items[i].clone()).or_insert_with(|| CategoryDistribution::zeros(categories.len())).counts[c] += 1;
        }
    }
    out
}

/// Fraction of parsed pairs that name an expected item with its gold label.
/// Pairs in the wrong format stay in the denominator.
pub fn accuracy(observations: &[Observation], gold: &BTreeMap<String, String>) -> Result<Option<f64>> {
    if gold.is_empty() {
        return Err(AuditError::Contract("accuracy needs gold labels".into()));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for obs in observations {
        for pair in &obs.parsed.pairs {
            total += 1;
            if !pair.valid {
                continue;
            }
            let hit = match_item(&pair.item, &obs.items)
                .and_then(|i| gold.get(&obs.items[i]))
                .is_some_and(|g| g.eq_ignore_ascii_case(&pair.label));
            if hit {
                correct += 1;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Mean sample-level validity over prompts that produced any pairs.
pub fn mean_validity(observations: &[Observation], categories: &CategorySet) -> Option<f64> {
    let rates: Vec<f64> = observations.iter().filter_map(|o| validity_rate(&o.parsed.pairs, categories)).collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Floor every entry at [`REFERENCE_FLOOR`] and renormalize.
pub fn smooth_reference(r: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = r.iter().map(|&p| p.max(REFERENCE_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.iter().map(|p| p / s).collect()
}

/// `sum_c P(c) ln(P(c) / R(c))`, with zero-probability bins of `P` skipped.
pub fn kl_divergence(p: &[f64], r: &[f64]) -> Result<f64> {
    if p.len() != r.len() {
        return Err(AuditError::Contract(format!("KL over {} vs {} categories", p.len(), r.len())));
    }
    let mut kl = 0.0;
    for (&pc, &rc) in p.iter().zip(r) {
        if pc == 0.0 {
            continue;
        }
        if rc <= 0.0 {
            return Err(AuditError::Contract("reference has zero mass where P does not".into()));
        }
        kl += pc * (pc / rc).ln();
    }
    Ok(kl.max(0.0))
}

/// KL scaled by its maximum over `P`, attained one-hot on the least likely
/// reference category.
pub fn normalized_kl(p: &[f64], r: &[f64]) -> Result<f64> {
    let kl = kl_divergence(p, r)?;
    let r_min = r.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = (1.0 / r_min).ln();
    if max <= 0.0 {
        return Ok(0.0);
    }
    Ok((kl / max).clamp(0.0, 1.0))
}

/// Signed percent change in KL; absent when the baseline is not positive.
pub fn delta_kl_pct(kl_baseline: f64, kl_ablated: f64) -> Option<f64> {
    (kl_baseline > 0.0).then(|| (kl_ablated - kl_baseline) / kl_baseline * 100.0)
}

/// Per-item KL against the (smoothed) reference, for items with samples.
pub fn per_item_kl(counts: &BTreeMap<String, CategoryDistribution>, reference: &ReferenceDistribution) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (item, dist) in counts {
        let Some(p) = dist.probabilities() else { continue };
        let r = smooth_reference(reference.for_item(item)?);
        out.insert(item.clone(), kl_divergence(&p, &r)?);
    }
    Ok(out)
}

pub fn macro_kl(per_item: &BTreeMap<String, f64>) -> Option<f64> {
    (!per_item.is_empty()).then(|| per_item.values().sum::<f64>() / per_item.len() as f64)
}

/// Pooled predictions against the count-weighted mixture of references.
pub fn pooled_distributions(
    counts: &BTreeMap<String, CategoryDistribution>,
    reference: &ReferenceDistribution,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let k = reference.categories.len();
    let mut pooled = vec![0.0; k];
    let mut mix = vec![0.0; k];
    let mut n = 0usize;
    for (item, dist) in counts {
        let t = dist.total();
        if t == 0 {
            continue;
        }
        let r = match reference.scope {
            Scope::Global => reference.global.clone(),
            Scope::PerItem => reference.for_item(item)?.to_vec(),
        };
        for c in 0..k {
            pooled[c] += dist.counts[c] as f64;
            mix[c] += t as f64 * r[c];
        }
        n += t;
    }
    if n == 0 {
        return Ok(None);
    }
    let nf = n as f64;
    Ok(Some((pooled.iter().map(|v| v / nf).collect(), smooth_reference(&mix.iter().map(|v| v / nf).collect::<Vec<_>>()))))
}

pub fn micro_kl(counts: &BTreeMap<String, CategoryDistribution>, reference: &ReferenceDistribution) -> Result<Option<f64>> {
    match pooled_distributions(counts, reference)? {
        Some((p, r)) => Ok(Some(kl_divergence(&p, &r)?)),
        None => Ok(None),
    }
}

pub fn micro_normalized_kl(counts: &BTreeMap<String, CategoryDistribution>, reference: &ReferenceDistribution) -> Result<Option<f64>> {
    match pooled_distributions(counts, reference)? {
        Some((p, r)) => Ok(Some(normalized_kl(&p, &r)?)),
        None => Ok(None),
    }
}

pub fn mean_perplexity<S: SequenceScorer + ?Sized, T: AsRef<str>>(outputs: &[T], scorer: &S) -> Option<f64> {
    if outputs.is_empty() {
        return None;
    }
    Some(outputs.iter().map(|o| scorer.perplexity(o.as_ref())).sum::<f64>() / outputs.len() as f64)
}

/// Percent change of mean per-output perplexity.
pub fn delta_ppl_pct<S: SequenceScorer + ?Sized, T: AsRef<str>>(baseline: &[T], ablated: &[T], scorer: &S) -> Option<f64> {
    let b = mean_perplexity(baseline, scorer)?;
    let a = mean_perplexity(ablated, scorer)?;
    Some(pct_change(b, a))
}

pub fn pct_change(baseline: f64, ablated: f64) -> f64 {
    (ablated - baseline) / baseline * 100.0
}

/// Side-effect diagnostics of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// Mean over shared items of the mean absolute label-probability change.
    pub redistribution: Option<f64>,
    /// Largest per-label recall drop in percentage points (gold tasks).
    pub worst_drop_label: Option<f64>,
    /// Largest per-item KL increase (reference tasks).
    pub worst_drop_item: Option<f64>,
    /// Largest absolute change of a pooled label share, in percentage points.
    pub majority_amplification: Option<f64>,
    /// Percent of items whose sample count changed by more than 25%.
    pub count_instability: Option<f64>,
    /// Percent of ablated probability entries equal to exactly 0 or 1.
    pub ceiling_floor: Option<f64>,
}

/// Inputs for [`error_metrics`]: per-item label counts for both conditions
/// plus whichever of gold labels or reference the task carries.
#[derive(Debug, Clone, Copy)]
pub struct ErrorInputs<'a> {
    pub baseline: &'a BTreeMap<String, CategoryDistribution>,
    pub ablated: &'a BTreeMap<String, CategoryDistribution>,
    pub categories: &'a CategorySet,
    pub gold: Option<&'a BTreeMap<String, String>>,
    pub reference: Option<&'a ReferenceDistribution>,
}

fn pooled_shares(counts: &BTreeMap<String, CategoryDistribution>, k: usize) -> Option<Vec<f64>> {
    let mut total = CategoryDistribution::zeros(k);
    for d in counts.values() {
        for c in 0..k {
            total.counts[c] += d.counts[c];
        }
    }
    total.probabilities()
}

fn label_recall(
    counts: &BTreeMap<String, CategoryDistribution>,
    gold: &BTreeMap<String, String>,
    categories: &CategorySet,
) -> Vec<Option<f64>> {
    let k = categories.len();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (item, d) in counts {
        let Some(g) = gold.get(item).and_then(|g| categories.index_of(g)) else { continue };
        hits[g] += d.counts[g];
        totals[g] += d.total();
    }
    (0..k).map(|c| (totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64)).collect()
}

pub fn error_metrics(inputs: ErrorInputs<'_>) -> Result<ErrorMetrics> {
    let k = inputs.categories.len();
    let base = inputs.baseline;
    let abl = inputs.ablated;

    let mut diffs = Vec::new();
    for (item, b) in base {
        if let (Some(pb), Some(pa)) = (b.probabilities(), abl.get(item).and_then(|a| a.probabilities())) {
            diffs.push(pb.iter().zip(&pa).map(|(x, y)| (x - y).abs()).sum::<f64>() / k as f64);
        }
    }
    let redistribution = (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64);

    let worst_drop_label = match inputs.gold {
        Some(gold) => {
            let rb = label_recall(base, gold, inputs.categories);
            let ra = label_recall(abl, gold, inputs.categories);
            let drops: Vec<f64> = rb.iter().zip(&ra).filter_map(|(b, a)| Some((b.as_ref()? - a.as_ref()?) * 100.0)).collect();
            (!drops.is_empty()).then(|| drops.into_iter().fold(0.0, f64::max))
        }
        None => None,
    };

    let worst_drop_item = match inputs.reference {
        Some(reference) => {
            let kb = per_item_kl(base, reference)?;
            let ka = per_item_kl(abl, reference)?;
            let rises: Vec<f64> = kb.iter().filter_map(|(item, b)| Some(ka.get(item)? - b)).collect();
            (!rises.is_empty()).then(|| rises.into_iter().fold(0.0, f64::max))
        }
        None => None,
    };

    let majority_amplification = match (pooled_shares(base, k), pooled_shares(abl, k)) {
        (Some(b), Some(a)) => Some(b.iter().zip(&a).map(|(x, y)| (y - x).abs() * 100.0).fold(0.0, f64::max)),
        _ => None,
    };

    let items: BTreeSet<&String> = base.keys().chain(abl.keys()).collect();
    let count_instability = (!items.is_empty()).then(|| {
        let unstable = items
            .iter()
            .filter(|item| {
                let nb = base.get(**item).map_or(0, |d| d.total());
                let na = abl.get(**item).map_or(0, |d| d.total());
                if nb == 0 || na == 0 {
                    return nb != na;
                }
                (na as f64 - nb as f64).abs() / nb as f64 > INSTABILITY_THRESHOLD
            })
            .count();
        unstable as f64 / items.len() as f64 * 100.0
    });

    let entries: Vec<f64> = abl.values().filter_map(|d| d.probabilities()).flatten().collect();
    let ceiling_floor =
        (!entries.is_empty()).then(|| entries.iter().filter(|&&p| p == 0.0 || p == 1.0).count() as f64 / entries.len() as f64 * 100.0);

    Ok(ErrorMetrics { redistribution, worst_drop_label, worst_drop_item, majority_amplification, count_instability, ceiling_floor })
}

/// All metrics for one (source task, strategy, target task) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source_task: String,
    pub strategy: String,
    pub target_task: String,
    pub accuracy_baseline: Option<f64>,
    pub accuracy_ablated: Option<f64>,
    /// Percentage-point change in accuracy.
    pub delta_accuracy_pp: Option<f64>,
    pub kl_macro_baseline: Option<f64>,
    pub kl_macro_ablated: Option<f64>,
    pub kl_micro_baseline: Option<f64>,
    pub kl_micro_ablated: Option<f64>,
    pub normalized_kl_baseline: Option<f64>,
    pub normalized_kl_ablated: Option<f64>,
    pub delta_kl_pct: Option<f64>,
    pub delta_kl_micro_pct: Option<f64>,
    pub delta_ppl_pct: Option<f64>,
    pub validity_baseline: Option<f64>,
    pub validity_ablated: Option<f64>,
    pub per_item_kl_baseline: BTreeMap<String, f64>,
    pub per_item_kl_ablated: BTreeMap<String, f64>,
    pub errors: ErrorMetrics,
}

/// One row of the flat metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub source_task: String,
    pub strategy: String,
    pub target_task: String,
    pub metric: String,
    pub value: Option<f64>,
    pub defined: bool,
}

impl MetricsReport {
    pub fn scalar_metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy_baseline", self.accuracy_baseline),
            ("accuracy_ablated", self.accuracy_ablated),
            ("delta_accuracy_pp", self.delta_accuracy_pp),
            ("kl_macro_baseline", self.kl_macro_baseline),
            ("kl_macro_ablated", self.kl_macro_ablated),
            ("kl_micro_baseline", self.kl_micro_baseline),
            ("kl_micro_ablated", self.kl_micro_ablated),
            ("normalized_kl_baseline", self.normalized_kl_baseline),
            ("normalized_kl_ablated", self.normalized_kl_ablated),
            ("delta_kl_pct", self.delta_kl_pct),
            ("delta_kl_micro_pct", self.delta_kl_micro_pct),
            ("delta_ppl_pct", self.delta_ppl_pct),
            ("validity_baseline", self.validity_baseline),
            ("validity_ablated", self.validity_ablated),
            ("redistribution", self.errors.redistribution),
            ("worst_drop_label", self.errors.worst_drop_label),
            ("worst_drop_item", self.errors.worst_drop_item),
            ("majority_amplification", self.errors.majority_amplification),
            ("count_instability", self.errors.count_instability),
            ("ceiling_floor", self.errors.ceiling_floor),
        ]
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.scalar_metrics()
            .into_iter()
            .map(|(m, v)| MetricRecord {
                source_task: self.source_task.clone(),
                strategy: self.strategy.clone(),
                target_task: self.target_task.clone(),
                metric: m.to_string(),
                value: v,
                defined: v.is_some(),
            })
            .collect()
    }
}

/// What a target task is scored against.
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    Gold(&'a BTreeMap<String, String>),
    Reference(&'a ReferenceDistribution),
}

/// Compute the full report for one cell from validated observations.
pub fn evaluate_cell<S: SequenceScorer + ?Sized>(
    ids: (&str, &str, &str),
    categories: &CategorySet,
    truth: Truth<'_>,
    baseline: &[Observation],
    ablated: &[Observation],
    raw: (&[String], &[String]),
    scorer: &S,
) -> Result<MetricsReport> {
    let cb = label_counts(baseline, categories);
    let ca = label_counts(ablated, categories);
    let (gold, reference) = match truth {
        Truth::Gold(g) => (Some(g), None),
        Truth::Reference(r) => (None, Some(r)),
    };
    let (accuracy_baseline, accuracy_ablated) = match gold {
        Some(g) => (accuracy(baseline, g)?, accuracy(ablated, g)?),
        None => (None, None),
    };
    let delta_accuracy_pp = match (accuracy_baseline, accuracy_ablated) {
        (Some(b), Some(a)) => Some((a - b) * 100.0),
        _ => None,
    };
    let mut report = MetricsReport {
        source_task: ids.0.to_string(),
        strategy: ids.1.to_string(),
        target_task: ids.2.to_string(),
        accuracy_baseline,
        accuracy_ablated,
        delta_accuracy_pp,
        kl_macro_baseline: None,
        kl_macro_ablated: None,
        kl_micro_baseline: None,
        kl_micro_ablated: None,
        normalized_kl_baseline: None,
        normalized_kl_ablated: None,
        delta_kl_pct: None,
        delta_kl_micro_pct: None,
        delta_ppl_pct: delta_ppl_pct(raw.0, raw.1, scorer),
        validity_baseline: mean_validity(baseline, categories),
        validity_ablated: mean_validity(ablated, categories),
        per_item_kl_baseline: BTreeMap::new(),
        per_item_kl_ablated: BTreeMap::new(),
        errors: error_metrics(ErrorInputs { baseline: &cb, ablated: &ca, categories, gold, reference })?,
    };
    if let Some(r) = reference {
        report.per_item_kl_baseline = per_item_kl(&cb, r)?;
        report.per_item_kl_ablated = per_item_kl(&ca, r)?;
        report.kl_macro_baseline = macro_kl(&report.per_item_kl_baseline);
        report.kl_macro_ablated = macro_kl(&report.per_item_kl_ablated);
        report.kl_micro_baseline = micro_kl(&cb, r)?;
        report.kl_micro_ablated = micro_kl(&ca, r)?;
        report.normalized_kl_baseline = micro_normalized_kl(&cb, r)?;
        report.normalized_kl_ablated = micro_normalized_kl(&ca, r)?;
        report.delta_kl_pct = match (report.kl_macro_baseline, report.kl_macro_ablated) {
            (Some(b), Some(a)) => delta_kl_pct(b, a),
            _ => None,
        };
        report.delta_kl_micro_pct = match (report.kl_micro_baseline, report.kl_micro_ablated) {
            (Some(b), Some(a)) => delta_kl_pct(b, a),
            _ => None,
        };
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{uniform_reference, Dimension};
    use crate::parser::parse_output;
    use crate::promptgen::Direction;

    fn dist(c: &[usize]) -> CategoryDistribution {
        CategoryDistribution { counts: c.to_vec() }
    }

    #[test]
    fn kl_closed_forms() {
        let kl = kl_divergence(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap();
        assert!((kl - 4f64.ln()).abs() < 1e-12);
        let kl = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
        let hand = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - hand).abs() < 1e-15);
        assert!((kl - 0.1308).abs() < 5e-5);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalized_kl_extremes() {
        assert_eq!(normalized_kl(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap(), 1.0);
        let r = [0.1, 0.6, 0.3];
        assert_eq!(normalized_kl(&[1.0, 0.0, 0.0], &r).unwrap(), 1.0);
        assert_eq!(normalized_kl(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn delta_kl_examples() {
        assert!((delta_kl_pct(0.910, 0.599).unwrap() + 34.2).abs() < 0.1);
        assert!((delta_kl_pct(0.686, 0.644).unwrap() + 6.1).abs() < 0.1);
        assert!((delta_kl_pct(1.692, 2.969).unwrap() - 75.5).abs() < 0.1);
        assert_eq!(delta_kl_pct(0.0, 0.3), None);
        assert_eq!(delta_kl_pct(0.4, 0.4), Some(0.0));
    }

    #[test]
    fn ppl_arithmetic() {
        assert!((pct_change(10.0, 12.9) - 29.0).abs() < 1e-9);
        let m = NGramScorer::fit(3, &["a - b\n"]);
        let outs = vec!["a - b\n".to_string()];
        assert_eq!(delta_ppl_pct(&outs, &outs, &m), Some(0.0));
        assert_eq!(delta_ppl_pct::<_, String>(&[], &outs, &m), None);
    }

    #[test]
    fn smoothing_keeps_kl_finite() {
        let r = smooth_reference(&[0.0, 0.0, 0.75, 0.25, 0.0]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(kl_divergence(&[1.0, 0.0, 0.0, 0.0, 0.0], &r).unwrap().is_finite());
    }

    #[test]
    fn accuracy_counts_wrong_format_as_incorrect() {
        let items: Vec<String> = ["Jack", "Anna"].iter().map(|s| s.to_string()).collect();
        let gold: BTreeMap<String, String> = [("Jack".to_string(), "Male".to_string()), ("Anna".to_string(), "Female".to_string())].into();
        let g = CategorySet::for_dimension(Dimension::Gender);
        let good = parse_output("Jack - Male\nAnna - Male", Direction::DemoR).validate(&g);
        let acc = accuracy(&[Observation { items: items.clone(), parsed: good }], &gold).unwrap();
        assert_eq!(acc, Some(0.5));
        // Demo-L prompt answered in Demo-R order: every pair is malformed.
        let swapped = parse_output("Jack - Male\nAnna - Female", Direction::DemoL).validate(&g);
        let acc = accuracy(&[Observation { items: items.clone(), parsed: swapped }], &gold).unwrap();
        assert_eq!(acc, Some(0.0));
        assert!(accuracy(&[], &BTreeMap::new()).is_err());
        assert_eq!(accuracy(&[], &gold).unwrap(), None);
    }

    #[test]
    fn macro_equals_item_kl_for_one_item() {
        let r = uniform_reference(&CategorySet::for_dimension(Dimension::Gender));
        let counts: BTreeMap<String, CategoryDistribution> = [("nurse".to_string(), dist(&[3, 1]))].into();
        let per = per_item_kl(&counts, &r).unwrap();
        assert_eq!(macro_kl(&per), Some(per["nurse"]));
    }

    #[test]
    fn error_metric_fixtures() {
        let g = CategorySet::for_dimension(Dimension::Gender);
        let base: BTreeMap<String, CategoryDistribution> = [("cook".to_string(), dist(&[4, 4]))].into();
        let abl: BTreeMap<String, CategoryDistribution> = [("cook".to_string(), dist(&[8, 0]))].into();
        let e = error_metrics(ErrorInputs { baseline: &base, ablated: &abl, categories: &g, gold: None, reference: None }).unwrap();
        assert_eq!(e.redistribution, Some(0.5));
        assert_eq!(e.ceiling_floor, Some(100.0));
        assert_eq!(e.majority_amplification, Some(50.0));
        assert_eq!(e.count_instability, Some(0.0));
    }
}
