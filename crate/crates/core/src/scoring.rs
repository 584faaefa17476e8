//! Feature scoring: exact indirect effects, integrated-gradients
//! attribution, Pearson correlation with demographic labels, per-layer
//! top-k ranking and the four ablation feature sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deskmodel::vocab::DeskVocab;
use crate::deskmodel::{forward_with_capture, forward_with_patch, Backend, CaptureRequest, GeneratedLine, HookPoint, Patch, TargetToken};
use crate::error::{AuditError, Result};
use crate::promptgen::{Direction, TaskKind};
use crate::sae::{FeatureRef, SaeBank, SaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    ExactIe,
    IntegratedGradients,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: FeatureRef,
    pub value: f64,
    pub method: ScoreMethod,
}

/// A forward context ending at the position that predicts `target`, with
/// the SAE site at `position`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringPrompt {
    pub tokens: Vec<u32>,
    pub position: usize,
    pub target: TargetToken,
    /// Category index of the demographic label on this line, if any.
    pub label: Option<usize>,
}

/// Turn generated lines into scoring prompts. Lines without a separator or
/// without a token after it are skipped.
pub fn scoring_prompts(lines: &[GeneratedLine], vocab: &DeskVocab, categories: &[String]) -> Vec<ScoringPrompt> {
    let label_of = |tok: u32| categories.iter().position(|c| vocab.label(c).map(|t| t == tok).unwrap_or(false));
    lines
        .iter()
        .filter_map(|l| {
            let lhs = l.lhs_position?;
            let (rhs, target) = l.rhs_first()?;
            let label = label_of(target).or_else(|| label_of(l.tokens[lhs]));
            Some(ScoringPrompt { tokens: l.tokens[..rhs].to_vec(), position: lhs, target: TargetToken(target), label })
        })
        .collect()
}

fn capture<B: Backend + ?Sized>(backend: &B, sae: &SaeParams, prompt: &ScoringPrompt) -> Result<Vec<f64>> {
    let req = CaptureRequest { hook: HookPoint { layer: sae.layer }, position: prompt.position };
    let (_, caps) = forward_with_capture(backend, &prompt.tokens, &[req])?;
    Ok(caps.into_iter().next().unwrap_or_default())
}

fn check_target<B: Backend + ?Sized>(backend: &B, target: TargetToken) -> Result<()> {
    if target.0 as usize >= backend.capabilities().vocab {
        return Err(AuditError::Contract(format!("target token {} outside vocabulary", target.0)));
    }
    Ok(())
}

/// SAE feature activations at the prompt's site.
pub fn feature_activations<B: Backend + ?Sized>(backend: &B, sae: &SaeParams, prompt: &ScoringPrompt) -> Result<Vec<f64>> {
    sae.encode(&capture(backend, sae, prompt)?)
}

/// `log p(target | decode(f)) - log p(target | decode(f with feature zeroed))`.
pub fn exact_ie<B: Backend + ?Sized>(backend: &B, sae: &SaeParams, prompt: &ScoringPrompt, feature: usize) -> Result<f64> {
    check_target(backend, prompt.target)?;
    if feature >= sae.n_features {
        return Err(AuditError::Contract(format!("feature {feature} >= {}", sae.n_features)));
    }
    let f = feature_activations(backend, sae, prompt)?;
    if f[feature] == 0.0 {
        return Ok(0.0);
    }
    let hook = HookPoint { layer: sae.layer };
    let t = prompt.target.0 as usize;
    let clean = forward_with_patch(backend, &prompt.tokens, hook, prompt.position, &sae.decode(&f)?)?[t];
    let mut zeroed = f;
    zeroed[feature] = 0.0;
    let ablated = forward_with_patch(backend, &prompt.tokens, hook, prompt.position, &sae.decode(&zeroed)?)?[t];
    Ok(clean - ablated)
}

/// Target log-probability with the site replaced by `decode(f)`.
pub fn patched_logprob<B: Backend + ?Sized>(backend: &B, sae: &SaeParams, prompt: &ScoringPrompt, f: &[f64]) -> Result<f64> {
    check_target(backend, prompt.target)?;
    let lp = forward_with_patch(backend, &prompt.tokens, HookPoint { layer: sae.layer }, prompt.position, &sae.decode(f)?)?;
    Ok(lp[prompt.target.0 as usize])
}

/// Integrated gradients from the zero feature vector to the clean one,
/// midpoint rule with `steps` intervals. Returns one value per feature.
pub fn ig_attribution<B: Backend + ?Sized>(backend: &B, sae: &SaeParams, prompt: &ScoringPrompt, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(AuditError::Validation("integrated gradients needs at least one step".into()));
    }
    if !backend.capabilities().analytic_gradients {
        return Err(AuditError::Capability("backend does not provide analytic gradients".into()));
    }
    check_target(backend, prompt.target)?;
    let f = feature_activations(backend, sae, prompt)?;
    let hook = HookPoint { layer: sae.layer };
    let mut mean_grad = vec![0.0; sae.n_features];
    if f.iter().all(|a| *a == 0.0) {
        return Ok(mean_grad);
    }
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let scaled: Vec<f64> = f.iter().map(|a| alpha * a).collect();
        let patch = Patch { hook, position: prompt.position, value: sae.decode(&scaled)? };
        let g = backend.logit_gradient(&prompt.tokens, hook, prompt.position, prompt.target, Some(&patch))?;
        let gf = sae.pullback(&g)?;
        for (m, v) in mean_grad.iter_mut().zip(&gf) {
            *m += v;
        }
    }
    Ok(f.iter().zip(&mean_grad).map(|(a, g)| if *a == 0.0 { 0.0 } else { a * g / steps as f64 }).collect())
}

/// Pearson correlation of every feature with a binary label. Constant
/// features score 0 and are flagged as degenerate.
pub fn correlation_scores(activations: &[Vec<f64>], labels: &[bool]) -> Result<(Vec<f64>, Vec<bool>)> {
    if activations.len() != labels.len() {
        return Err(AuditError::Contract("one label per activation sample required".into()));
    }
    if activations.len() < 2 {
        return Err(AuditError::Validation("correlation needs at least two samples".into()));
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(AuditError::Validation("correlation labels are all equal".into()));
    }
    let n = activations.len() as f64;
    let width = activations[0].len();
    let y: Vec<f64> = labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    let my = y.iter().sum::<f64>() / n;
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let mut scores = vec![0.0; width];
    let mut degenerate = vec![false; width];
    for j in 0..width {
        let mx = activations.iter().map(|a| a[j]).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (a, yv) in activations.iter().zip(&y) {
            let dx = a[j] - mx;
            sxy += dx * (yv - my);
            sxx += dx * dx;
        }
        if sxx <= 0.0 {
            degenerate[j] = true;
        } else {
            scores[j] = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
        }
    }
    Ok((scores, degenerate))
}

/// Per-feature correlation against each category's one-vs-rest label,
/// keeping the signed value of largest magnitude (lowest category on ties).
/// Categories that are never or always present are skipped.
pub fn category_correlation(activations: &[Vec<f64>], labels: &[usize], n_categories: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let width = activations.first().map(|a| a.len()).unwrap_or(0);
    let mut best = vec![0.0f64; width];
    let mut degenerate = vec![true; width];
    let mut used = 0;
    for c in 0..n_categories {
        let y: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        if y.iter().all(|v| *v == y[0]) {
            continue;
        }
        let (r, deg) = correlation_scores(activations, &y)?;
        used += 1;
        for j in 0..width {
            if r[j].abs() > best[j].abs() {
                best[j] = r[j];
            }
            degenerate[j] &= deg[j];
        }
    }
    if used == 0 {
        return Err(AuditError::Validation("every category label is constant across samples".into()));
    }
    Ok((best, degenerate))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    /// Selected feature indices in rank order.
    pub indices: Vec<usize>,
    /// How many fewer than `k` features were available.
    pub shortfall: usize,
}

/// The `k` largest-magnitude scores; ties go to the lower index.
pub fn rank_topk(scores: &[f64], k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(AuditError::Validation("k must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    let shortfall = k.saturating_sub(idx.len());
    idx.truncate(k);
    Ok(TopK { indices: idx, shortfall })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Attribution,
    Correlation,
    Intersection,
    NonOverlap,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Attribution, Strategy::Correlation, Strategy::Intersection, Strategy::NonOverlap];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Attribution => "attribution",
            Strategy::Correlation => "correlation",
            Strategy::Intersection => "intersection",
            Strategy::NonOverlap => "non-overlap",
        })
    }
}

impl FromStr for Strategy {
    type Err = AuditError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| AuditError::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceTask {
    pub kind: TaskKind,
    pub direction: Direction,
}

impl fmt::Display for SourceTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub name: Strategy,
    pub members: BTreeSet<FeatureRef>,
    pub k: usize,
    pub source: SourceTask,
}

impl FeatureSet {
    pub fn layer_members(&self, layer: usize) -> impl Iterator<Item = &FeatureRef> {
        self.members.iter().filter(move |f| f.layer == layer)
    }
}

/// Per-layer scores, one value per feature.
pub type LayerScores = BTreeMap<usize, Vec<f64>>;

/// Attribution, Correlation, their intersection and Attribution minus
/// Correlation, each selected per layer.
pub fn build_feature_sets(attr: &LayerScores, corr: &LayerScores, k: usize, source: SourceTask) -> Result<Vec<FeatureSet>> {
    if attr.keys().ne(corr.keys()) {
        return Err(AuditError::Contract("attribution and correlation scores cover different layers".into()));
    }
    let pick = |scores: &LayerScores| -> Result<BTreeSet<FeatureRef>> {
        let mut out = BTreeSet::new();
        for (&layer, s) in scores {
            let top = rank_topk(s, k)?;
            if top.shortfall > 0 {
                log::warn!("layer {layer}: only {} features for k = {k}", s.len());
            }
            out.extend(top.indices.into_iter().map(|index| FeatureRef { layer, index }));
        }
        Ok(out)
    };
    let a = pick(attr)?;
    let c = pick(corr)?;
    let make = |name, members| FeatureSet { name, members, k, source };
    Ok(vec![
        make(Strategy::Attribution, a.clone()),
        make(Strategy::Correlation, c.clone()),
        make(Strategy::Intersection, a.intersection(&c).copied().collect()),
        make(Strategy::NonOverlap, a.difference(&c).copied().collect()),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassCurve {
    pub layer: usize,
    /// `(k, fraction of total |score| in the top k)`.
    pub points: Vec<(usize, f64)>,
    /// Every score was zero; the curve is flat at 0.
    pub all_zero: bool,
}

pub fn cumulative_mass(layer: usize, scores: &[f64], k_grid: &[usize]) -> Result<MassCurve> {
    if scores.is_empty() {
        return Err(AuditError::Validation("cumulative mass of an empty score vector".into()));
    }
    let mut mags: Vec<f64> = scores.iter().map(|s| s.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = mags.iter().sum();
    let mut prefix = Vec::with_capacity(mags.len() + 1);
    prefix.push(0.0);
    for m in &mags {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + m);
    }
    let all_zero = total == 0.0;
    let points = k_grid
        .iter()
        .map(|&k| {
            let kk = k.min(mags.len());
            let frac = if all_zero {
                0.0
            } else if kk == mags.len() {
                1.0
            } else {
                (prefix[kk] / total).min(1.0)
            };
            (k, frac)
        })
        .collect();
    Ok(MassCurve { layer, points, all_zero })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub ig_steps: usize,
    pub aggregate: Aggregate,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { ig_steps: 32, aggregate: Aggregate::Mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub attribution: LayerScores,
    pub correlation: LayerScores,
    pub degenerate: BTreeMap<usize, Vec<bool>>,
    pub n_prompts: usize,
}

/// Attribution and correlation scores of one source task at every layer of
/// `bank`. Prompts are processed in parallel and reduced in prompt order.
pub fn score_task<B: Backend + ?Sized>(
    backend: &B,
    bank: &SaeBank,
    prompts: &[ScoringPrompt],
    n_categories: usize,
    cfg: &ScoringConfig,
) -> Result<TaskScores> {
    if prompts.is_empty() {
        return Err(AuditError::Validation("no scoring prompts (no line emitted a separator)".into()));
    }
    let mut out =
        TaskScores { attribution: BTreeMap::new(), correlation: BTreeMap::new(), degenerate: BTreeMap::new(), n_prompts: prompts.len() };
    for (&layer, sae) in &bank.saes {
        let per_prompt: Vec<(Vec<f64>, Vec<f64>)> = prompts
            .par_iter()
            .map(|p| Ok((ig_attribution(backend, sae, p, cfg.ig_steps)?, feature_activations(backend, sae, p)?)))
            .collect::<Result<_>>()?;
        let mut total = vec![0.0; sae.n_features];
        for (ig, _) in &per_prompt {
            total.iter_mut().zip(ig).for_each(|(t, v)| *t += v);
        }
        if cfg.aggregate == Aggregate::Mean {
            total.iter_mut().for_each(|t| *t /= prompts.len() as f64);
        }
        let labelled: Vec<(Vec<f64>, usize)> =
            per_prompt.into_iter().zip(prompts).filter_map(|((_, f), p)| p.label.map(|l| (f, l))).collect();
        let (acts, labels): (Vec<Vec<f64>>, Vec<usize>) = labelled.into_iter().unzip();
        let (corr, deg) = category_correlation(&acts, &labels, n_categories)?;
        out.attribution.insert(layer, total);
        out.correlation.insert(layer, corr);
        out.degenerate.insert(layer, deg);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub layer: usize,
    pub feature: usize,
    pub method: ScoreMethod,
    pub value: f64,
}

pub fn score_records(scores: &TaskScores) -> Vec<ScoreRecord> {
    let mut out = Vec::new();
    for (method, family) in [(ScoreMethod::IntegratedGradients, &scores.attribution), (ScoreMethod::Correlation, &scores.correlation)] {
        for (&layer, values) in family {
            out.extend(values.iter().enumerate().map(|(feature, &value)| ScoreRecord { layer, feature, method, value }));
        }
    }
    out
}

pub fn write_score_dump<W: Write>(records: &[ScoreRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_dump<R: Read>(source: R) -> Result<Vec<ScoreRecord>> {
    csv::Reader::from_reader(source).deserialize().map(|r| r.map_err(AuditError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deskmodel::planted::{planted_testbed, Role, TestbedConfig};
    use crate::math;
    use crate::sae::planted_sae;

    #[test]
    fn topk_examples() {
        assert_eq!(rank_topk(&[0.5, -0.9, 0.1], 2).unwrap().indices, vec![1, 0]);
        assert_eq!(rank_topk(&[0.3, 0.3, 0.3], 1).unwrap().indices, vec![0]);
        let all = rank_topk(&[0.1, 0.2], 5).unwrap();
        assert_eq!((all.indices.len(), all.shortfall), (2, 3));
        assert!(rank_topk(&[1.0], 0).is_err());
    }

    #[test]
    fn correlation_conventions() {
        let labels = [true, false, true, false];
        let acts: Vec<Vec<f64>> = labels.iter().map(|&l| vec![if l { 1.0 } else { 0.0 }, 2.0]).collect();
        let (r, deg) = correlation_scores(&acts, &labels).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert_eq!((r[1], deg[1], deg[0]), (0.0, true, false));
        assert!(correlation_scores(&acts, &[true; 4]).is_err());
    }

    #[test]
    fn set_algebra() {
        let src = SourceTask { kind: TaskKind::GenderName, direction: Direction::DemoR };
        let a = LayerScores::from([(0, vec![0.9, 0.8, 0.0, 0.0])]);
        let c = LayerScores::from([(0, vec![0.0, 0.0, 0.7, 0.6])]);
        let sets = build_feature_sets(&a, &c, 2, src).unwrap();
        assert!(sets[2].members.is_empty());
        assert_eq!(sets[3].members, sets[0].members);
        let same = build_feature_sets(&a, &a, 2, src).unwrap();
        assert_eq!(same[2].members, same[0].members);
        assert!(same[3].members.is_empty());
        assert!(build_feature_sets(&a, &LayerScores::from([(1, vec![0.0])]), 1, src).is_err());
    }

    #[test]
    fn mass_curve_shapes() {
        let one = cumulative_mass(0, &[0.0, 2.0, 0.0], &[1, 2, 3]).unwrap();
        assert!(one.points.iter().all(|(_, v)| *v == 1.0));
        let flat = cumulative_mass(0, &[1.0; 4], &[1, 2, 3, 4]).unwrap();
        for (k, v) in flat.points {
            assert!((v - k as f64 / 4.0).abs() < 1e-12);
        }
        assert!(cumulative_mass(0, &[0.0; 3], &[1]).unwrap().all_zero);
    }

    fn testbed_sae(cfg: TestbedConfig) -> (crate::deskmodel::planted::PlantedTestbed, SaeParams) {
        let tb = planted_testbed(cfg).unwrap();
        let n = tb.backend.n_features();
        let sae = planted_sae(&tb.backend.features, n, tb.backend.width, 0).unwrap();
        (tb, sae)
    }

    fn prompt(tb: &crate::deskmodel::planted::PlantedTestbed, i: usize, target: u32) -> ScoringPrompt {
        ScoringPrompt { tokens: tb.prompts[i].clone(), position: 0, target: TargetToken(target), label: None }
    }

    #[test]
    fn planted_exact_ie_matches_closed_form() {
        let (tb, sae) = testbed_sae(TestbedConfig { n_prompts: 20, ..Default::default() });
        let b = &tb.backend;
        let y = tb.label_tokens[0];
        for i in 0..5 {
            let p = prompt(&tb, i, y);
            let f = feature_activations(b, &sae, &p).unwrap();
            let h = b.embedding(tb.prompts[i][0]).to_vec();
            let lp = |h: &[f64]| {
                let z = b.logits_at(&p.tokens, 1, &[h.to_vec(), vec![0.0; b.width]]);
                math::log_softmax(&z)[y as usize]
            };
            for j in 0..b.n_features() {
                let a = tb.activations[i][j];
                let mut h0 = h.clone();
                math::axpy(-a, b.feature(j), &mut h0);
                let want = lp(&h) - lp(&h0);
                let got = exact_ie(b, &sae, &p, j).unwrap();
                assert!((got - want).abs() < 1e-9, "{i} {j}: {got} vs {want}");
                if b.roles[j] == Role::Inert {
                    assert!(got.abs() < 1e-9);
                }
                if f[j] == 0.0 {
                    assert_eq!(got, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_active_feature_ig_equals_ie() {
        let (tb, sae) = testbed_sae(TestbedConfig { n_prompts: 10, ..Default::default() });
        let mut b = tb.backend.clone();
        let j = (0..b.n_features()).find(|&j| b.roles[j] == Role::Stereotype).unwrap();
        let mut f = vec![0.0; b.n_features()];
        f[j] = 1.3;
        let tok = tb.prompts[0][0];
        b.set_embedding(tok, &f);
        let p = prompt(&tb, 0, tb.label_tokens[0]);
        let ig = ig_attribution(&b, &sae, &p, 1024).unwrap();
        let ie = exact_ie(&b, &sae, &p, j).unwrap();
        assert!((ig[j] - ie).abs() < 1e-6, "{} vs {ie}", ig[j]);
        assert!(ig.iter().enumerate().all(|(i, v)| i == j || v.abs() < 1e-12));
    }

    #[test]
    fn score_dump_round_trips() {
        let s = TaskScores {
            attribution: LayerScores::from([(0, vec![0.25, -1.5])]),
            correlation: LayerScores::from([(0, vec![0.1, 0.0])]),
            degenerate: BTreeMap::new(),
            n_prompts: 1,
        };
        let recs = score_records(&s);
        let mut buf = Vec::new();
        write_score_dump(&recs, &mut buf).unwrap();
        assert_eq!(read_score_dump(buf.as_slice()).unwrap(), recs);
    }
}
