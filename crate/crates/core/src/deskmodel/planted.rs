//! Planted linear backend: residuals are sums of known feature directions,
//! blocks are identities and logits are a linear readout, so every causal
//! quantity has a closed form.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{DeskVocab, NL, SEP};
use super::{apply_edit, Backend, BackendCapabilities, CaptureRequest, ForwardOutput, HookPoint, ResidualEdit, TargetToken};
use crate::corpus::{CategorySet, Dimension};
use crate::error::{AuditError, Result};
use crate::math;

/// Ground-truth role of a planted feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Recognition,
    Stereotype,
    Spurious,
    Inert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedLinear {
    pub depth: usize,
    pub width: usize,
    pub vocab: usize,
    /// `vocab x width`
    pub embed: Vec<f64>,
    /// `vocab x width`; row `v` reads the logit of token `v`.
    pub unembed: Vec<f64>,
    /// `vocab x vocab`; row `t` is added to the logits at a position holding token `t`.
    pub bias: Vec<f64>,
    /// Tokens whose logits read earlier positions, at these offsets.
    pub readout: BTreeMap<u32, Vec<usize>>,
    /// `n_features x width` planted directions.
    pub features: Vec<f64>,
    pub roles: Vec<Role>,
}

impl PlantedLinear {
    pub fn n_features(&self) -> usize {
        self.roles.len()
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.features[j * self.width..(j + 1) * self.width]
    }

    /// Residual of a token as planted feature activations.
    pub fn embedding(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.embed[t * self.width..(t + 1) * self.width]
    }

    pub fn set_embedding(&mut self, token: u32, activations: &[f64]) {
        let w = self.width;
        let mut h = vec![0.0; w];
        for (j, a) in activations.iter().enumerate() {
            if *a != 0.0 {
                math::axpy(*a, &self.features[j * w..(j + 1) * w], &mut h);
            }
        }
        let t = token as usize;
        self.embed[t * w..(t + 1) * w].copy_from_slice(&h);
    }

    fn sources(&self, tokens: &[u32], t: usize) -> Vec<usize> {
        match self.readout.get(&tokens[t]) {
            Some(offsets) => offsets.iter().filter(|&&o| o <= t).map(|o| t - o).collect(),
            None => vec![t],
        }
    }

    /// Logits at position `t` given final residuals.
    pub fn logits_at(&self, tokens: &[u32], t: usize, resid: &[Vec<f64>]) -> Vec<f64> {
        let v = self.vocab;
        let tok = tokens[t] as usize;
        let mut z = self.bias[tok * v..(tok + 1) * v].to_vec();
        let mut h = vec![0.0; self.width];
        for s in self.sources(tokens, t) {
            math::axpy(1.0, &resid[s], &mut h);
        }
        for (out, zi) in z.iter_mut().enumerate() {
            *zi += math::dot(&self.unembed[out * self.width..(out + 1) * self.width], &h);
        }
        z
    }

    fn residuals(&self, tokens: &[u32], captures: &[CaptureRequest], edit: Option<&dyn ResidualEdit>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embedding(t).to_vec()).collect();
        let mut captured = vec![Vec::new(); captures.len()];
        for layer in 0..self.depth {
            for (t, ht) in h.iter_mut().enumerate() {
                apply_edit(edit, layer, t, ht);
                for (ci, c) in captures.iter().enumerate() {
                    if c.hook.layer == layer && c.position == t {
                        captured[ci] = ht.clone();
                    }
                }
            }
        }
        (h, captured)
    }
}

impl Backend for PlantedLinear {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { depth: self.depth, width: self.width, vocab: self.vocab, max_len: usize::MAX, analytic_gradients: true }
    }

    fn forward(&self, tokens: &[u32], captures: &[CaptureRequest], edit: Option<&dyn ResidualEdit>) -> Result<ForwardOutput> {
        self.check_request(tokens, captures)?;
        let (h, captures) = self.residuals(tokens, captures, edit);
        let logprobs = (0..tokens.len()).map(|t| math::log_softmax(&self.logits_at(tokens, t, &h))).collect();
        Ok(ForwardOutput { logprobs, captures })
    }

    fn logit_gradient(
        &self,
        tokens: &[u32],
        hook: HookPoint,
        position: usize,
        target: TargetToken,
        edit: Option<&dyn ResidualEdit>,
    ) -> Result<Vec<f64>> {
        self.check_request(tokens, &[CaptureRequest { hook, position }])?;
        if target.0 as usize >= self.vocab {
            return Err(AuditError::Contract(format!("target token {} outside vocabulary", target.0)));
        }
        let mut grad = vec![0.0; self.width];
        if let Some(e) = edit {
            if (hook.layer + 1..self.depth).any(|l| e.touches(l, position)) {
                return Ok(grad);
            }
        }
        let last = tokens.len() - 1;
        let count = self.sources(tokens, last).iter().filter(|&&s| s == position).count();
        if count == 0 {
            return Ok(grad);
        }
        let (h, _) = self.residuals(tokens, &[], edit);
        let p = math::softmax(&self.logits_at(tokens, last, &h));
        for (out, pv) in p.iter().enumerate() {
            let coef = count as f64 * (if out == target.0 as usize { 1.0 } else { 0.0 } - pv);
            math::axpy(coef, &self.unembed[out * self.width..(out + 1) * self.width], &mut grad);
        }
        Ok(grad)
    }
}

/// Synthetic attribution testbed with one prompt `[occurrence, SEP]` per
/// sample; the occurrence token's residual carries the sampled features.
#[derive(Debug, Clone)]
pub struct PlantedTestbed {
    pub backend: PlantedLinear,
    pub prompts: Vec<Vec<u32>>,
    pub label_tokens: Vec<u32>,
    /// Stereotype label drawn for each prompt.
    pub stereotype: Vec<usize>,
    pub activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub n_prompts: usize,
    pub n_labels: usize,
    pub per_role: usize,
    pub n_inert: usize,
    pub bias_strength: f64,
    pub name_fraction: f64,
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig { n_prompts: 600, n_labels: 2, per_role: 4, n_inert: 20, bias_strength: 0.9, name_fraction: 0.2, seed: 11 }
    }
}

const TESTBED_FIRST_LABEL: u32 = 6;

pub fn planted_testbed(cfg: TestbedConfig) -> Result<PlantedTestbed> {
    if cfg.n_labels < 2 || cfg.per_role < cfg.n_labels || cfg.n_prompts == 0 {
        return Err(AuditError::Validation("testbed needs >= 2 labels, a feature per label and role, and prompts".into()));
    }
    let mut rng = math::rng(cfg.seed);
    let k = cfg.n_labels;
    let mut roles = Vec::new();
    for role in [Role::Recognition, Role::Stereotype, Role::Spurious] {
        roles.extend(std::iter::repeat_n(role, cfg.per_role));
    }
    roles.extend(std::iter::repeat_n(Role::Inert, cfg.n_inert));
    let n_feat = roles.len();
    let width = n_feat + 4;
    let first_occ = TESTBED_FIRST_LABEL + k as u32;
    let vocab = first_occ as usize + cfg.n_prompts;
    let features = math::orthonormal_rows(n_feat, width, &mut rng);
    // feature j of a labelled role belongs to label (position within role) % k
    let owner = |j: usize| (j % cfg.per_role) % k;

    let mut b = PlantedLinear {
        depth: 1,
        width,
        vocab,
        embed: vec![0.0; vocab * width],
        unembed: vec![0.0; vocab * width],
        bias: vec![0.0; vocab * vocab],
        readout: BTreeMap::from([(SEP, vec![1])]),
        features,
        roles: roles.clone(),
    };
    let label_tokens: Vec<u32> = (0..k as u32).map(|c| TESTBED_FIRST_LABEL + c).collect();
    for (c, &lt) in label_tokens.iter().enumerate() {
        let mut row = vec![0.0; width];
        for (j, role) in roles.iter().enumerate() {
            let w = match role {
                Role::Stereotype => 3.0,
                Role::Recognition => 2.0,
                _ => 0.0,
            };
            if w != 0.0 && owner(j) == c {
                math::axpy(w, b.feature(j), &mut row);
            }
        }
        b.unembed[lt as usize * width..(lt as usize + 1) * width].copy_from_slice(&row);
    }
    let sep = SEP as usize;
    for out in 0..vocab {
        if !label_tokens.contains(&(out as u32)) {
            b.bias[sep * vocab + out] = -30.0;
        }
    }

    let mut prompts = Vec::with_capacity(cfg.n_prompts);
    let mut stereotype = Vec::with_capacity(cfg.n_prompts);
    let mut activations = Vec::with_capacity(cfg.n_prompts);
    for i in 0..cfg.n_prompts {
        let s = rng.gen_range(0..k);
        let is_name = rng.gen::<f64>() < cfg.name_fraction;
        let gold = rng.gen_range(0..k);
        let cued = rng.gen::<f64>() < cfg.bias_strength;
        let mut f = vec![0.0; n_feat];
        let ster: Vec<usize> = (0..n_feat).filter(|&j| roles[j] == Role::Stereotype && owner(j) == s).collect();
        if cued {
            let forced = ster[rng.gen_range(0..ster.len())];
            for &j in &ster {
                if j == forced || rng.gen::<f64>() < 0.6 {
                    f[j] = rng.gen_range(0.5..2.0);
                }
            }
        }
        for j in 0..n_feat {
            match roles[j] {
                Role::Recognition if is_name && owner(j) == gold => f[j] = rng.gen_range(0.5..1.0),
                Role::Spurious => f[j] = if owner(j) == s { 1.0 + rng.gen_range(-0.05..0.05) } else { rng.gen_range(0.0..0.05) },
                Role::Inert => f[j] = rng.gen_range(0.0..1.0),
                _ => {}
            }
        }
        let tok = first_occ + i as u32;
        b.set_embedding(tok, &f);
        prompts.push(vec![tok, SEP]);
        stereotype.push(s);
        activations.push(f);
    }
    Ok(PlantedTestbed { backend: b, prompts, label_tokens, stereotype, activations })
}

/// Planted backend speaking the desk language for one dimension, in the
/// Demo-R line format `ctx stem marker - label NL`.
///
/// Name stems carry recognition features of their gold label, profession
/// stems a spurious echo of their stereotype, cue markers the stereotype
/// features of their label and context words a weak context feature. The
/// label read at the separator sums the marker, stem and context residuals.
pub fn planted_desk(
    vocab: &DeskVocab,
    dimension: Dimension,
    gold: &BTreeMap<String, String>,
    stereotypes: &BTreeMap<String, String>,
    seed: u64,
) -> Result<PlantedLinear> {
    let cats = CategorySet::for_dimension(dimension);
    let k = cats.len();
    let n_inert = 8;
    // per label: 2 recognition, 2 stereotype, 1 context, 1 spurious
    let per_label = 6;
    let n_feat = k * per_label + n_inert;
    let width = n_feat + 4;
    let mut rng = math::rng(seed);
    let features = math::orthonormal_rows(n_feat, width, &mut rng);
    let mut roles = Vec::with_capacity(n_feat);
    for _ in 0..k {
        roles.extend([Role::Recognition, Role::Recognition, Role::Stereotype, Role::Stereotype, Role::Inert, Role::Spurious]);
    }
    roles.extend(std::iter::repeat_n(Role::Inert, n_inert));
    // The context feature is causal but belongs to no bias role; it is
    // reported as inert for ground-truth purposes.
    let base = |c: usize| c * per_label;
    let v = vocab.len();
    let mut b = PlantedLinear {
        depth: 2,
        width,
        vocab: v,
        embed: vec![0.0; v * width],
        unembed: vec![0.0; v * width],
        bias: vec![0.0; v * v],
        readout: BTreeMap::from([(SEP, vec![1, 2, 3])]),
        features,
        roles,
    };

    for t in 0..v as u32 {
        let mut f = vec![0.0; n_feat];
        for a in f.iter_mut().skip(k * per_label) {
            *a = rng.gen_range(0.0..0.2);
        }
        match vocab.kind(t) {
            Some(super::vocab::TokenKind::Item(s)) => {
                if let Some(c) = gold.get(s).and_then(|g| cats.index_of(g)) {
                    f[base(c)] = 1.0;
                    f[base(c) + 1] = 1.0;
                } else if let Some(c) = stereotypes.get(s).and_then(|g| cats.index_of(g)) {
                    f[base(c) + 5] = 1.0;
                }
            }
            Some(super::vocab::TokenKind::Marker(Some(l))) => {
                if let Some(c) = cats.index_of(l) {
                    f[base(c) + 2] = 1.0;
                    f[base(c) + 3] = 1.0;
                }
            }
            Some(super::vocab::TokenKind::Context(c)) => f[base(c % k) + 4] = 1.0,
            _ => {}
        }
        b.set_embedding(t, &f);
    }
    for (c, label) in cats.labels.iter().enumerate() {
        let lt = vocab.label(label)? as usize;
        let mut row = vec![0.0; width];
        for (off, w) in [(0, 3.0), (1, 3.0), (2, 3.0), (3, 3.0), (4, 1.0)] {
            math::axpy(w, b.feature(base(c) + off), &mut row);
        }
        b.unembed[lt * width..(lt + 1) * width].copy_from_slice(&row);
    }
    let label_tokens: Vec<usize> = cats.labels.iter().map(|l| vocab.label(l).map(|t| t as usize)).collect::<Result<_>>()?;
    for out in 0..v {
        if !label_tokens.contains(&out) {
            b.bias[SEP as usize * v + out] = -50.0;
        }
    }
    for t in 0..v as u32 {
        match vocab.kind(t) {
            Some(super::vocab::TokenKind::Marker(_)) => b.bias[t as usize * v + SEP as usize] = 50.0,
            Some(super::vocab::TokenKind::Label(_)) => b.bias[t as usize * v + NL as usize] = 50.0,
            _ => {}
        }
    }
    Ok(b)
}
