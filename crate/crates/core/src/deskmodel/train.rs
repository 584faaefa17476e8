use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::transformer::{ToyTransformer, TransformerConfig};
use super::world::DeskWorld;
use crate::corpus::{generate_synthetic_corpus, Marker};
use crate::error::{AuditError, Result};
use crate::math;
use crate::promptgen::{Direction, TaskKind};

/// A token line and the first position whose next-token prediction is trained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingLine {
    pub tokens: Vec<u32>,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Decoupled weight decay on every parameter except the token and
    /// position embeddings, applied as `w -= lr * weight_decay * w`.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 4, batch_size: 32, lr: 5e-3, warmup_steps: 50, grad_clip: 1.0, weight_decay: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// How many lines to draw per item, and how many extra copies of each
/// uncued line of an ungrounded item to add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusMix {
    pub samples_per_item: usize,
    pub uncued_repeats: usize,
}

impl Default for CorpusMix {
    fn default() -> Self {
        CorpusMix { samples_per_item: 50, uncued_repeats: 4 }
    }
}

/// Sample training lines for every (task, direction), shuffled.
pub fn training_corpus(world: &DeskWorld, tasks: &[(TaskKind, Direction)], mix: CorpusMix, seed: u64) -> Result<Vec<TrainingLine>> {
    let mut lines = Vec::new();
    for (i, &(kind, dir)) in tasks.iter().enumerate() {
        let mut spec = world.spec(kind)?.clone();
        spec.samples_per_item = mix.samples_per_item;
        spec.seed = math::derive_seed(seed, 0x7A5C + i as u64);
        for s in generate_synthetic_corpus(&spec)? {
            let (tokens, start) = world.training_line(kind, dir, &s)?;
            let copies = if s.marker == Marker::Neutral && !spec.items[s.item].grounded { 1 + mix.uncued_repeats } else { 1 };
            for _ in 0..copies {
                lines.push(TrainingLine { tokens: tokens.clone(), start });
            }
        }
    }
    lines.shuffle(&mut math::rng(math::derive_seed(seed, 0x5F)));
    Ok(lines)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.99;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, decay_rates: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            params[i] -= lr * decay_rates[i] * params[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mean next-token cross-entropy of one line and its parameter gradient,
/// accumulated into `grads` with weight `scale`.
fn line_loss(model: &ToyTransformer, line: &TrainingLine, scale: f64, grads: &mut [f64]) -> Result<(f64, usize)> {
    let toks = &line.tokens;
    let tr = model.trace(toks, &[], None)?;
    let mut dl = vec![Vec::new(); toks.len()];
    let mut loss = 0.0;
    let mut n = 0;
    for t in line.start..toks.len() - 1 {
        let p = math::softmax(&model.logits_at(&tr, t));
        let y = toks[t + 1] as usize;
        loss -= p[y].max(1e-300).ln();
        dl[t] = p.iter().enumerate().map(|(i, pi)| scale * if i == y { pi - 1.0 } else { *pi }).collect();
        n += 1;
    }
    model.backward(toks, &tr, &dl, None, None, Some(grads));
    Ok((loss, n))
}

/// Train with Adam on next-token loss over the generated part of each line.
/// Deterministic for a fixed seed.
pub fn train_toy_transformer(
    lines: &[TrainingLine],
    model_cfg: TransformerConfig,
    cfg: &TrainConfig,
) -> Result<(ToyTransformer, TrainReport)> {
    if lines.is_empty() {
        return Err(AuditError::Validation("empty training corpus".into()));
    }
    let mut model = ToyTransformer::init(model_cfg, cfg.seed);
    let n = model.params.len();
    let mut adam = Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };
    let mut decay_rates = vec![0.0; n];
    for (name, off, shape) in model.layout().tensors(&model.config) {
        if !name.ends_with("_emb") {
            let len: usize = shape.iter().product();
            decay_rates[off..off + len].iter_mut().for_each(|r| *r = cfg.weight_decay);
        }
    }
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut rng = math::rng(math::derive_seed(cfg.seed, 0x0D3));
    let steps_per_epoch = lines.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grads = vec![0.0; n];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let positions: usize = batch.iter().map(|&i| lines[i].tokens.len() - 1 - lines[i].start).sum();
            let scale = 1.0 / positions.max(1) as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (l, c) = line_loss(&model, &lines[i], scale, &mut grads)?;
                batch_loss += l;
                epoch_count += c;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(AuditError::Training(format!(
                    "non-finite loss or gradient at epoch {epoch}, step {step} (batch loss {batch_loss})"
                )));
            }
            epoch_loss += batch_loss;
            let gnorm = math::norm(&grads);
            if gnorm > cfg.grad_clip {
                let s = cfg.grad_clip / gnorm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            let warm = ((step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
            let decay = 1.0 - 0.9 * step as f64 / total_steps.max(1) as f64;
            adam.step(&mut model.params, &grads, cfg.lr * warm * decay, &decay_rates);
            step += 1;
        }
        let mean = epoch_loss / epoch_count.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok((model, TrainReport { epoch_losses, steps: step }))
}
