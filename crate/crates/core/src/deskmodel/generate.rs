//! Greedy line-by-line generation with online detection of the final
//! left-hand-side position.

use serde::{Deserialize, Serialize};

use super::vocab::{DeskVocab, EOS, NL, SEP};
use super::{Backend, ResidualEdit};
use crate::error::Result;
use crate::math;

pub const MAX_NEW_TOKENS: usize = 160;

/// Edit applied at whichever position generation designates.
pub trait SiteEdit: Sync {
    fn touches_layer(&self, layer: usize) -> bool;
    fn apply(&self, layer: usize, resid: &mut [f64]);
}

/// A [`SiteEdit`] pinned to concrete positions.
pub struct AtPositions<'a> {
    pub edit: &'a dyn SiteEdit,
    pub positions: Vec<usize>,
}

impl ResidualEdit for AtPositions<'_> {
    fn touches(&self, layer: usize, position: usize) -> bool {
        self.positions.contains(&position) && self.edit.touches_layer(layer)
    }
    fn apply(&self, layer: usize, position: usize, resid: &mut [f64]) {
        if self.touches(layer, position) {
            self.edit.apply(layer, resid);
        }
    }
}

/// One output line: the context fed to the model and the index from which
/// tokens belong to the visible output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinePrompt {
    pub tokens: Vec<u32>,
    pub echo_from: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { max_new_tokens: MAX_NEW_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLine {
    /// Prompt tokens followed by generated tokens.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub echo_from: usize,
    /// Log-probability of each generated token when it was chosen.
    pub logprobs: Vec<f64>,
    /// Token before the first emitted separator.
    pub lhs_position: Option<usize>,
}

impl GeneratedLine {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    /// First token after the separator, if one was emitted.
    pub fn rhs_first(&self) -> Option<(usize, u32)> {
        let p = self.lhs_position? + 2;
        self.tokens.get(p).map(|&t| (p, t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub lines: Vec<GeneratedLine>,
    pub new_tokens: usize,
}

impl Generation {
    pub fn render(&self, vocab: &DeskVocab) -> String {
        self.lines.iter().map(|l| vocab.render(&l.tokens[l.echo_from..])).collect()
    }
}

/// Greedily complete each line until a newline, an end token, the backend's
/// context limit or the shared token budget. Once a line emits its separator at position `s`,
/// `ablation` (if any) is applied at position `s - 1` in every later
/// forward pass of that line.
pub fn generate<B: Backend + ?Sized>(
    backend: &B,
    lines: &[LinePrompt],
    ablation: Option<&dyn SiteEdit>,
    cfg: GenerationConfig,
) -> Result<Generation> {
    let mut out = Vec::with_capacity(lines.len());
    let mut budget = cfg.max_new_tokens;
    let max_len = backend.capabilities().max_len;
    for line in lines {
        let mut tokens = line.tokens.clone();
        let prompt_len = tokens.len();
        let mut logprobs = Vec::new();
        let mut lhs_position = None;
        while budget > 0 && tokens.len() < max_len {
            let lp = match (ablation, lhs_position) {
                (Some(edit), Some(p)) => {
                    let pinned = AtPositions { edit, positions: vec![p] };
                    backend.last_logprobs(&tokens, Some(&pinned))?
                }
                _ => backend.last_logprobs(&tokens, None)?,
            };
            let next = math::argmax(&lp);
            logprobs.push(lp[next]);
            let s = tokens.len();
            tokens.push(next as u32);
            budget -= 1;
            if next as u32 == SEP && lhs_position.is_none() && s > 0 {
                lhs_position = Some(s - 1);
            }
            if next as u32 == NL || next as u32 == EOS {
                break;
            }
        }
        out.push(GeneratedLine { tokens, prompt_len, echo_from: line.echo_from, logprobs, lhs_position });
    }
    Ok(Generation { new_tokens: cfg.max_new_tokens - budget, lines: out })
}
