//! Model backends: the contract the scoring and intervention stages rely on,
//! plus the two desk-scale implementations.

pub mod checkpoint;
pub mod generate;
pub mod planted;
pub mod train;
pub mod transformer;
pub mod vocab;
pub mod world;

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

pub use generate::{generate, GeneratedLine, Generation, GenerationConfig, LinePrompt, MAX_NEW_TOKENS};
pub use planted::{PlantedLinear, Role};
pub use transformer::{ToyTransformer, TransformerConfig};
pub use vocab::DeskVocab;

/// Residual-stream site: the input to block `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRequest {
    pub hook: HookPoint,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetToken(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub depth: usize,
    pub width: usize,
    pub vocab: usize,
    /// Longest sequence a forward pass accepts.
    pub max_len: usize,
    pub analytic_gradients: bool,
}

/// In-place modification of the residual stream during a forward pass.
///
/// `apply` is called with the residual entering block `layer` at
/// `position`, for every layer and position, and must be deterministic.
pub trait ResidualEdit: Sync {
    fn touches(&self, layer: usize, position: usize) -> bool;
    fn apply(&self, layer: usize, position: usize, resid: &mut [f64]);
}

/// Replace the residual at one site by a fixed vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub hook: HookPoint,
    pub position: usize,
    pub value: Vec<f64>,
}

impl ResidualEdit for Patch {
    fn touches(&self, layer: usize, position: usize) -> bool {
        layer == self.hook.layer && position == self.position
    }
    fn apply(&self, layer: usize, position: usize, resid: &mut [f64]) {
        if self.touches(layer, position) {
            resid.copy_from_slice(&self.value);
        }
    }
}

/// Several edits applied in order.
pub struct EditStack<'a>(pub Vec<&'a dyn ResidualEdit>);

impl ResidualEdit for EditStack<'_> {
    fn touches(&self, layer: usize, position: usize) -> bool {
        self.0.iter().any(|e| e.touches(layer, position))
    }
    fn apply(&self, layer: usize, position: usize, resid: &mut [f64]) {
        for e in &self.0 {
            e.apply(layer, position, resid);
        }
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Next-token log-probabilities at every position.
    pub logprobs: Vec<Vec<f64>>,
    /// Captured residuals, in request order.
    pub captures: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn last(&self) -> &[f64] {
        self.logprobs.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

pub trait Backend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    fn forward(&self, tokens: &[u32], captures: &[CaptureRequest], edit: Option<&dyn ResidualEdit>) -> Result<ForwardOutput>;

    /// Log-probabilities at the final position only.
    fn last_logprobs(&self, tokens: &[u32], edit: Option<&dyn ResidualEdit>) -> Result<Vec<f64>> {
        Ok(self.forward(tokens, &[], edit)?.last().to_vec())
    }

    /// Gradient of the final-position log-probability of `target` with
    /// respect to the residual entering block `hook.layer` at `position`
    /// (after any edit at that site). Paths through other edited sites
    /// are treated as constant.
    fn logit_gradient(
        &self,
        tokens: &[u32],
        hook: HookPoint,
        position: usize,
        target: TargetToken,
        edit: Option<&dyn ResidualEdit>,
    ) -> Result<Vec<f64>>;

    fn check_request(&self, tokens: &[u32], captures: &[CaptureRequest]) -> Result<()> {
        let caps = self.capabilities();
        if tokens.is_empty() {
            return Err(AuditError::Contract("empty prompt".into()));
        }
        if let Some(t) = tokens.iter().find(|t| **t as usize >= caps.vocab) {
            return Err(AuditError::Contract(format!("token {t} outside vocabulary of {}", caps.vocab)));
        }
        for c in captures {
            if c.hook.layer >= caps.depth {
                return Err(AuditError::Contract(format!("hook layer {} >= depth {}", c.hook.layer, caps.depth)));
            }
            if c.position >= tokens.len() {
                return Err(AuditError::Contract(format!("capture position {} outside prompt", c.position)));
            }
        }
        Ok(())
    }
}

/// Final-position log-probabilities plus captured residuals.
pub fn forward_with_capture<B: Backend + ?Sized>(
    backend: &B,
    tokens: &[u32],
    captures: &[CaptureRequest],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let out = backend.forward(tokens, captures, None)?;
    Ok((out.last().to_vec(), out.captures))
}

/// Final-position log-probabilities with the residual at one site replaced.
pub fn forward_with_patch<B: Backend + ?Sized>(
    backend: &B,
    tokens: &[u32],
    hook: HookPoint,
    position: usize,
    value: &[f64],
) -> Result<Vec<f64>> {
    let caps = backend.capabilities();
    if value.len() != caps.width {
        return Err(AuditError::Contract(format!("patch width {} != residual width {}", value.len(), caps.width)));
    }
    if hook.layer >= caps.depth || position >= tokens.len() {
        return Err(AuditError::Contract("patch site outside model or prompt".into()));
    }
    let patch = Patch { hook, position, value: value.to_vec() };
    Ok(backend.forward(tokens, &[], Some(&patch))?.last().to_vec())
}

pub(crate) fn apply_edit(edit: Option<&dyn ResidualEdit>, layer: usize, position: usize, resid: &mut [f64]) {
    if let Some(e) = edit {
        if e.touches(layer, position) {
            e.apply(layer, position, resid);
        }
    }
}

/// Either desk backend behind one type, for the pipeline.
pub enum DeskBackend {
    Planted(PlantedLinear),
    Toy(ToyTransformer),
}

impl Backend for DeskBackend {
    fn capabilities(&self) -> BackendCapabilities {
        match self {
            DeskBackend::Planted(b) => b.capabilities(),
            DeskBackend::Toy(b) => b.capabilities(),
        }
    }

    fn forward(&self, tokens: &[u32], captures: &[CaptureRequest], edit: Option<&dyn ResidualEdit>) -> Result<ForwardOutput> {
        match self {
            DeskBackend::Planted(b) => b.forward(tokens, captures, edit),
            DeskBackend::Toy(b) => b.forward(tokens, captures, edit),
        }
    }

    fn last_logprobs(&self, tokens: &[u32], edit: Option<&dyn ResidualEdit>) -> Result<Vec<f64>> {
        match self {
            DeskBackend::Planted(b) => b.last_logprobs(tokens, edit),
            DeskBackend::Toy(b) => b.last_logprobs(tokens, edit),
        }
    }

    fn logit_gradient(
        &self,
        tokens: &[u32],
        hook: HookPoint,
        position: usize,
        target: TargetToken,
        edit: Option<&dyn ResidualEdit>,
    ) -> Result<Vec<f64>> {
        match self {
            DeskBackend::Planted(b) => b.logit_gradient(tokens, hook, position, target, edit),
            DeskBackend::Toy(b) => b.logit_gradient(tokens, hook, position, target, edit),
        }
    }
}
