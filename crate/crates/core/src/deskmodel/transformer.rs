//! Decoder-only transformer with pre-LayerNorm blocks, one attention head
//! per layer, a GELU MLP and a handwritten backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_edit, Backend, BackendCapabilities, CaptureRequest, ForwardOutput, HookPoint, ResidualEdit, TargetToken};
use crate::error::{AuditError, Result};
use crate::math;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub width: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
}

impl TransformerConfig {
    pub fn desk(vocab: usize) -> Self {
        TransformerConfig { vocab, width: 64, depth: 2, mlp_hidden: 128, max_len: 16 }
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    wu: usize,
    bu: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &TransformerConfig) -> Self {
        let (d, h, v) = (c.width, c.mlp_hidden, c.vocab);
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(v * d);
        let pos_emb = take(c.max_len * d);
        let layers = (0..c.depth)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * h),
                b1: take(h),
                w2: take(h * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let wu = take(d * v);
        let bu = take(v);
        Layout { tok_emb, pos_emb, layers, lnf_g, lnf_b, wu, bu, total: at }
    }

    /// Named tensors with their shapes, in storage order.
    pub fn tensors(&self, c: &TransformerConfig) -> Vec<(String, usize, Vec<usize>)> {
        let (d, h, v) = (c.width, c.mlp_hidden, c.vocab);
        let mut out = vec![("tok_emb".to_string(), self.tok_emb, vec![v, d]), ("pos_emb".into(), self.pos_emb, vec![c.max_len, d])];
        for (l, o) in self.layers.iter().enumerate() {
            for (name, off, shape) in [
                ("ln1_g", o.ln1_g, vec![d]),
                ("ln1_b", o.ln1_b, vec![d]),
                ("wq", o.wq, vec![d, d]),
                ("bq", o.bq, vec![d]),
                ("wk", o.wk, vec![d, d]),
                ("bk", o.bk, vec![d]),
                ("wv", o.wv, vec![d, d]),
                ("bv", o.bv, vec![d]),
                ("wo", o.wo, vec![d, d]),
                ("bo", o.bo, vec![d]),
                ("ln2_g", o.ln2_g, vec![d]),
                ("ln2_b", o.ln2_b, vec![d]),
                ("w1", o.w1, vec![d, h]),
                ("b1", o.b1, vec![h]),
                ("w2", o.w2, vec![h, d]),
                ("b2", o.b2, vec![d]),
            ] {
                out.push((format!("layer{l}.{name}"), off, shape));
            }
        }
        out.push(("lnf_g".into(), self.lnf_g, vec![d]));
        out.push(("lnf_b".into(), self.lnf_b, vec![d]));
        out.push(("wu".into(), self.wu, vec![d, v]));
        out.push(("bu".into(), self.bu, vec![v]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub config: TransformerConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

/// `y = b + x W` with `W` stored `in x out` row-major.
#[inline]
fn affine(x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    let out = y.len();
    y.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            math::axpy(xi, &w[i * out..(i + 1) * out], y);
        }
    }
}

/// Backward of [`affine`]: accumulate `dW += x dy^T`, `db += dy`, and
/// return `dx = W dy` added into `dx`.
#[inline]
fn affine_back(x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], grads: Option<(&mut [f64], &mut [f64])>) {
    let out = dy.len();
    for (i, dxi) in dx.iter_mut().enumerate() {
        *dxi += math::dot(&w[i * out..(i + 1) * out], dy);
    }
    if let Some((dw, db)) = grads {
        math::axpy(1.0, dy, db);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                math::axpy(xi, dy, &mut dw[i * out..(i + 1) * out]);
            }
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

fn layer_norm_back(dy: &[f64], xhat: &[f64], rstd: f64, g: &[f64], dx: &mut [f64], grads: Option<(&mut [f64], &mut [f64])>) {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dxhat[i] = dy[i] * g[i];
    }
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    for i in 0..dy.len() {
        dx[i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
    }
    if let Some((dg, db)) = grads {
        for i in 0..dy.len() {
            dg[i] += dy[i] * xhat[i];
            db[i] += dy[i];
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    x_in: Vec<Vec<f64>>,
    xhat1: Vec<Vec<f64>>,
    rstd1: Vec<f64>,
    a1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    att: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    xhat2: Vec<Vec<f64>>,
    rstd2: Vec<f64>,
    a2: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    layers: Vec<LayerCache>,
    xhatf: Vec<Vec<f64>>,
    rstdf: Vec<f64>,
    af: Vec<Vec<f64>>,
    captures: Vec<Vec<f64>>,
}

impl ToyTransformer {
    pub fn init(config: TransformerConfig, seed: u64) -> Self {
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = math::rng(seed);
        let (d, h, v) = (config.width, config.mlp_hidden, config.vocab);
        let mut fill = |p: &mut [f64], std: f64| {
            let a = std * 3f64.sqrt();
            p.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
        };
        fill(&mut params[layout.tok_emb..layout.tok_emb + v * d], 0.5);
        fill(&mut params[layout.pos_emb..layout.pos_emb + config.max_len * d], 0.1);
        let resid_scale = 1.0 / (2.0 * config.depth as f64).sqrt();
        for o in &layout.layers {
            params[o.ln1_g..o.ln1_g + d].iter_mut().for_each(|x| *x = 1.0);
            params[o.ln2_g..o.ln2_g + d].iter_mut().for_each(|x| *x = 1.0);
            for w in [o.wq, o.wk, o.wv] {
                fill(&mut params[w..w + d * d], 1.0 / (d as f64).sqrt());
            }
            fill(&mut params[o.wo..o.wo + d * d], resid_scale / (d as f64).sqrt());
            fill(&mut params[o.w1..o.w1 + d * h], 1.0 / (d as f64).sqrt());
            fill(&mut params[o.w2..o.w2 + h * d], resid_scale / (h as f64).sqrt());
        }
        params[layout.lnf_g..layout.lnf_g + d].iter_mut().for_each(|x| *x = 1.0);
        fill(&mut params[layout.wu..layout.wu + d * v], 1.0 / (d as f64).sqrt());
        ToyTransformer { config, params, layout }
    }

    pub fn from_params(config: TransformerConfig, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(AuditError::Contract(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        Ok(ToyTransformer { config, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn p(&self, off: usize, n: usize) -> &[f64] {
        &self.params[off..off + n]
    }

    /// Run the blocks, keeping everything the backward pass needs.
    pub fn trace(&self, tokens: &[u32], captures: &[CaptureRequest], edit: Option<&dyn ResidualEdit>) -> Result<Trace> {
        let c = &self.config;
        if tokens.len() > c.max_len {
            return Err(AuditError::Contract(format!("sequence of {} exceeds context {}", tokens.len(), c.max_len)));
        }
        let (d, hdim) = (c.width, c.mlp_hidden);
        let t_len = tokens.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                let mut e = self.p(self.layout.tok_emb + tok as usize * d, d).to_vec();
                math::axpy(1.0, self.p(self.layout.pos_emb + t * d, d), &mut e);
                e
            })
            .collect();
        let mut tr = Trace { captures: vec![Vec::new(); captures.len()], ..Default::default() };
        for (l, o) in self.layout.layers.iter().enumerate() {
            let mut lc = LayerCache::default();
            for (t, xt) in x.iter_mut().enumerate() {
                apply_edit(edit, l, t, xt);
            }
            for (ci, cr) in captures.iter().enumerate() {
                if cr.hook.layer == l {
                    tr.captures[ci] = x[cr.position].clone();
                }
            }
            for xt in &x {
                let mut xhat = vec![0.0; d];
                let mut a = vec![0.0; d];
                let rstd = layer_norm(xt, self.p(o.ln1_g, d), self.p(o.ln1_b, d), &mut xhat, &mut a);
                let mut q = vec![0.0; d];
                let mut k = vec![0.0; d];
                let mut v = vec![0.0; d];
                affine(&a, self.p(o.wq, d * d), self.p(o.bq, d), &mut q);
                affine(&a, self.p(o.wk, d * d), self.p(o.bk, d), &mut k);
                affine(&a, self.p(o.wv, d * d), self.p(o.bv, d), &mut v);
                lc.xhat1.push(xhat);
                lc.rstd1.push(rstd);
                lc.a1.push(a);
                lc.q.push(q);
                lc.k.push(k);
                lc.v.push(v);
            }
            lc.x_in = x.clone();
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t).map(|s| math::dot(&lc.q[t], &lc.k[s]) * scale).collect();
                let att = math::softmax(&scores);
                let mut z = vec![0.0; d];
                for (s, &w) in att.iter().enumerate() {
                    math::axpy(w, &lc.v[s], &mut z);
                }
                let mut o_out = vec![0.0; d];
                affine(&z, self.p(o.wo, d * d), self.p(o.bo, d), &mut o_out);
                math::axpy(1.0, &o_out, &mut x[t]);
                lc.att.push(att);
                lc.z.push(z);
            }
            for xt in x.iter_mut() {
                let mut xhat = vec![0.0; d];
                let mut a = vec![0.0; d];
                let rstd = layer_norm(xt, self.p(o.ln2_g, d), self.p(o.ln2_b, d), &mut xhat, &mut a);
                let mut pre = vec![0.0; hdim];
                affine(&a, self.p(o.w1, d * hdim), self.p(o.b1, hdim), &mut pre);
                let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
                let mut y = vec![0.0; d];
                affine(&act, self.p(o.w2, hdim * d), self.p(o.b2, d), &mut y);
                math::axpy(1.0, &y, xt);
                lc.xhat2.push(xhat);
                lc.rstd2.push(rstd);
                lc.a2.push(a);
                lc.pre.push(pre);
                lc.act.push(act);
            }
            tr.layers.push(lc);
        }
        for xt in &x {
            let mut xhat = vec![0.0; d];
            let mut a = vec![0.0; d];
            let rstd = layer_norm(xt, self.p(self.layout.lnf_g, d), self.p(self.layout.lnf_b, d), &mut xhat, &mut a);
            tr.xhatf.push(xhat);
            tr.rstdf.push(rstd);
            tr.af.push(a);
        }
        Ok(tr)
    }

    pub fn logits_at(&self, tr: &Trace, t: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.config.vocab];
        let v = self.config.vocab;
        affine(&tr.af[t], self.p(self.layout.wu, self.config.width * v), self.p(self.layout.bu, v), &mut z);
        z
    }

    /// Backpropagate `dlogits` (one entry per position, empty for none).
    ///
    /// Returns the gradient of the residual entering `stop_layer` at every
    /// position (or of the embeddings when `stop_layer` is `None`), and
    /// accumulates parameter gradients into `grads` when given. Residual
    /// gradients at sites touched by `edit` in layers above `stop_layer`
    /// are cut.
    pub fn backward(
        &self,
        tokens: &[u32],
        tr: &Trace,
        dlogits: &[Vec<f64>],
        stop_layer: Option<usize>,
        edit: Option<&dyn ResidualEdit>,
        mut grads: Option<&mut [f64]>,
    ) -> Vec<Vec<f64>> {
        let c = &self.config;
        let (d, hdim, v) = (c.width, c.mlp_hidden, c.vocab);
        let t_len = tokens.len();
        let scale = 1.0 / (d as f64).sqrt();
        let lo = &self.layout;
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            let dz = &dlogits[t];
            if dz.is_empty() {
                continue;
            }
            let mut daf = vec![0.0; d];
            match grads.as_deref_mut() {
                Some(g) => {
                    let (gw, gb) = g.split_at_mut(lo.bu);
                    affine_back(&tr.af[t], self.p(lo.wu, d * v), dz, &mut daf, Some((&mut gw[lo.wu..lo.wu + d * v], &mut gb[..v])));
                }
                None => affine_back(&tr.af[t], self.p(lo.wu, d * v), dz, &mut daf, None),
            }
            match grads.as_deref_mut() {
                Some(g) => {
                    let (gg, gb) = g.split_at_mut(lo.lnf_b);
                    layer_norm_back(
                        &daf,
                        &tr.xhatf[t],
                        tr.rstdf[t],
                        self.p(lo.lnf_g, d),
                        &mut dx[t],
                        Some((&mut gg[lo.lnf_g..lo.lnf_g + d], &mut gb[..d])),
                    );
                }
                None => layer_norm_back(&daf, &tr.xhatf[t], tr.rstdf[t], self.p(lo.lnf_g, d), &mut dx[t], None),
            }
        }

        let bottom = stop_layer.unwrap_or(0);
        for l in (bottom..c.depth).rev() {
            let o = &lo.layers[l];
            let lc = &tr.layers[l];
            // MLP
            let mut dx_mid = dx.clone();
            for t in 0..t_len {
                let dy = &dx[t];
                let mut dact = vec![0.0; hdim];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (gw, gb) = split2(g, o.w2, hdim * d, o.b2, d);
                        affine_back(&lc.act[t], self.p(o.w2, hdim * d), dy, &mut dact, Some((gw, gb)));
                    }
                    None => affine_back(&lc.act[t], self.p(o.w2, hdim * d), dy, &mut dact, None),
                }
                let dpre: Vec<f64> = dact.iter().zip(&lc.pre[t]).map(|(g, &u)| g * gelu_grad(u)).collect();
                let mut da2 = vec![0.0; d];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (gw, gb) = split2(g, o.w1, d * hdim, o.b1, hdim);
                        affine_back(&lc.a2[t], self.p(o.w1, d * hdim), &dpre, &mut da2, Some((gw, gb)));
                    }
                    None => affine_back(&lc.a2[t], self.p(o.w1, d * hdim), &dpre, &mut da2, None),
                }
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (gg, gb) = split2(g, o.ln2_g, d, o.ln2_b, d);
                        layer_norm_back(&da2, &lc.xhat2[t], lc.rstd2[t], self.p(o.ln2_g, d), &mut dx_mid[t], Some((gg, gb)));
                    }
                    None => layer_norm_back(&da2, &lc.xhat2[t], lc.rstd2[t], self.p(o.ln2_g, d), &mut dx_mid[t], None),
                }
            }
            // attention
            let mut dx_in = dx_mid.clone();
            let mut dq = vec![vec![0.0; d]; t_len];
            let mut dk = vec![vec![0.0; d]; t_len];
            let mut dv = vec![vec![0.0; d]; t_len];
            for t in 0..t_len {
                let mut dz = vec![0.0; d];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (gw, gb) = split2(g, o.wo, d * d, o.bo, d);
                        affine_back(&lc.z[t], self.p(o.wo, d * d), &dx_mid[t], &mut dz, Some((gw, gb)));
                    }
                    None => affine_back(&lc.z[t], self.p(o.wo, d * d), &dx_mid[t], &mut dz, None),
                }
                let att = &lc.att[t];
                let datt: Vec<f64> = (0..=t).map(|s| math::dot(&dz, &lc.v[s])).collect();
                let mix: f64 = att.iter().zip(&datt).map(|(a, g)| a * g).sum();
                for s in 0..=t {
                    math::axpy(att[s], &dz, &mut dv[s]);
                    let ds = att[s] * (datt[s] - mix) * scale;
                    if ds != 0.0 {
                        math::axpy(ds, &lc.k[s], &mut dq[t]);
                        math::axpy(ds, &lc.q[t], &mut dk[s]);
                    }
                }
            }
            for t in 0..t_len {
                let mut da1 = vec![0.0; d];
                for (w, b, dgo) in [(o.wq, o.bq, &dq[t]), (o.wk, o.bk, &dk[t]), (o.wv, o.bv, &dv[t])] {
                    match grads.as_deref_mut() {
                        Some(g) => {
                            let (gw, gb) = split2(g, w, d * d, b, d);
                            affine_back(&lc.a1[t], self.p(w, d * d), dgo, &mut da1, Some((gw, gb)));
                        }
                        None => affine_back(&lc.a1[t], self.p(w, d * d), dgo, &mut da1, None),
                    }
                }
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (gg, gb) = split2(g, o.ln1_g, d, o.ln1_b, d);
                        layer_norm_back(&da1, &lc.xhat1[t], lc.rstd1[t], self.p(o.ln1_g, d), &mut dx_in[t], Some((gg, gb)));
                    }
                    None => layer_norm_back(&da1, &lc.xhat1[t], lc.rstd1[t], self.p(o.ln1_g, d), &mut dx_in[t], None),
                }
            }
            if stop_layer == Some(l) {
                return dx_in;
            }
            if let Some(e) = edit {
                for (t, g) in dx_in.iter_mut().enumerate() {
                    if e.touches(l, t) {
                        g.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
            }
            dx = dx_in;
        }
        if let Some(g) = grads {
            for (t, &tok) in tokens.iter().enumerate() {
                let te = lo.tok_emb + tok as usize * d;
                math::axpy(1.0, &dx[t], &mut g[te..te + d]);
                let pe = lo.pos_emb + t * d;
                math::axpy(1.0, &dx[t], &mut g[pe..pe + d]);
            }
        }
        dx
    }
}

/// Two disjoint mutable windows `[a, a + na)` and `[b, b + nb)` of `g`, `a < b`.
fn split2(g: &mut [f64], a: usize, na: usize, b: usize, nb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + na <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + na], &mut hi[..nb])
}

impl Backend for ToyTransformer {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            depth: self.config.depth,
            width: self.config.width,
            max_len: self.config.max_len,
            vocab: self.config.vocab,
            analytic_gradients: true,
        }
    }

    fn forward(&self, tokens: &[u32], captures: &[CaptureRequest], edit: Option<&dyn ResidualEdit>) -> Result<ForwardOutput> {
        self.check_request(tokens, captures)?;
        let tr = self.trace(tokens, captures, edit)?;
        let logprobs = (0..tokens.len()).map(|t| math::log_softmax(&self.logits_at(&tr, t))).collect();
        Ok(ForwardOutput { logprobs, captures: tr.captures })
    }

    fn last_logprobs(&self, tokens: &[u32], edit: Option<&dyn ResidualEdit>) -> Result<Vec<f64>> {
        self.check_request(tokens, &[])?;
        let tr = self.trace(tokens, &[], edit)?;
        Ok(math::log_softmax(&self.logits_at(&tr, tokens.len() - 1)))
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
        if target.0 as usize >= self.config.vocab {
            return Err(AuditError::Contract(format!("target token {} outside vocabulary", target.0)));
        }
        let tr = self.trace(tokens, &[], edit)?;
        let last = tokens.len() - 1;
        let p = math::softmax(&self.logits_at(&tr, last));
        let mut dl = vec![Vec::new(); tokens.len()];
        dl[last] = p.iter().enumerate().map(|(i, pi)| if i == target.0 as usize { 1.0 - pi } else { -pi }).collect();
        let g = self.backward(tokens, &tr, &dl, Some(hook.layer), edit, None);
        Ok(g[position].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deskmodel::Patch;

    fn tiny() -> ToyTransformer {
        ToyTransformer::init(TransformerConfig { vocab: 11, width: 8, depth: 2, mlp_hidden: 12, max_len: 16 }, 5)
    }

    #[test]
    fn logprobs_normalize() {
        let m = tiny();
        let out = m.forward(&[1, 4, 7, 2], &[], None).unwrap();
        for lp in &out.logprobs {
            let s: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.last(), m.last_logprobs(&[1, 4, 7, 2], None).unwrap().as_slice());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = tiny();
        let toks = [1u32, 4, 7, 2, 9];
        let loss = |mm: &ToyTransformer| -> f64 {
            let out = mm.forward(&toks, &[], None).unwrap();
            (0..toks.len() - 1).map(|t| -out.logprobs[t][toks[t + 1] as usize]).sum()
        };
        let tr = m.trace(&toks, &[], None).unwrap();
        let mut dl = vec![Vec::new(); toks.len()];
        for t in 0..toks.len() - 1 {
            let p = math::softmax(&m.logits_at(&tr, t));
            dl[t] = p.iter().enumerate().map(|(i, pi)| if i == toks[t + 1] as usize { pi - 1.0 } else { *pi }).collect();
        }
        let mut g = vec![0.0; m.params.len()];
        m.backward(&toks, &tr, &dl, None, None, Some(&mut g));
        let mut rng = math::rng(9);
        let eps = 1e-5;
        for _ in 0..60 {
            let i = rng.gen_range(0..m.params.len());
            let mut a = m.clone();
            a.params[i] += eps;
            let mut b = m.clone();
            b.params[i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn residual_gradient_matches_finite_differences() {
        let m = tiny();
        let toks = [1u32, 4, 7, 2];
        for layer in 0..2 {
            for pos in 0..toks.len() {
                let cap = CaptureRequest { hook: HookPoint { layer }, position: pos };
                let x = m.forward(&toks, &[cap], None).unwrap().captures.remove(0);
                let g = m.logit_gradient(&toks, cap.hook, pos, TargetToken(3), None).unwrap();
                for i in 0..8 {
                    let f = |delta: f64| {
                        let mut v = x.clone();
                        v[i] += delta;
                        let p = Patch { hook: cap.hook, position: pos, value: v };
                        m.forward(&toks, &[], Some(&p)).unwrap().last()[3]
                    };
                    let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
                    assert!((fd - g[i]).abs() < 1e-7, "layer {layer} pos {pos}: {fd} vs {}", g[i]);
                }
            }
        }
    }
}
