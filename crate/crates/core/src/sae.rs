//! Sparse autoencoders over residual activations: a rectified affine
//! encoder, an affine decoder, a trainer and exact planted variants.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deskmodel::checkpoint::Checkpoint;
use crate::deskmodel::generate::SiteEdit;
use crate::error::{AuditError, Result};
use crate::math;

/// One SAE feature: its layer and index within that layer's SAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub layer: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeParams {
    pub layer: usize,
    pub width: usize,
    pub n_features: usize,
    /// `n_features x width`
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    /// `n_features x width`; row `j` is the decode direction of feature `j`.
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
}

impl SaeParams {
    fn check_shapes(&self) -> Result<()> {
        let (n, w) = (self.n_features, self.width);
        if self.w_enc.len() != n * w || self.w_dec.len() != n * w || self.b_enc.len() != n || self.b_dec.len() != w {
            return Err(AuditError::Contract(format!("SAE tensors inconsistent with {n} features over width {w}")));
        }
        Ok(())
    }

    pub fn decoder_row(&self, j: usize) -> &[f64] {
        &self.w_dec[j * self.width..(j + 1) * self.width]
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.width {
            return Err(AuditError::Contract(format!("residual width {} != SAE width {}", x.len(), self.width)));
        }
        Ok(self.encode_unchecked(x))
    }

    fn encode_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.n_features];
        math::matvec(&self.w_enc, self.n_features, self.width, x, &mut f);
        for (fj, b) in f.iter_mut().zip(&self.b_enc) {
            *fj = (*fj + b).max(0.0);
        }
        f
    }

    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.n_features {
            return Err(AuditError::Contract(format!("feature width {} != SAE features {}", f.len(), self.n_features)));
        }
        Ok(self.decode_unchecked(f))
    }

    fn decode_unchecked(&self, f: &[f64]) -> Vec<f64> {
        let mut x = self.b_dec.clone();
        for (j, &a) in f.iter().enumerate() {
            if a != 0.0 {
                math::axpy(a, self.decoder_row(j), &mut x);
            }
        }
        x
    }

    /// Map a residual gradient to a gradient over feature activations.
    pub fn pullback(&self, grad_resid: &[f64]) -> Result<Vec<f64>> {
        if grad_resid.len() != self.width {
            return Err(AuditError::Contract("gradient width does not match SAE".into()));
        }
        let mut g = vec![0.0; self.n_features];
        math::matvec(&self.w_dec, self.n_features, self.width, grad_resid, &mut g);
        Ok(g)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.encode(x)?;
        Ok(self.decode_unchecked(&f))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "layer": self.layer, "width": self.width, "n_features": self.n_features });
        let mut c = Checkpoint::new("sae", meta);
        c.push("w_enc", vec![self.n_features, self.width], self.w_enc.clone())?;
        c.push("b_enc", vec![self.n_features], self.b_enc.clone())?;
        c.push("w_dec", vec![self.n_features, self.width], self.w_dec.clone())?;
        c.push("b_dec", vec![self.width], self.b_dec.clone())?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            c.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| AuditError::Contract(format!("SAE checkpoint lacks `{k}`")))
        };
        let sae = SaeParams {
            layer: field("layer")?,
            width: field("width")?,
            n_features: field("n_features")?,
            w_enc: c.tensor("w_enc")?.data.clone(),
            b_enc: c.tensor("b_enc")?.data.clone(),
            w_dec: c.tensor("w_dec")?.data.clone(),
            b_dec: c.tensor("b_dec")?.data.clone(),
        };
        sae.check_shapes()?;
        Ok(sae)
    }
}

/// SAE whose decode directions are the rows of `basis` (`n x width`) and
/// whose encoder is the left pseudo-inverse, so `decode(encode(x)) = x` for
/// every non-negative combination of the rows.
pub fn planted_sae(basis: &[f64], n: usize, width: usize, layer: usize) -> Result<SaeParams> {
    if n == 0 || basis.len() != n * width {
        return Err(AuditError::Contract(format!("basis must be {n} x {width}")));
    }
    // basis is n x width; its transpose (width x n) has the left inverse we need
    let mut bt = vec![0.0; width * n];
    for j in 0..n {
        for i in 0..width {
            bt[i * n + j] = basis[j * width + i];
        }
    }
    let w_enc = math::left_pseudo_inverse(&bt, width, n)
        .ok_or_else(|| AuditError::Validation(format!("planted basis of {n} directions is rank-deficient")))?;
    Ok(SaeParams { layer, width, n_features: n, w_enc, b_enc: vec![0.0; n], w_dec: basis.to_vec(), b_dec: vec![0.0; width] })
}

/// Planted SAE with a `+v` and a `-v` feature per basis row (features
/// `2j` and `2j + 1`), exact on the whole span of the basis.
pub fn planted_sae_signed(basis: &[f64], n: usize, width: usize, layer: usize) -> Result<SaeParams> {
    let half = planted_sae(basis, n, width, layer)?;
    let mut w_enc = Vec::with_capacity(2 * n * width);
    let mut w_dec = Vec::with_capacity(2 * n * width);
    for j in 0..n {
        let e = &half.w_enc[j * width..(j + 1) * width];
        let d = half.decoder_row(j);
        w_enc.extend_from_slice(e);
        w_enc.extend(e.iter().map(|v| -v));
        w_dec.extend_from_slice(d);
        w_dec.extend(d.iter().map(|v| -v));
    }
    Ok(SaeParams { layer, width, n_features: 2 * n, w_enc, b_enc: vec![0.0; 2 * n], w_dec, b_dec: vec![0.0; width] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub n_features: usize,
    pub l1: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig { n_features: 256, l1: 1e-2, epochs: 10, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    /// Mean objective over each epoch, evaluated after the epoch's decode renormalization.
    pub epoch_objectives: Vec<f64>,
    pub mean_l0: f64,
    pub r2: f64,
}

/// Mean squared reconstruction error plus `l1` times the mean feature L1 norm
/// weighted by decode-row norms.
pub fn objective(sae: &SaeParams, samples: &[Vec<f64>], l1: f64) -> f64 {
    let norms: Vec<f64> = (0..sae.n_features).map(|j| math::norm(sae.decoder_row(j))).collect();
    let total: f64 = samples
        .iter()
        .map(|x| {
            let f = sae.encode_unchecked(x);
            let xh = sae.decode_unchecked(&f);
            let se: f64 = x.iter().zip(&xh).map(|(a, b)| (a - b).powi(2)).sum();
            se + l1 * f.iter().zip(&norms).map(|(a, n)| a * n).sum::<f64>()
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Fraction of activation variance explained by `decode(encode(x))`.
pub fn r_squared(sae: &SaeParams, samples: &[Vec<f64>]) -> Result<f64> {
    let (sse, sst) = sse_sst(sae, samples)?;
    Ok(if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    })
}

fn sse_sst(sae: &SaeParams, samples: &[Vec<f64>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(AuditError::Validation("no samples".into()));
    }
    let w = sae.width;
    let mut mean = vec![0.0; w];
    for x in samples {
        if x.len() != w {
            return Err(AuditError::Contract("sample width does not match SAE".into()));
        }
        math::axpy(1.0 / samples.len() as f64, x, &mut mean);
    }
    let mut sse = 0.0;
    let mut sst = 0.0;
    for x in samples {
        let xh = sae.reconstruct(x)?;
        sse += x.iter().zip(&xh).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        sst += x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sse, sst))
}

/// Mean number of active features per sample.
pub fn mean_l0(sae: &SaeParams, samples: &[Vec<f64>]) -> f64 {
    let active: usize = samples.iter().map(|x| sae.encode_unchecked(x).iter().filter(|a| **a > 0.0).count()).sum();
    active as f64 / samples.len().max(1) as f64
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn renormalize_decoder(sae: &mut SaeParams) {
    let w = sae.width;
    for j in 0..sae.n_features {
        let n = math::norm(&sae.w_dec[j * w..(j + 1) * w]);
        if n > 0.0 {
            sae.w_dec[j * w..(j + 1) * w].iter_mut().for_each(|v| *v /= n);
            sae.w_enc[j * w..(j + 1) * w].iter_mut().for_each(|v| *v *= n);
            sae.b_enc[j] *= n;
        }
    }
}

/// Train an SAE with Adam on squared error plus an L1 penalty on feature
/// activations. Decode rows are renormalized to unit length after every
/// epoch, rescaling the encoder so the map itself is unchanged.
pub fn train_sae(samples: &[Vec<f64>], layer: usize, cfg: &SaeTrainConfig) -> Result<(SaeParams, SaeTrainReport)> {
    let n = cfg.n_features;
    if n == 0 || cfg.batch_size == 0 {
        return Err(AuditError::Validation("SAE needs at least one feature and a positive batch size".into()));
    }
    if samples.len() < 10 * n {
        return Err(AuditError::Validation(format!("SAE training needs >= {} samples, got {}", 10 * n, samples.len())));
    }
    let w = samples[0].len();
    if samples.iter().any(|x| x.len() != w) {
        return Err(AuditError::Contract("activation samples have mixed widths".into()));
    }
    let mut rng = math::rng(cfg.seed);
    let b_dec = geometric_median(samples, 100);
    let mut w_dec: Vec<f64> = (0..n * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for j in 0..n {
        let r = &mut w_dec[j * w..(j + 1) * w];
        let s = math::norm(r);
        r.iter_mut().for_each(|v| *v /= s);
    }
    let mut sae = SaeParams { layer, width: w, n_features: n, w_enc: w_dec.clone(), b_enc: vec![0.0; n], w_dec, b_dec };

    let mut adam_we = AdamState::new(n * w);
    let mut adam_be = AdamState::new(n);
    let mut adam_wd = AdamState::new(n * w);
    let mut adam_bd = AdamState::new(w);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_objectives = Vec::with_capacity(cfg.epochs);
    let (mut g_we, mut g_be, mut g_wd, mut g_bd) = (vec![0.0; n * w], vec![0.0; n], vec![0.0; n * w], vec![0.0; w]);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            g_we.iter_mut().chain(g_be.iter_mut()).chain(g_wd.iter_mut()).chain(g_bd.iter_mut()).for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let norms: Vec<f64> = (0..n).map(|j| math::norm(sae.decoder_row(j))).collect();
            for &i in batch {
                let x = &samples[i];
                let f = sae.encode_unchecked(x);
                let xh = sae.decode_unchecked(&f);
                let r: Vec<f64> = xh.iter().zip(x).map(|(a, b)| 2.0 * (a - b) * scale).collect();
                math::axpy(1.0, &r, &mut g_bd);
                for j in 0..n {
                    if f[j] <= 0.0 {
                        continue;
                    }
                    let row = j * w..(j + 1) * w;
                    math::axpy(f[j], &r, &mut g_wd[row.clone()]);
                    let dec = &sae.w_dec[row.clone()];
                    let gf = math::dot(dec, &r) + cfg.l1 * norms[j] * scale;
                    if norms[j] > 0.0 {
                        math::axpy(cfg.l1 * f[j] * scale / norms[j], dec, &mut g_wd[row.clone()]);
                    }
                    math::axpy(gf, x, &mut g_we[row]);
                    g_be[j] += gf;
                }
            }
            if [&g_we, &g_be, &g_wd, &g_bd].iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(AuditError::Training(format!("non-finite SAE gradient in epoch {epoch}")));
            }
            adam_we.step(&mut sae.w_enc, &g_we, cfg.lr);
            adam_be.step(&mut sae.b_enc, &g_be, cfg.lr);
            adam_wd.step(&mut sae.w_dec, &g_wd, cfg.lr);
            adam_bd.step(&mut sae.b_dec, &g_bd, cfg.lr);
        }
        renormalize_decoder(&mut sae);
        let obj = objective(&sae, samples, cfg.l1);
        if !obj.is_finite() {
            return Err(AuditError::Training(format!("SAE objective diverged in epoch {epoch}")));
        }
        log::debug!("sae layer {layer} epoch {epoch}: objective {obj:.6}");
        epoch_objectives.push(obj);
    }
    let report = SaeTrainReport { epoch_objectives, mean_l0: mean_l0(&sae, samples), r2: r_squared(&sae, samples)? };
    Ok((sae, report))
}

/// Weiszfeld iterations from the coordinate mean.
pub fn geometric_median(samples: &[Vec<f64>], iterations: usize) -> Vec<f64> {
    let w = samples.first().map(|x| x.len()).unwrap_or(0);
    let mut m = vec![0.0; w];
    for x in samples {
        math::axpy(1.0 / samples.len() as f64, x, &mut m);
    }
    for _ in 0..iterations {
        let mut num = vec![0.0; w];
        let mut den = 0.0;
        let mut at_sample = None;
        for x in samples {
            let d = x.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d < 1e-12 {
                at_sample = Some(x);
                continue;
            }
            math::axpy(1.0 / d, x, &mut num);
            den += 1.0 / d;
        }
        if den == 0.0 {
            break;
        }
        let next: Vec<f64> = num.iter().map(|v| v / den).collect();
        let shift = next.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        m = next;
        if shift < 1e-12 {
            break;
        }
        if let Some(x) = at_sample {
            // an iterate landed on a sample point; keep it if it is the optimum
            if m.iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-12) {
                break;
            }
        }
    }
    m
}

/// SAEs bound to layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeBank {
    pub saes: BTreeMap<usize, SaeParams>,
}

impl SaeBank {
    pub fn insert(&mut self, sae: SaeParams) {
        self.saes.insert(sae.layer, sae);
    }

    pub fn get(&self, layer: usize) -> Result<&SaeParams> {
        self.saes.get(&layer).ok_or_else(|| AuditError::Contract(format!("no SAE bound at layer {layer}")))
    }

    pub fn layers(&self) -> Vec<usize> {
        self.saes.keys().copied().collect()
    }
}

/// Residual replacement by `decode(encode(x))` with member features zeroed.
///
/// With `keep_error` the reconstruction error `x - decode(encode(x))` is
/// added back, so only the ablated features change the residual.
pub struct Ablation<'a> {
    pub members: BTreeMap<usize, (&'a SaeParams, Vec<usize>)>,
    pub keep_error: bool,
}

impl<'a> Ablation<'a> {
    /// Bind `features` to `layers`; every feature's layer must be listed
    /// and carry an SAE. Listed layers without members are reconstructed.
    pub fn new(bank: &'a SaeBank, layers: &[usize], features: &[FeatureRef], keep_error: bool) -> Result<Self> {
        let mut members = BTreeMap::new();
        for &l in layers {
            members.insert(l, (bank.get(l)?, Vec::new()));
        }
        for f in features {
            let (sae, list) = members
                .get_mut(&f.layer)
                .ok_or_else(|| AuditError::Contract(format!("feature {}:{} lies outside the ablated layers", f.layer, f.index)))?;
            if f.index >= sae.n_features {
                return Err(AuditError::Contract(format!("feature index {} >= {}", f.index, sae.n_features)));
            }
            list.push(f.index);
        }
        Ok(Ablation { members, keep_error })
    }
}

impl SiteEdit for Ablation<'_> {
    fn touches_layer(&self, layer: usize) -> bool {
        self.members.contains_key(&layer)
    }

    fn apply(&self, layer: usize, resid: &mut [f64]) {
        let Some((sae, members)) = self.members.get(&layer) else { return };
        let mut f = sae.encode_unchecked(resid);
        let err: Option<Vec<f64>> = self.keep_error.then(|| {
            let xh = sae.decode_unchecked(&f);
            resid.iter().zip(&xh).map(|(a, b)| a - b).collect()
        });
        for &j in members {
            f[j] = 0.0;
        }
        let mut out = sae.decode_unchecked(&f);
        if let Some(e) = err {
            math::axpy(1.0, &e, &mut out);
        }
        resid.copy_from_slice(&out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn orthonormal_planted_round_trip_on_span() {
        let mut rng = math::rng(1);
        let (n, w) = (6, 10);
        let basis = math::orthonormal_rows(n, w, &mut rng);
        let sae = planted_sae_signed(&basis, n, w, 0).unwrap();
        for _ in 0..20 {
            let c = rand_vec(&mut rng, n);
            let mut x = vec![0.0; w];
            for j in 0..n {
                math::axpy(c[j], &basis[j * w..(j + 1) * w], &mut x);
            }
            let back = sae.reconstruct(&x).unwrap();
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn off_span_component_is_dropped() {
        let mut rng = math::rng(2);
        let (n, w) = (3, 5);
        let full = math::orthonormal_rows(w, w, &mut rng);
        let sae = planted_sae_signed(&full[..n * w], n, w, 0).unwrap();
        let mut x = vec![0.0; w];
        math::axpy(0.7, &full[0..w], &mut x);
        let mut off = x.clone();
        math::axpy(-1.3, &full[4 * w..5 * w], &mut off);
        let back = sae.reconstruct(&off).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_encode_recovers_single_activation() {
        let mut rng = math::rng(3);
        let (n, w) = (4, 7);
        let basis = math::orthonormal_rows(n, w, &mut rng);
        let sae = planted_sae(&basis, n, w, 0).unwrap();
        let mut x = vec![0.0; w];
        math::axpy(1.75, &basis[2 * w..3 * w], &mut x);
        let f = sae.encode(&x).unwrap();
        for (j, a) in f.iter().enumerate() {
            let want = if j == 2 { 1.75 } else { 0.0 };
            assert!((a - want).abs() < 1e-12);
        }
        assert!(sae.encode(&sae.b_dec).unwrap().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn identity_basis_encodes_as_rectifier() {
        let w = 4;
        let mut basis = vec![0.0; w * w];
        (0..w).for_each(|i| basis[i * w + i] = 1.0);
        let sae = planted_sae(&basis, w, w, 0).unwrap();
        let x = [0.5, -1.0, 2.0, -0.0];
        assert_eq!(sae.encode(&x).unwrap(), vec![0.5, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn rank_deficient_basis_is_rejected() {
        let basis = [1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        assert!(matches!(planted_sae(&basis, 2, 3, 0), Err(AuditError::Validation(_))));
    }

    #[test]
    fn decode_of_zero_is_bias_and_widths_are_checked() {
        let mut rng = math::rng(4);
        let sae = SaeParams {
            layer: 1,
            width: 3,
            n_features: 2,
            w_enc: rand_vec(&mut rng, 6),
            b_enc: rand_vec(&mut rng, 2),
            w_dec: rand_vec(&mut rng, 6),
            b_dec: rand_vec(&mut rng, 3),
        };
        assert_eq!(sae.decode(&[0.0, 0.0]).unwrap(), sae.b_dec);
        assert!(sae.decode(&[0.0]).is_err());
        assert!(sae.encode(&[0.0; 4]).is_err());
        let c = sae.to_checkpoint().unwrap();
        assert_eq!(SaeParams::from_checkpoint(&c).unwrap(), sae);
    }

    fn subspace_samples(seed: u64, n: usize, k: usize, w: usize) -> Vec<Vec<f64>> {
        let mut rng = math::rng(seed);
        let basis = math::orthonormal_rows(k, w, &mut rng);
        (0..n)
            .map(|_| {
                let mut x = vec![0.3; w];
                for j in 0..k {
                    if rng.gen::<f64>() < 0.4 {
                        math::axpy(rng.gen_range(0.5..2.0), &basis[j * w..(j + 1) * w], &mut x);
                    }
                }
                x
            })
            .collect()
    }

    #[test]
    fn trained_sae_recovers_planted_subspace() {
        let samples = subspace_samples(5, 800, 4, 12);
        let cfg = SaeTrainConfig { n_features: 16, l1: 1e-3, epochs: 40, batch_size: 16, lr: 5e-3, seed: 9 };
        let (sae, rep) = train_sae(&samples, 0, &cfg).unwrap();
        let held = subspace_samples(5, 1000, 4, 12)[800..].to_vec();
        assert!(rep.r2 >= 0.98, "{rep:?}");
        assert!(r_squared(&sae, &held).unwrap() >= 0.98);
        let again = train_sae(&samples, 0, &cfg).unwrap().0;
        assert_eq!(again, sae);
        let first = rep.epoch_objectives[0];
        let last = *rep.epoch_objectives.last().unwrap();
        assert!(last < first);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let samples = vec![vec![0.0; 4]; 50];
        let cfg = SaeTrainConfig { n_features: 8, ..Default::default() };
        assert!(train_sae(&samples, 0, &cfg).is_err());
    }

    #[test]
    fn ablation_of_nothing_is_exact_through_signed_identity() {
        let w = 5;
        let mut basis = vec![0.0; w * w];
        (0..w).for_each(|i| basis[i * w + i] = 1.0);
        let mut bank = SaeBank::default();
        bank.insert(planted_sae_signed(&basis, w, w, 0).unwrap());
        let ab = Ablation::new(&bank, &[0], &[], false).unwrap();
        let mut x = vec![0.3, -1.7, 2.5, 0.0, -0.01];
        let orig = x.clone();
        ab.apply(0, &mut x);
        assert_eq!(x, orig);
        let all: Vec<FeatureRef> = (0..2 * w).map(|index| FeatureRef { layer: 0, index }).collect();
        let ab = Ablation::new(&bank, &[0], &all, false).unwrap();
        ab.apply(0, &mut x);
        assert_eq!(x, bank.get(0).unwrap().b_dec);
        assert!(Ablation::new(&bank, &[1], &[], false).is_err());
        assert!(Ablation::new(&bank, &[0], &[FeatureRef { layer: 1, index: 0 }], false).is_err());
    }
}
