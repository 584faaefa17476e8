//! Small dense helpers shared by the desk backends, the SAE and scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `n` orthonormal directions in `width` dimensions, stored row-major
/// (`n x width`), via Gram-Schmidt on uniform noise.
pub fn orthonormal_rows<R: rand::Rng>(n: usize, width: usize, rng: &mut R) -> Vec<f64> {
    assert!(n <= width, "cannot fit {n} orthonormal rows in {width} dimensions");
    let mut rows: Vec<f64> = Vec::with_capacity(n * width);
    while rows.len() < n * width {
        let mut v: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for r in rows.chunks(width) {
                let c = dot(r, &v);
                axpy(-c, r, &mut v);
            }
        }
        let nv = norm(&v);
        if nv > 1e-6 {
            v.iter_mut().for_each(|x| *x /= nv);
            rows.extend(v);
        }
    }
    rows
}

/// Row-major `rows x cols` matrix times vector.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&m[r * cols..(r + 1) * cols], x);
    }
}

/// Row-major transpose-times-vector: `out = m^T x`.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        axpy(x[r], &m[r * cols..(r + 1) * cols], out);
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Solve `a x = b` for square `a` (row-major, n x n) by partial-pivot
/// Gaussian elimination. Returns `None` when `a` is numerically singular.
pub fn solve(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs())).unwrap();
        if m[piv * n + col].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
            rhs.swap(piv, col);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    m[row * n + k] -= f * m[col * n + k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= m[row * n + k] * x[k];
        }
        x[row] = s / m[row * n + row];
    }
    Some(x)
}

/// Moore-Penrose left inverse of a tall `rows x cols` matrix with full
/// column rank: `(B^T B)^-1 B^T`, returned row-major `cols x rows`.
pub fn left_pseudo_inverse(b: &[f64], rows: usize, cols: usize) -> Option<Vec<f64>> {
    let mut gram = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            gram[i * cols + j] = (0..rows).map(|r| b[r * cols + i] * b[r * cols + j]).sum();
        }
    }
    let mut out = vec![0.0; cols * rows];
    for r in 0..rows {
        let rhs: Vec<f64> = (0..cols).map(|c| b[r * cols + c]).collect();
        let col = solve(&gram, cols, &rhs)?;
        for c in 0..cols {
            out[c * rows + r] = col[c];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, -3.0, 0.5]);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_recovers_identity() {
        // 3x2 tall matrix
        let b = [1.0, 0.0, 1.0, 1.0, 0.0, 2.0];
        let p = left_pseudo_inverse(&b, 3, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..3).map(|r| p[i * 3 + r] * b[r * 2 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_is_rejected() {
        let b = [1.0, 2.0, 2.0, 4.0];
        assert!(left_pseudo_inverse(&b, 2, 2).is_none());
    }
}
