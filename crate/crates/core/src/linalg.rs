//! Small dense vector helpers shared by the SAE, backend, and detector.

use rand::Rng;
use rand_distr::StandardNormal;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot_f32_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(v: &mut [f64], c: f64) {
    v.iter_mut().for_each(|x| *x *= c);
}

/// Returns `None` when the norm is below `min_norm`.
pub fn normalized(v: &[f64], min_norm: f64) -> Option<Vec<f64>> {
    let n = norm(v);
    if n < min_norm || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| x / n).collect())
}

/// Row-major matrix times vector.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&m[r * cols..(r + 1) * cols], x);
    }
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Modified Gram-Schmidt over `vectors`, skipping near-dependent ones.
pub fn orthonormalize(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                axpy(-c, b, &mut w);
            }
        }
        if let Some(u) = normalized(&w, 1e-10) {
            basis.push(u);
        }
    }
    basis
}

/// Largest singular value of a row-major square matrix by power iteration on MᵀM.
pub fn spectral_norm(m: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut mv = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..500 {
        matvec(m, n, n, &v, &mut mv);
        // w = Mᵀ (M v)
        let mut w = vec![0.0; n];
        for r in 0..n {
            axpy(mv[r], &m[r * n..(r + 1) * n], &mut w);
        }
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        let next = wn.sqrt();
        v = w.iter().map(|x| x / wn).collect();
        if (next - sigma).abs() <= 1e-12 * next {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}
