//! Top-k right singular vectors of short, wide matrices.
//!
//! The rows of `M` (`n × d`, `n` small) are decomposed through the `n × n`
//! Gram matrix `M·Mᵀ`: with `M·Mᵀ u = σ² u`, the right singular vector is
//! `v = Mᵀ u / σ`. No gradient flows through this path.

use super::kernels::dot;
use super::Tensor;
use crate::error::{Error, Result};

/// Result of [`svd_topk`].
#[derive(Clone, Debug)]
pub struct TopK {
    /// `k × d`, orthonormal rows, descending singular value.
    pub basis: Tensor,
    /// Singular values of the returned rows (zero for completed rows).
    pub singular_values: Vec<f64>,
    /// Number of trailing rows that were filled by completing an orthonormal
    /// set because `k` exceeded the numerical rank.
    pub completed: usize,
}

/// Relative singular-value threshold below which a direction counts as null.
const RANK_TOL: f64 = 1e-10;

pub fn svd_topk(m: &Tensor, k: usize) -> Result<TopK> {
    let [n, d] = m.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(format!(
            "svd_topk: k = {k} outside 1..={}",
            n.min(d)
        )));
    }
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(m.row_slice(i), m.row_slice(j));
            gram[i * n + j] = v;
            gram[j * n + i] = v;
        }
    }
    let (vals, vecs) = jacobi_eigen(&mut gram, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));

    let sigma_max = vals[order[0]].max(0.0).sqrt();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigmas = Vec::with_capacity(k);
    for &e in order.iter().take(k) {
        let sigma = vals[e].max(0.0).sqrt();
        if sigma_max == 0.0 || sigma <= RANK_TOL * sigma_max {
            break;
        }
        let mut v = vec![0.0; d];
        for i in 0..n {
            let u = vecs[i * n + e];
            for (vc, mc) in v.iter_mut().zip(m.row_slice(i)) {
                *vc += u * mc;
            }
        }
        v.iter_mut().for_each(|x| *x /= sigma);
        if let Some(v) = orthonormalize(v, &rows) {
            rows.push(v);
            sigmas.push(sigma);
        } else {
            break;
        }
    }
    let found = rows.len();
    let mut j = 0;
    while rows.len() < k && j < d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        if let Some(v) = orthonormalize(e, &rows) {
            rows.push(v);
            sigmas.push(0.0);
        }
        j += 1;
    }
    for r in rows.iter_mut() {
        if let Some(first) = r.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                r.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    Ok(TopK {
        basis: Tensor::from_rows(&rows)?,
        singular_values: sigmas,
        completed: k - found,
    })
}

/// Two passes of modified Gram-Schmidt against `basis`; `None` if `v` is
/// (numerically) inside its span.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let start = dot(&v, &v).sqrt();
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let n = dot(&v, &v).sqrt();
    if start == 0.0 || n <= 1e-8 * start {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n × n` matrix (row-major,
/// destroyed). Returns eigenvalues and eigenvectors stored as columns.
pub(crate) fn jacobi_eigen(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || scale == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_identity_error(b: &Tensor) -> f64 {
        let k = b.rows();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(b.row_slice(i), b.row_slice(j)) - want).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_case() {
        let m = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let top = svd_topk(&m, 1).unwrap();
        assert_eq!(top.basis.data(), &[1.0, 0.0]);
        assert!((top.singular_values[0] - 2.0).abs() < 1e-12);
        assert_eq!(top.completed, 0);
    }

    #[test]
    fn rank_one_rows() {
        let u = vec![-0.6, 0.0, 0.8];
        let m = Tensor::from_rows(&[u.clone(), u.clone()]).unwrap();
        let top = svd_topk(&m, 1).unwrap();
        let want = [0.6, 0.0, -0.8];
        for (a, b) in top.basis.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let top2 = svd_topk(&m, 2).unwrap();
        assert_eq!(top2.completed, 1);
        assert!(gram_identity_error(&top2.basis) < 1e-9);
    }

    #[test]
    fn zero_matrix_is_fully_completed() {
        let top = svd_topk(&Tensor::zeros(2, 3), 2).unwrap();
        assert_eq!(top.completed, 2);
        assert!(gram_identity_error(&top.basis) < 1e-12);
    }

    #[test]
    fn rejects_bad_k() {
        let m = Tensor::zeros(2, 3);
        assert!(svd_topk(&m, 0).is_err());
        assert!(svd_topk(&m, 3).is_err());
    }

    #[test]
    fn orthonormal_and_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 2..=6 {
            let m = Tensor::randn(n, 10, 1.0, &mut rng);
            let top = svd_topk(&m, n).unwrap();
            assert!(gram_identity_error(&top.basis) <= 1e-9);
            for r in 0..n {
                let first = top.basis.row_slice(r).iter().find(|x| x.abs() > 1e-12).unwrap();
                assert!(*first > 0.0);
            }
            assert!(top.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
