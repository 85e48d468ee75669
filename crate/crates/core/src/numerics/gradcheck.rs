//! Central finite-difference checks of analytic gradients.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// One checked coordinate: `(parameter index, flat element index)`.
pub type Coord = (usize, usize);

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    /// Largest analytic gradient magnitude seen; a check over all-zero
    /// gradients proves little.
    pub max_abs_grad: f64,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Picks `n` coordinates uniformly over all elements of `params`, without
/// replacement when `n` does not exceed the element count.
pub fn sample_coords<R: Rng + ?Sized>(params: &[Tensor], n: usize, rng: &mut R) -> Vec<Coord> {
    let all: Vec<Coord> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
        .collect();
    if all.is_empty() {
        return Vec::new();
    }
    if n >= all.len() {
        return all;
    }
    rand::seq::index::sample(rng, all.len(), n)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Compares `analytic` with central differences of `f` at `coords`.
pub fn check_gradients(
    params: &[Tensor],
    analytic: &[Tensor],
    coords: &[Coord],
    step: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheck> {
    if params.len() != analytic.len()
        || params.iter().zip(analytic).any(|(p, a)| p.shape() != a.shape())
    {
        return Err(Error::shape("check_gradients", "gradient shapes differ from parameters"));
    }
    let mut work = params.to_vec();
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        max_abs_grad: 0.0,
    };
    for &(p, e) in coords {
        let orig = work[p].data()[e];
        work[p].data_mut()[e] = orig + step;
        let plus = f(&work)?;
        work[p].data_mut()[e] = orig - step;
        let minus = f(&work)?;
        work[p].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[p].data()[e];
        let err = relative_error(a, numeric);
        out.checked += 1;
        out.max_abs_grad = out.max_abs_grad.max(a.abs());
        if err > out.max_rel_error || out.worst.is_none() {
            out.max_rel_error = out.max_rel_error.max(err);
            out.worst = Some((p, e));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cubic_gradient() {
        let x = Tensor::row(vec![0.5, -1.0, 2.0]);
        let g = x.map(|v| 3.0 * v * v);
        let coords = sample_coords(std::slice::from_ref(&x), 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(coords.len(), 3);
        let r = check_gradients(&[x], &[g], &coords, 1e-3, |p| {
            Ok(p[0].data().iter().map(|v| v * v * v).sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Tensor::row(vec![1.0]);
        let r = check_gradients(&[x], &[Tensor::row(vec![3.0])], &[(0, 0)], 1e-3, |p| {
            Ok(p[0].data()[0] * p[0].data()[0])
        })
        .unwrap();
        assert!(r.max_rel_error > 0.3);
    }
}
