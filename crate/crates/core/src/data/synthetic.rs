use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Image, LabeledSample, SampleInput};
use crate::error::{Error, Result};

/// Recipe for a synthetic image set where a "group" texture is correlated
/// with the label.
///
/// Images are 32×32 on a 0.5 background. The label texture (a checkerboard,
/// sign set by `y`) fills the four central 8×8 patches; the group texture
/// (horizontal bands, sign set by `g`) fills the four corner patches. With
/// `label_jitter > 0` each image's label amplitude is scaled by
/// `1 − label_jitter·u`, `u ~ U(0, 1)`, so some images carry a faint label cue
/// and the group texture becomes a tempting shortcut for them. A
/// `label_dropout` fraction of images carries no label texture at all.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Amplitude of the label texture.
    pub label_signal: f64,
    /// Amplitude of the group texture.
    pub group_signal: f64,
    /// Probability that `g` is copied from `y`; otherwise `g` is a fair coin.
    pub spurious_strength: f64,
    pub noise_sigma: f64,
    /// Spread of the per-image label amplitude, in `[0, 1]`.
    pub label_jitter: f64,
    /// Probability that an image omits the label texture.
    pub label_dropout: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 4000,
            label_signal: 0.1,
            group_signal: 0.2,
            spurious_strength: 0.8,
            noise_sigma: 0.15,
            label_jitter: 0.0,
            label_dropout: 0.0,
            seed: 0,
        }
    }
}

pub const SIDE: usize = 32;
const PATCH: usize = 8;

fn label_texture(r: usize, c: usize) -> Option<f64> {
    let (pr, pc) = (r / PATCH, c / PATCH);
    ((1..=2).contains(&pr) && (1..=2).contains(&pc))
        .then(|| if (r + c) % 2 == 0 { 1.0 } else { -1.0 })
}

fn group_texture(r: usize, c: usize) -> Option<f64> {
    let (pr, pc) = (r / PATCH, c / PATCH);
    ((pr == 0 || pr == 3) && (pc == 0 || pc == 3))
        .then(|| if (r / 2) % 2 == 0 { 1.0 } else { -1.0 })
}

/// Reference image for one `(y, g)` pair before noise.
#[cfg(test)]
pub(crate) fn clean_pixels(spec: &SyntheticSpec, y: u8, g: u8) -> Vec<f64> {
    pixels_with(spec, y, g, true)
}

fn pixels_with(spec: &SyntheticSpec, y: u8, g: u8, label_cue: bool) -> Vec<f64> {
    let sy = if y == 1 { 1.0 } else { -1.0 };
    let sg = if g == 1 { 1.0 } else { -1.0 };
    (0..SIDE * SIDE)
        .map(|i| {
            let (r, c) = (i / SIDE, i % SIDE);
            let mut v = 0.5;
            if let Some(t) = label_texture(r, c).filter(|_| label_cue) {
                v += spec.label_signal * sy * t;
            }
            if let Some(t) = group_texture(r, c) {
                v += spec.group_signal * sg * t;
            }
            v
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::invalid("synthetic dataset needs n >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.spurious_strength) {
        return Err(Error::invalid("spurious_strength must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&spec.label_jitter) || !(0.0..=1.0).contains(&spec.label_dropout) {
        return Err(Error::invalid("label_jitter and label_dropout must lie in [0, 1]"));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.label_signal.is_finite() || !spec.group_signal.is_finite() {
        return Err(Error::invalid("signals must be finite and noise_sigma non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    // index 2·y + g; the second set has no label texture
    let templates: Vec<Vec<f64>> = (0..4)
        .map(|t| pixels_with(spec, (t / 2) as u8, (t % 2) as u8, true))
        .collect();
    let bare: Vec<Vec<f64>> = (0..4)
        .map(|t| pixels_with(spec, (t / 2) as u8, (t % 2) as u8, false))
        .collect();
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let y = rng.random_bool(0.5) as u8;
        let g = if rng.random_bool(spec.spurious_strength) {
            y
        } else {
            rng.random_bool(0.5) as u8
        };
        let cell = 2 * y as usize + g as usize;
        // drawn only when enabled so existing datasets keep their stream
        let mut scale = if spec.label_jitter > 0.0 {
            1.0 - spec.label_jitter * rng.random::<f64>()
        } else {
            1.0
        };
        if spec.label_dropout > 0.0 && rng.random_bool(spec.label_dropout) {
            scale = 0.0;
        }
        let pixels = templates[cell]
            .iter()
            .zip(&bare[cell])
            .map(|(&full, &b)| {
                let v = if scale == 1.0 { full } else { b + scale * (full - b) };
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).clamp(0.0, 1.0)
            })
            .collect();
        out.push(LabeledSample {
            input: SampleInput::Image(Image {
                height: SIDE,
                width: SIDE,
                pixels,
            }),
            y,
            g,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, rho: f64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            spurious_strength: rho,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn independent_when_rho_zero() {
        let d = generate_synthetic(&spec(2000, 0.0)).unwrap();
        let n = d.len() as f64;
        let py = d.iter().filter(|s| s.y == 1).count() as f64 / n;
        let pg = d.iter().filter(|s| s.g == 1).count() as f64 / n;
        let pyg = d.iter().filter(|s| s.y == 1 && s.g == 1).count() as f64 / n;
        let corr = (pyg - py * pg) / (py * (1.0 - py) * pg * (1.0 - pg)).sqrt();
        assert!(corr.abs() <= 0.05, "{corr}");
    }

    #[test]
    fn group_equals_label_when_rho_one() {
        let d = generate_synthetic(&spec(500, 1.0)).unwrap();
        assert!(d.iter().all(|s| s.y == s.g));
        // The group texture sign alone recovers the label.
        let corner = 0; // pixel (0, 0) lies in a corner patch, first band (+1)
        for s in &d {
            let clean = clean_pixels(&spec(1, 1.0), s.y, s.g)[corner];
            assert_eq!(clean > 0.5, s.y == 1);
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_synthetic(&spec(50, 0.8)).unwrap();
        let b = generate_synthetic(&spec(50, 0.8)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.values().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(generate_synthetic(&spec(0, 0.8)).is_err());
        assert!(generate_synthetic(&spec(10, 1.5)).is_err());
    }

    #[test]
    fn jitter_scales_the_label_texture_only() {
        let base = SyntheticSpec {
            n: 400,
            noise_sigma: 0.0,
            seed: 3,
            ..Default::default()
        };
        let with = |j: f64| generate_synthetic(&SyntheticSpec { label_jitter: j, ..base.clone() }).unwrap();
        // pixel (8, 8) lies in the label texture; (0, 0) in the group texture
        let centre = 8 * SIDE + 8;
        let amplitude = |s: &LabeledSample| (s.values()[centre] - 0.5).abs();
        assert_eq!(with(0.0), generate_synthetic(&base).unwrap());
        assert!(with(0.0).iter().all(|s| (amplitude(s) - base.label_signal).abs() < 1e-12));
        let jittered = with(1.0);
        let amps: Vec<f64> = jittered.iter().map(amplitude).collect();
        assert!(amps.iter().all(|&a| a <= base.label_signal + 1e-12));
        let mean = amps.iter().sum::<f64>() / amps.len() as f64;
        assert!((mean - base.label_signal / 2.0).abs() < 0.01, "{mean}");
        let corner = |s: &LabeledSample| s.values()[0] - 0.5;
        let sign = |g: u8| if g == 1 { 1.0 } else { -1.0 };
        assert!(jittered.iter().all(|s| (corner(s) - base.group_signal * sign(s.g)).abs() < 1e-12));
        assert!(generate_synthetic(&SyntheticSpec { label_jitter: 1.5, ..base.clone() }).is_err());

        let dropped = generate_synthetic(&SyntheticSpec { label_dropout: 0.3, ..base.clone() }).unwrap();
        let missing = dropped.iter().filter(|s| amplitude(s) == 0.0).count();
        assert!((90..=150).contains(&missing), "{missing}");
        assert!(dropped.iter().all(|s| amplitude(s) == 0.0 || (amplitude(s) - base.label_signal).abs() < 1e-12));
        assert!(generate_synthetic(&SyntheticSpec { label_dropout: -0.1, ..base }).is_err());
    }

    #[test]
    fn balanced_marginals() {
        for seed in 0..3 {
            let d = generate_synthetic(&SyntheticSpec {
                n: 4000,
                seed,
                ..Default::default()
            })
            .unwrap();
            let n = d.len() as f64;
            let py = d.iter().filter(|s| s.y == 1).count() as f64 / n;
            let pg = d.iter().filter(|s| s.g == 1).count() as f64 / n;
            assert!((py - 0.5).abs() <= 0.02 && (pg - 0.5).abs() <= 0.02);
        }
    }
}
