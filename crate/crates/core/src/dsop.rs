//! Demographic subspace projection and the local training losses.

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::numerics::{kernels, svd_topk, Graph, Tensor, Var};

/// Orthonormal basis of the directions spanned by an attribute's text
/// embeddings.
#[derive(Clone, Debug)]
pub struct DemographicSubspace {
    pub attribute: String,
    /// `k × d`, orthonormal rows.
    pub basis: Tensor,
    /// `|A| × d` unit text embeddings the basis was built from.
    pub source: Tensor,
    /// Basis rows that had to be completed because `k` exceeded the rank.
    pub completed: usize,
}

impl DemographicSubspace {
    pub fn from_embeddings(attribute: &str, source: Tensor, k: usize) -> Result<Self> {
        if source.rows() < 2 {
            return Err(Error::invalid("a demographic subspace needs at least two templates"));
        }
        if k == 0 || k > source.rows() {
            return Err(Error::invalid(format!(
                "k = {k} must lie in 1..={} (number of templates)",
                source.rows()
            )));
        }
        let top = svd_topk(&source, k)?;
        Ok(Self {
            attribute: attribute.to_string(),
            basis: top.basis,
            source,
            completed: top.completed,
        })
    }

    pub fn k(&self) -> usize {
        self.basis.rows()
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }
}

pub fn build_subspace<S: AsRef<str>>(
    text: &TextEncoder,
    attribute: &str,
    templates: &[S],
    k: usize,
) -> Result<DemographicSubspace> {
    let source = text.encode_all(templates)?;
    DemographicSubspace::from_embeddings(attribute, source, k)
}

/// Splits every row of `z` into `(z − Proj_V z, Proj_V z)`.
pub fn project_out(z: &Tensor, sub: &DemographicSubspace) -> Result<(Tensor, Tensor)> {
    if z.cols() != sub.dim() {
        return Err(Error::shape(
            "project_out",
            format!("embedding width {} vs subspace width {}", z.cols(), sub.dim()),
        ));
    }
    let mut bias = Tensor::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let row = z.row_slice(r);
        let out = bias.row_slice_mut(r);
        for b in 0..sub.k() {
            let v = sub.basis.row_slice(b);
            let c = kernels::dot(row, v);
            out.iter_mut().zip(v).for_each(|(o, vi)| *o += c * vi);
        }
    }
    Ok((z.sub(&bias)?, bias))
}

/// Per-sample hinge `Σ_i max(0, cos(z̃, t_i) − μ)` for unit rows `z̃`.
pub fn fairness_loss(z_debiased_unit: &Tensor, sub: &DemographicSubspace, mu: f64) -> Result<Vec<f64>> {
    check_mu(mu)?;
    let zt = kernels::l2_normalize_rows(z_debiased_unit)?;
    (0..zt.rows())
        .map(|r| {
            let row = zt.row_slice(r);
            Ok((0..sub.source.rows())
                .map(|a| (kernels::dot(row, sub.source.row_slice(a)) - mu).max(0.0))
                .sum())
        })
        .collect()
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid(format!("margin mu = {mu} must lie in [0, 1)")));
    }
    Ok(())
}

/// Which form of the two-term contrastive objective to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TaskLossVariant {
    /// Debiased image→text term plus text→raw image term.
    #[default]
    Standard,
    /// First term minus second term, signs taken literally.
    StrictAsPrinted,
    /// Both terms on the debiased embeddings.
    FullyDebiased,
}

impl std::str::FromStr for TaskLossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "strict" => Ok(Self::StrictAsPrinted),
            "debiased" => Ok(Self::FullyDebiased),
            _ => Err(Error::invalid(format!("unknown task loss variant `{s}`"))),
        }
    }
}

impl std::fmt::Display for TaskLossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::StrictAsPrinted => "strict",
            Self::FullyDebiased => "debiased",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_vlm: f64,
    pub l_fair: f64,
    pub l_final: f64,
    pub lambda1: f64,
}

/// `l_vlm + λ1 · mean(fair_per_sample)`.
pub fn joint_loss(task: f64, fair_per_sample: &[f64], lambda1: f64) -> Result<LossBreakdown> {
    if !(lambda1 >= 0.0) {
        return Err(Error::invalid(format!("lambda1 = {lambda1} must be non-negative")));
    }
    let l_fair = if fair_per_sample.is_empty() {
        0.0
    } else {
        fair_per_sample.iter().sum::<f64>() / fair_per_sample.len() as f64
    };
    Ok(LossBreakdown {
        l_vlm: task,
        l_fair,
        l_final: task + lambda1 * l_fair,
        lambda1,
    })
}

/// Value form of the two-term contrastive loss. `zt`, `z` and `t_gt` are
/// `B × d` with unit rows; row `i` of `t_gt` embeds sample `i`'s label.
pub fn task_loss(
    zt: &Tensor,
    z: &Tensor,
    t_gt: &Tensor,
    tau: f64,
    variant: TaskLossVariant,
) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b, c) = (g.constant_ref(zt), g.constant_ref(z), g.constant_ref(t_gt));
    let l = task_loss_graph(&mut g, a, b, c, tau, variant)?;
    g.value(l).item()
}

/// `z` projected out of `basis` and renormalised, recorded on `g`.
pub fn debias_graph(g: &mut Graph<'_>, z: Var, basis: Var) -> Result<Var> {
    let coeff = g.matmul_t(z, false, basis, true)?;
    let bias = g.matmul(coeff, basis)?;
    let d = g.sub(z, bias)?;
    g.normalize_rows(d)
}

/// Per-sample hinge as a `B × 1` column.
pub fn fairness_graph(g: &mut Graph<'_>, zt: Var, source: Var, mu: f64) -> Result<Var> {
    check_mu(mu)?;
    let cos = g.matmul_t(zt, false, source, true)?;
    let shifted = g.add_scalar(cos, -mu)?;
    let hinge = g.relu(shifted)?;
    g.sum_rows(hinge)
}

/// Mean of the diagonal of the row-wise log-softmax of `logits` (`B × B`).
fn mean_log_diag(g: &mut Graph<'_>, logits: Var) -> Result<Var> {
    let b = g.value(logits).rows();
    let ls = g.log_softmax(logits)?;
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(ls, eye)?;
    let s = g.sum(diag)?;
    g.scale(s, 1.0 / b as f64)
}

pub fn task_loss_graph(
    g: &mut Graph<'_>,
    zt: Var,
    z: Var,
    t_gt: Var,
    tau: f64,
    variant: TaskLossVariant,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let [b, d] = g.value(zt).shape();
    if b == 0 || g.value(z).shape() != [b, d] || g.value(t_gt).shape() != [b, d] {
        return Err(Error::shape("task_loss", "embeddings and targets must all be B x d"));
    }
    // Image i against the targets of every sample j.
    let l1 = g.matmul_t(zt, false, t_gt, true)?;
    let l1 = g.scale(l1, 1.0 / tau)?;
    let term1 = mean_log_diag(g, l1)?;
    // Target i against the images of every sample j.
    let second = if variant == TaskLossVariant::FullyDebiased { zt } else { z };
    let l2 = g.matmul_t(t_gt, false, second, true)?;
    let l2 = g.scale(l2, 1.0 / tau)?;
    let term2 = mean_log_diag(g, l2)?;
    // term1/term2 hold mean log-probabilities; the losses are their negatives.
    match variant {
        TaskLossVariant::StrictAsPrinted => {
            let diff = g.sub(term2, term1)?;
            Ok(diff)
        }
        _ => {
            let s = g.add(term1, term2)?;
            g.scale(s, -1.0)
        }
    }
}

/// Recorded joint objective; returns `(l_final, l_vlm, per-sample fairness)`.
pub struct JointVars {
    pub l_final: Var,
    pub l_vlm: Var,
    pub fair: Option<Var>,
}

/// Builds `l_vlm + λ1·mean(fair)` on the graph. With no subspace the raw
/// embeddings are used everywhere and the fairness term is absent.
#[allow(clippy::too_many_arguments)]
pub fn joint_graph(
    g: &mut Graph<'_>,
    z: Var,
    t_gt: Var,
    sub: Option<(Var, Var)>,
    mu: f64,
    lambda1: f64,
    tau: f64,
    variant: TaskLossVariant,
) -> Result<JointVars> {
    if !(lambda1 >= 0.0) {
        return Err(Error::invalid(format!("lambda1 = {lambda1} must be non-negative")));
    }
    let Some((basis, source)) = sub else {
        let l_vlm = task_loss_graph(g, z, z, t_gt, tau, variant)?;
        return Ok(JointVars {
            l_final: l_vlm,
            l_vlm,
            fair: None,
        });
    };
    let zt = debias_graph(g, z, basis)?;
    let l_vlm = task_loss_graph(g, zt, z, t_gt, tau, variant)?;
    let fair = fairness_graph(g, zt, source, mu)?;
    let mean_fair = g.mean(fair)?;
    let weighted = g.scale(mean_fair, lambda1)?;
    let l_final = g.add(l_vlm, weighted)?;
    Ok(JointVars {
        l_final,
        l_vlm,
        fair: Some(fair),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::build_prompt_templates;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor {
        let t = Tensor::randn(rows, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        kernels::l2_normalize_rows(&t).unwrap()
    }

    fn projector(b: &Tensor) -> Tensor {
        crate::numerics::matmul(&b.transpose(), b).unwrap()
    }

    #[test]
    fn identical_templates_rank_one() {
        let u = unit_rows(1, 6, 0);
        let src = Tensor::vstack(&[&u, &u]).unwrap();
        let s = DemographicSubspace::from_embeddings("x", src, 1).unwrap();
        let dot = kernels::dot(s.basis.data(), u.data());
        assert!((dot.abs() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn orthogonal_templates_full_rank() {
        let src = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]]).unwrap();
        let s = DemographicSubspace::from_embeddings("x", src.clone(), 2).unwrap();
        let diff = projector(&s.basis).sub(&projector(&src)).unwrap();
        assert!(diff.norm() <= 1e-9);
        assert!(DemographicSubspace::from_embeddings("x", src, 3).is_err());
    }

    #[test]
    fn gender_basis_matches_eigen_oracle() {
        let text = TextEncoder::new(32, 0);
        let t = build_prompt_templates("smiling", "gender").unwrap();
        let s = build_subspace(&text, "gender", &t.demographics, 1).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(2, 32, s.source.data());
        let eig = (m.transpose() * &m).symmetric_eigen();
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        let dot: f64 = v.iter().zip(s.basis.data()).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() <= 1e-8);
        for (a, b) in v.iter().zip(s.basis.data()) {
            assert!((a.abs() - b.abs()).abs() <= 1e-8);
        }
    }

    #[test]
    fn project_out_examples() {
        let sub = DemographicSubspace {
            attribute: "x".into(),
            basis: Tensor::row(vec![1.0, 0.0, 0.0]),
            source: Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
            completed: 0,
        };
        let (d, b) = project_out(&Tensor::row(vec![3.0, 4.0, 0.0]), &sub).unwrap();
        assert_eq!(d.data(), &[0.0, 4.0, 0.0]);
        assert_eq!(b.data(), &[3.0, 0.0, 0.0]);
        let z = Tensor::row(vec![0.0, -2.0, 5.0]);
        let (d, b) = project_out(&z, &sub).unwrap();
        assert_eq!(d, z);
        assert_eq!(b.norm(), 0.0);
    }

    #[test]
    fn fairness_examples() {
        let sub = DemographicSubspace {
            attribute: "x".into(),
            basis: Tensor::row(vec![0.0, 0.0, 1.0]),
            source: Tensor::row(vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0]),
            completed: 0,
        };
        let z = Tensor::row(vec![1.0, 0.0, 0.0]);
        let l = fairness_loss(&z, &sub, 0.3).unwrap();
        assert!((l[0] - 0.6).abs() <= 1e-12);
        let l = fairness_loss(&Tensor::row(vec![0.0, 0.0, 1.0]), &sub, 0.3).unwrap();
        assert_eq!(l[0], 0.0);
        assert!(fairness_loss(&Tensor::zeros(1, 3), &sub, 0.3).is_err());
        assert!(fairness_loss(&z, &sub, 1.0).is_err());
    }

    #[test]
    fn fairness_graph_matches_values() {
        let src = unit_rows(3, 8, 4);
        let sub = DemographicSubspace::from_embeddings("x", src.clone(), 2).unwrap();
        let z = unit_rows(5, 8, 5);
        let want = fairness_loss(&z, &sub, 0.1).unwrap();
        let mut g = Graph::new();
        let (zv, sv) = (g.constant(z.clone()), g.constant(src));
        let f = fairness_graph(&mut g, zv, sv, 0.1).unwrap();
        for (a, b) in g.value(f).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    /// Plain-loop contrastive oracle, returning the two terms separately.
    fn task_oracle(zt: &Tensor, z: &Tensor, t: &Tensor, tau: f64) -> (f64, f64) {
        let b = zt.rows();
        let lse = |v: &[f64]| {
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        for i in 0..b {
            let row: Vec<f64> = (0..b)
                .map(|j| kernels::dot(zt.row_slice(i), t.row_slice(j)) / tau)
                .collect();
            t1 += lse(&row) - row[i];
            let col: Vec<f64> = (0..b)
                .map(|j| kernels::dot(z.row_slice(j), t.row_slice(i)) / tau)
                .collect();
            t2 += lse(&col) - col[i];
        }
        (t1 / b as f64, t2 / b as f64)
    }

    #[test]
    fn task_loss_examples() {
        let z = unit_rows(1, 4, 1);
        let t = unit_rows(1, 4, 2);
        let l = task_loss(&z, &z, &t, 0.07, TaskLossVariant::Standard).unwrap();
        assert!(l.abs() <= 1e-15);

        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, -0.8]]).unwrap();
        let l = task_loss(&z, &z, &t, 0.07, TaskLossVariant::Standard).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() <= 1e-12);

        let zt = unit_rows(4, 6, 3);
        let z = unit_rows(4, 6, 4);
        let t = unit_rows(4, 6, 5);
        let (a, b) = task_oracle(&zt, &z, &t, 0.07);
        let l = task_loss(&zt, &z, &t, 0.07, TaskLossVariant::Standard).unwrap();
        assert!((l - (a + b)).abs() <= 1e-10);
        let strict = task_loss(&zt, &z, &t, 0.07, TaskLossVariant::StrictAsPrinted).unwrap();
        assert!((strict - (a - b)).abs() <= 1e-10);
        let (a, b) = task_oracle(&zt, &zt, &t, 0.5);
        let l = task_loss(&zt, &z, &t, 0.5, TaskLossVariant::FullyDebiased).unwrap();
        assert!((l - (a + b)).abs() <= 1e-10);
    }

    #[test]
    fn joint_loss_examples() {
        let j = joint_loss(1.3, &[0.2, 0.4], 0.0).unwrap();
        assert_eq!(j.l_final, 1.3);
        let j = joint_loss(1.0, &[0.25, 0.75], 2.0).unwrap();
        assert!((j.l_final - 2.0).abs() <= 1e-12);
        assert!(joint_loss(1.0, &[], -1.0).is_err());
    }

    #[test]
    fn fairness_monotone_in_margin() {
        let src = unit_rows(2, 8, 9);
        let sub = DemographicSubspace::from_embeddings("x", src, 1).unwrap();
        let z = unit_rows(20, 8, 10);
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let mu = i as f64 * 0.1;
            let total: f64 = fairness_loss(&z, &sub, mu).unwrap().iter().sum();
            assert!(total <= prev + 1e-15);
            prev = total;
        }
    }

    proptest! {
        #[test]
        fn decomposition_properties(seed in any::<u64>(), k in 1usize..4) {
            let src = unit_rows(4, 10, seed);
            let sub = DemographicSubspace::from_embeddings("x", src, k).unwrap();
            let z = Tensor::randn(1, 10, 3.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let (d, b) = project_out(&z, &sub).unwrap();
            let zn = z.norm();
            for r in 0..k {
                prop_assert!(kernels::dot(d.data(), sub.basis.row_slice(r)).abs() <= 1e-10 * zn);
            }
            prop_assert!(d.add(&b).unwrap().max_abs_diff(&z) <= 1e-12);
            let (dd, _) = project_out(&d, &sub).unwrap();
            prop_assert!(dd.max_abs_diff(&d) <= 1e-12);
        }
    }
}
