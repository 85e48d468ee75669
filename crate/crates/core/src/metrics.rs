//! Accuracy and group-fairness metrics for a binary task.
//!
//! Pairwise gaps are taken between two groups; with more than two groups the
//! largest pairwise gap is reported.

use crate::error::{Error, Result};

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Confusion counts split by sensitive group (index = group id).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupConfusion {
    pub groups: Vec<Counts>,
}

impl GroupConfusion {
    pub fn total(&self) -> u64 {
        self.groups.iter().map(Counts::total).sum()
    }

    pub fn pooled(&self) -> Counts {
        let mut c = Counts::default();
        self.groups.iter().for_each(|g| c.add(g));
        c
    }

    /// True-positive rate of group `g`, or `None` without positives.
    pub fn tpr(&self, g: usize) -> Option<f64> {
        let c = self.groups.get(g)?;
        (c.positives() > 0).then(|| c.tp as f64 / c.positives() as f64)
    }

    fn fpr(&self, g: usize) -> Option<f64> {
        let c = self.groups.get(g)?;
        (c.negatives() > 0).then(|| c.fp as f64 / c.negatives() as f64)
    }
}

pub fn confusion_by_group(preds: &[u8], labels: &[u8], groups: &[u8]) -> Result<GroupConfusion> {
    if preds.len() != labels.len() || preds.len() != groups.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions, {} labels, {} groups",
            preds.len(),
            labels.len(),
            groups.len()
        )));
    }
    let n_groups = groups.iter().map(|&g| g as usize + 1).max().unwrap_or(0).max(2);
    let mut conf = GroupConfusion {
        groups: vec![Counts::default(); n_groups],
    };
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        if p > 1 || y > 1 {
            return Err(Error::Metric(format!("non-binary prediction {p} or label {y}")));
        }
        let c = &mut conf.groups[g as usize];
        match (y, p) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fn_ += 1,
            (_, 1) => c.fp += 1,
            _ => c.tn += 1,
        }
    }
    Ok(conf)
}

/// Mean of per-class recall, pooled over groups.
pub fn balanced_accuracy(conf: &GroupConfusion) -> Result<f64> {
    let c = conf.pooled();
    if c.positives() == 0 || c.negatives() == 0 {
        return Err(Error::Metric("balanced accuracy needs both classes".into()));
    }
    let tpr = c.tp as f64 / c.positives() as f64;
    let tnr = c.tn as f64 / c.negatives() as f64;
    Ok(0.5 * (tpr + tnr))
}

fn max_pairwise(values: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            worst = worst.max((values[i] - values[j]).abs());
        }
    }
    worst
}

fn per_group<F: Fn(usize) -> Option<f64>>(conf: &GroupConfusion, what: &str, f: F) -> Result<Vec<f64>> {
    (0..conf.groups.len())
        .map(|g| f(g).ok_or_else(|| Error::Metric(format!("group {g} has no samples for {what}"))))
        .collect()
}

/// Gap in positive-prediction rates between groups.
pub fn demographic_parity(conf: &GroupConfusion) -> Result<f64> {
    let rates = per_group(conf, "demographic parity", |g| {
        let c = conf.groups[g];
        (c.total() > 0).then(|| (c.tp + c.fp) as f64 / c.total() as f64)
    })?;
    Ok(max_pairwise(&rates))
}

/// `½(|ΔTPR| + |ΔFPR|)`, maximised over group pairs.
pub fn equalized_odds(conf: &GroupConfusion) -> Result<f64> {
    let tpr = per_group(conf, "true-positive rate", |g| conf.tpr(g))?;
    let fpr = per_group(conf, "false-positive rate", |g| conf.fpr(g))?;
    let mut worst: f64 = 0.0;
    for i in 0..tpr.len() {
        for j in i + 1..tpr.len() {
            worst = worst.max(0.5 * ((tpr[i] - tpr[j]).abs() + (fpr[i] - fpr[j]).abs()));
        }
    }
    Ok(worst)
}

/// `Σ_y |Acc(g, y) − Acc(h, y)|`, maximised over group pairs; in `[0, 2]`.
pub fn accuracy_gap(conf: &GroupConfusion) -> Result<f64> {
    let pos = per_group(conf, "positive-class accuracy", |g| conf.tpr(g))?;
    let neg = per_group(conf, "negative-class accuracy", |g| conf.fpr(g).map(|f| 1.0 - f))?;
    let mut worst: f64 = 0.0;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            worst = worst.max((pos[i] - pos[j]).abs() + (neg[i] - neg[j]).abs());
        }
    }
    Ok(worst)
}

/// Cross-client equal-opportunity gap.
#[derive(Clone, Debug, PartialEq)]
pub struct EodGlobal {
    pub value: f64,
    /// Clients left out because a group had no positive samples.
    pub excluded: Vec<usize>,
}

/// `|mean_i TPR_i(g) − mean_i TPR_i(h)|` with equal client weights.
pub fn eod_global(per_client: &[GroupConfusion]) -> Result<EodGlobal> {
    let n_groups = per_client.iter().map(|c| c.groups.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; n_groups];
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for (i, conf) in per_client.iter().enumerate() {
        let rates: Option<Vec<f64>> = (0..n_groups).map(|g| conf.tpr(g)).collect();
        match rates {
            Some(r) => {
                sums.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                used += 1;
            }
            None => excluded.push(i),
        }
    }
    if used == 0 {
        return Err(Error::Metric(
            "no client has positive samples in every group".into(),
        ));
    }
    let means: Vec<f64> = sums.iter().map(|s| s / used as f64).collect();
    Ok(EodGlobal {
        value: max_pairwise(&means),
        excluded,
    })
}

/// One row of evaluation results.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub a_b: f64,
    pub phi_a: f64,
    pub phi_demo: f64,
    pub phi_eq: f64,
    /// Only defined for global evaluations.
    pub f_global: Option<f64>,
}

impl MetricRecord {
    pub fn from_confusion(conf: &GroupConfusion) -> Result<Self> {
        Ok(Self {
            a_b: balanced_accuracy(conf)?,
            phi_a: accuracy_gap(conf)?,
            phi_demo: demographic_parity(conf)?,
            phi_eq: equalized_odds(conf)?,
            f_global: None,
        })
    }
}

/// Disparity measure used as the bias term when scoring client prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BiasMetric {
    #[default]
    EqualizedOdds,
    DemographicParity,
    /// Accuracy gap, halved so that it lies in `[0, 1]`.
    AccuracyGap,
}

impl BiasMetric {
    pub fn of(&self, rec: &MetricRecord) -> f64 {
        match self {
            Self::EqualizedOdds => rec.phi_eq,
            Self::DemographicParity => rec.phi_demo,
            Self::AccuracyGap => rec.phi_a / 2.0,
        }
    }
}

impl std::str::FromStr for BiasMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi_eq" => Ok(Self::EqualizedOdds),
            "phi_demo" => Ok(Self::DemographicParity),
            "phi_a" => Ok(Self::AccuracyGap),
            _ => Err(Error::invalid(format!("unknown bias metric `{s}`"))),
        }
    }
}

impl std::fmt::Display for BiasMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::EqualizedOdds => "phi_eq",
            Self::DemographicParity => "phi_demo",
            Self::AccuracyGap => "phi_a",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conf_from_rates(tpr: [(u64, u64); 2], fpr: [(u64, u64); 2]) -> GroupConfusion {
        GroupConfusion {
            groups: (0..2)
                .map(|g| Counts {
                    tp: tpr[g].0,
                    fn_: tpr[g].1 - tpr[g].0,
                    fp: fpr[g].0,
                    tn: fpr[g].1 - fpr[g].0,
                })
                .collect(),
        }
    }

    #[test]
    fn confusion_examples() {
        let y = [1, 0, 1, 0];
        let g = [0, 0, 1, 1];
        let c = confusion_by_group(&y, &y, &g).unwrap();
        assert!(c.groups.iter().all(|c| c.fp == 0 && c.fn_ == 0));
        let e = confusion_by_group(&[], &[], &[]).unwrap();
        assert_eq!(e.total(), 0);
        assert!(confusion_by_group(&[1], &[1, 0], &[0, 0]).is_err());

        let preds = [1, 0, 1, 1, 0, 0, 1, 0, 1, 1];
        let labels = [1, 1, 0, 1, 0, 1, 1, 0, 0, 0];
        let groups = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let c = confusion_by_group(&preds, &labels, &groups).unwrap();
        assert_eq!(c.groups[0], Counts { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(c.groups[1], Counts { tp: 1, fp: 2, tn: 1, fn_: 1 });
    }

    #[test]
    fn arithmetic_examples() {
        let labels = [1, 1, 0, 0];
        let groups = [0, 1, 0, 1];
        let perfect = confusion_by_group(&labels, &labels, &groups).unwrap();
        assert_eq!(balanced_accuracy(&perfect).unwrap(), 1.0);
        let all_pos = confusion_by_group(&[1; 4], &labels, &groups).unwrap();
        assert_eq!(balanced_accuracy(&all_pos).unwrap(), 0.5);

        // Positive rates 0.8 vs 0.6.
        let c = conf_from_rates([(4, 5), (3, 5)], [(4, 5), (3, 5)]);
        assert!((demographic_parity(&c).unwrap() - 0.2).abs() <= 1e-12);

        let c = conf_from_rates([(2, 2), (1, 2)], [(1, 4), (1, 4)]);
        assert!((equalized_odds(&c).unwrap() - 0.25).abs() <= 1e-12);

        // Class accuracies (1, 1) vs (0.1, 0.1).
        let c = conf_from_rates([(10, 10), (1, 10)], [(0, 10), (9, 10)]);
        assert!((accuracy_gap(&c).unwrap() - 1.8).abs() <= 1e-12);
        let sym = conf_from_rates([(3, 4), (3, 4)], [(1, 4), (1, 4)]);
        assert_eq!(accuracy_gap(&sym).unwrap(), 0.0);
        assert_eq!(equalized_odds(&sym).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_cells_are_errors() {
        let c = confusion_by_group(&[1, 0], &[1, 0], &[0, 0]).unwrap();
        assert!(demographic_parity(&c).is_err());
        assert!(equalized_odds(&c).is_err());
        let c = confusion_by_group(&[1, 1], &[1, 1], &[0, 1]).unwrap();
        assert!(balanced_accuracy(&c).is_err());
        assert!(accuracy_gap(&c).is_err());
    }

    #[test]
    fn eod_examples() {
        let a = conf_from_rates([(2, 2), (1, 2)], [(0, 1), (0, 1)]);
        let b = conf_from_rates([(1, 2), (1, 2)], [(0, 1), (0, 1)]);
        let e = eod_global(&[a.clone(), b]).unwrap();
        assert!((e.value - 0.25).abs() <= 1e-12);
        assert!(e.excluded.is_empty());
        let same = eod_global(&[a.clone(), conf_from_rates([(1, 2), (2, 4)], [(0, 1), (0, 1)])]);
        assert!(same.unwrap().value > 0.0);
        let eq = conf_from_rates([(1, 2), (2, 4)], [(0, 1), (0, 1)]);
        assert_eq!(eod_global(&[eq.clone(), eq]).unwrap().value, 0.0);
        let empty = conf_from_rates([(0, 0), (1, 2)], [(0, 1), (0, 1)]);
        let e = eod_global(&[a, empty.clone()]).unwrap();
        assert_eq!(e.excluded, vec![1]);
        assert!(eod_global(&[empty]).is_err());
    }

    proptest! {
        #[test]
        fn ranges_and_group_swap(
            rows in proptest::collection::vec((0u8..2, 0u8..2, 0u8..2), 8..60)
        ) {
            let preds: Vec<u8> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<u8> = rows.iter().map(|r| r.1).collect();
            let groups: Vec<u8> = rows.iter().map(|r| r.2).collect();
            let swapped: Vec<u8> = groups.iter().map(|g| 1 - g).collect();
            let c = confusion_by_group(&preds, &labels, &groups).unwrap();
            let s = confusion_by_group(&preds, &labels, &swapped).unwrap();
            if let (Ok(a), Ok(b)) = (MetricRecord::from_confusion(&c), MetricRecord::from_confusion(&s)) {
                prop_assert!((0.0..=1.0).contains(&a.a_b));
                prop_assert!((0.0..=2.0).contains(&a.phi_a));
                prop_assert!((0.0..=1.0).contains(&a.phi_demo));
                prop_assert!((0.0..=1.0).contains(&a.phi_eq));
                prop_assert_eq!(a, b);
            }
        }
    }
}
