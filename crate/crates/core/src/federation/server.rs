use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::client::train_step;
use super::model::{EncodedSet, Model};
use crate::encoder::{PromptSet, PromptVars};
use crate::error::{Error, Result};
use crate::metrics::{BiasMetric, MetricRecord};
use crate::numerics::{AdamWConfig, Graph, OptimizerState, Tensor, Var};

/// Result of scoring one prompt set on the validation split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptScore {
    pub score: f64,
    pub accuracy: f64,
    pub bias: f64,
    pub record: MetricRecord,
}

/// `score = accuracy · (1 − bias)` with accuracy = balanced accuracy.
pub fn score_from_record(record: MetricRecord, bias_metric: BiasMetric) -> PromptScore {
    let accuracy = record.a_b;
    let bias = bias_metric.of(&record);
    PromptScore {
        score: accuracy * (1.0 - bias),
        accuracy,
        bias,
        record,
    }
}

pub fn score_prompt(
    model: &Model,
    prompts: &PromptSet,
    val: &EncodedSet,
    bias_metric: BiasMetric,
) -> Result<PromptScore> {
    let conf = model.confusion(prompts, val)?;
    Ok(score_from_record(MetricRecord::from_confusion(&conf)?, bias_metric))
}

/// Normalised fusion weights `score_i / Σ score`.
pub fn fusion_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("no client scores to fuse"));
    }
    if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid(format!("scores must be finite and non-negative: {scores:?}")));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("every client scored zero; nothing to weight by"));
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

fn weighted_sum(sets: &[PromptSet], weights: &[f64]) -> Result<PromptSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("no prompt sets to fuse"))?;
    let mut out = first.clone();
    for (i, dst) in out.params_mut().enumerate() {
        let mut acc = Tensor::zeros(dst.rows(), dst.cols());
        for (set, &w) in sets.iter().zip(weights) {
            let src = set
                .params()
                .nth(i)
                .filter(|t| t.shape() == acc.shape())
                .ok_or_else(|| Error::shape("fuse_prompts", "client prompt sets differ in layout"))?;
            for (a, s) in acc.data_mut().iter_mut().zip(src.data()) {
                *a += w * s;
            }
        }
        *dst = acc;
    }
    if sets.iter().any(|s| s.params().count() != first.params().count()) {
        return Err(Error::shape("fuse_prompts", "client prompt sets differ in layout"));
    }
    Ok(out)
}

/// Score-weighted average of client prompt tokens and pooling queries.
pub fn fuse_prompts(sets: &[PromptSet], scores: &[f64]) -> Result<PromptSet> {
    if sets.len() != scores.len() {
        return Err(Error::invalid(format!(
            "{} prompt sets but {} scores",
            sets.len(),
            scores.len()
        )));
    }
    weighted_sum(sets, &fusion_weights(scores)?)
}

/// Unweighted average.
pub fn fuse_uniform(sets: &[PromptSet]) -> Result<PromptSet> {
    if sets.is_empty() {
        return Err(Error::invalid("no prompt sets to fuse"));
    }
    let w = vec![1.0 / sets.len() as f64; sets.len()];
    weighted_sum(sets, &w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub lambda2: f64,
    /// Samples drawn per `(y, g)` cell for each refinement batch.
    pub per_cell: usize,
    pub adamw: AdamWConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RefineStats {
    pub steps: usize,
    pub first_gap: Option<f64>,
    pub last_gap: Option<f64>,
}

/// Recorded refinement objective.
pub struct RefineVars {
    pub total: Var,
    pub task: Var,
    /// Sum over group pairs of the soft-accuracy gap; `None` when the batch
    /// holds a single group.
    pub gap: Option<Var>,
}

/// Class cross-entropy over `C` prompts plus `λ2 ·` soft group-accuracy gap.
///
/// Soft accuracy of a group is the mean probability assigned to the correct
/// class over its samples in the batch.
pub fn refine_objective<'a>(
    model: &'a Model,
    g: &mut Graph<'a>,
    vars: &PromptVars,
    tokens: &[&'a Tensor],
    labels: &[u8],
    groups: &[u8],
    lambda2: f64,
) -> Result<RefineVars> {
    let b = tokens.len();
    if labels.len() != b || groups.len() != b || b == 0 {
        return Err(Error::invalid("refine batch: tokens, labels and groups must align"));
    }
    let (_, used) = model.forward(g, vars, tokens)?;
    let logits = model.logits(g, used)?;
    let c = model.classes.rows();
    let mut onehot = Tensor::zeros(b, c);
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= c {
            return Err(Error::invalid(format!("label {y} has no class prompt")));
        }
        onehot.set(i, y as usize, 1.0);
    }
    let onehot = g.constant(onehot);
    let ls = g.log_softmax(logits)?;
    let picked = g.mul(ls, onehot)?;
    let nll = g.sum(picked)?;
    let task = g.scale(nll, -1.0 / b as f64)?;

    let probs = g.softmax(logits)?;
    let correct = g.mul(probs, onehot)?;
    let correct = g.sum_rows(correct)?;
    let n_groups = groups.iter().map(|&x| x as usize + 1).max().unwrap_or(0);
    let mut soft = Vec::new();
    for grp in 0..n_groups {
        let members: Vec<usize> = (0..b).filter(|&i| groups[i] as usize == grp).collect();
        if members.is_empty() {
            continue;
        }
        let mut avg = Tensor::zeros(1, b);
        for &i in &members {
            avg.set(0, i, 1.0 / members.len() as f64);
        }
        let avg = g.constant(avg);
        soft.push(g.matmul(avg, correct)?);
    }
    let mut gap = None;
    for i in 0..soft.len() {
        for j in i + 1..soft.len() {
            let d = g.sub(soft[i], soft[j])?;
            let d = g.abs(d)?;
            gap = Some(match gap {
                Some(acc) => g.add(acc, d)?,
                None => d,
            });
        }
    }
    let total = match gap {
        Some(gv) if lambda2 != 0.0 => {
            let w = g.scale(gv, lambda2)?;
            g.add(task, w)?
        }
        _ => task,
    };
    Ok(RefineVars { total, task, gap })
}

/// Stratified batch: up to `per_cell` samples from every `(y, g)` cell.
fn stratified_batch(cells: &[Vec<usize>], per_cell: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for cell in cells {
        let take = per_cell.min(cell.len());
        out.extend(
            rand::seq::index::sample(rng, cell.len(), take)
                .into_iter()
                .map(|k| cell[k]),
        );
    }
    out
}

/// Fine-tunes the fused prompts on the validation split with a fresh
/// optimizer.
pub fn server_refine(
    model: &Model,
    prompts: &PromptSet,
    val: &EncodedSet,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<(PromptSet, RefineStats)> {
    let mut out = prompts.clone();
    let mut stats = RefineStats::default();
    if cfg.steps == 0 {
        return Ok((out, stats));
    }
    if val.is_empty() || cfg.per_cell == 0 {
        return Err(Error::invalid("refinement needs validation samples and per_cell >= 1"));
    }
    let n_groups = val.g.iter().map(|&x| x as usize + 1).max().unwrap_or(0);
    let n_classes = model.classes.rows();
    let mut cells = vec![Vec::new(); n_classes * n_groups];
    for i in 0..val.len() {
        cells[val.y[i] as usize * n_groups + val.g[i] as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::default();
    for _ in 0..cfg.steps {
        let batch = stratified_batch(&cells, cfg.per_cell, &mut rng);
        let tokens: Vec<&Tensor> = batch.iter().map(|&i| &val.tokens[i]).collect();
        let labels: Vec<u8> = batch.iter().map(|&i| val.y[i]).collect();
        let groups: Vec<u8> = batch.iter().map(|&i| val.g[i]).collect();
        let mut gap_value = None;
        train_step(model, &mut out, &mut opt, &cfg.adamw, |m, g, v| {
            let r = refine_objective(m, g, v, &tokens, &labels, &groups, cfg.lambda2)?;
            gap_value = r.gap.map(|x| g.value(x).data()[0]);
            Ok(r.total)
        })
        .map_err(|e| Error::Diverged(format!("server refinement: {e}")))?;
        if stats.first_gap.is_none() {
            stats.first_gap = gap_value;
        }
        stats.last_gap = gap_value;
        stats.steps += 1;
    }
    Ok((out, stats))
}
