//! Federated rounds: local prompt training, fairness-weighted fusion and
//! server-side refinement.

mod client;
mod model;
mod server;

pub use client::{client_update, local_objective, ClientState, LocalSchedule, LocalStats};
pub use model::{EncodedSet, LocalLoss, Model};
pub use server::{
    fuse_prompts, fuse_uniform, fusion_weights, refine_objective, score_from_record,
    score_prompt, server_refine, PromptScore, RefineConfig, RefineStats, RefineVars,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cdfp::CdfpOptions;
use crate::data::LabeledSample;
use crate::dsop::{build_subspace, TaskLossVariant};
use crate::encoder::{build_prompt_templates, EncoderConfig, FrozenBackbone, PromptSet, TextEncoder};
use crate::error::{Error, Result};
use crate::metrics::{eod_global, BiasMetric, GroupConfusion, MetricRecord};
use crate::numerics::{derive_seed, AdamWConfig};

/// Which of the three method components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    /// Cross-layer prompt residuals.
    pub cdfp: bool,
    /// Demographic projection and the fairness hinge.
    pub dsop: bool,
    /// Score-weighted fusion plus server refinement (uniform fusion otherwise).
    pub fpf: bool,
}

impl Components {
    pub const ALL: Self = Self {
        cdfp: true,
        dsop: true,
        fpf: true,
    };
    pub const NONE: Self = Self {
        cdfp: false,
        dsop: false,
        fpf: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub encoder: EncoderConfig,
    pub task: String,
    pub attribute: String,
    pub components: Components,
    /// Deeper layers see the residual-updated prompt states.
    pub compounding: bool,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_steps: Option<usize>,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub mu: f64,
    pub lambda1: f64,
    /// Retained subspace directions.
    pub k: usize,
    pub task_variant: TaskLossVariant,
    pub bias_metric: BiasMetric,
    pub lambda2: f64,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub refine_per_cell: usize,
    /// Positive samples per (client, group) used for the cross-client gap.
    pub fglobal_cap: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            task: "smiling".into(),
            attribute: "gender".into(),
            components: Components::ALL,
            compounding: true,
            rounds: 20,
            local_epochs: 1,
            local_steps: Some(10),
            batch_size: 16,
            adamw: AdamWConfig::default(),
            mu: 0.3,
            lambda1: 1.0,
            k: 1,
            task_variant: TaskLossVariant::Standard,
            bias_metric: BiasMetric::EqualizedOdds,
            lambda2: 1.0,
            refine_steps: 10,
            refine_lr: 2e-4,
            refine_per_cell: 4,
            fglobal_cap: 100,
            seed: 0,
        }
    }
}

/// Data handed to a run.
#[derive(Clone, Copy, Debug)]
pub struct FederationData<'a> {
    pub train: &'a [LabeledSample],
    pub shards: &'a [Vec<usize>],
    /// Per-client held-out indices into `train` for the cross-client gap.
    /// When empty, the gap is measured on the training shards.
    pub holdout: &'a [Vec<usize>],
    pub val: &'a [LabeledSample],
    pub test: &'a [LabeledSample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRecord {
    pub client: usize,
    /// Validation metrics of the client's prompts (absent when not scored).
    pub metrics: Option<MetricRecord>,
    pub score: Option<f64>,
    pub weight: f64,
    pub local: LocalStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRecord>,
    /// Test-set metrics of the global prompts after this round.
    pub global: MetricRecord,
    /// Clients left out of the cross-client gap for lack of positives.
    pub fglobal_excluded: Vec<usize>,
    pub refine: Option<RefineStats>,
}

#[derive(Clone, Debug)]
pub struct FairnessReport {
    pub initial: MetricRecord,
    pub initial_excluded: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
    pub complete: bool,
    pub failure: Option<String>,
    pub backbone_hash: String,
    pub backbone_hash_after: String,
    pub final_prompts: PromptSet,
}

impl FairnessReport {
    /// Metrics of the last completed round, or the initial evaluation.
    pub fn final_metrics(&self) -> MetricRecord {
        self.rounds.last().map_or(self.initial, |r| r.global)
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.encoder.prompt_tokens == 0 {
            return bad("at least one prompt token is required".into());
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad(format!("mu = {} must lie in [0, 1)", self.mu));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative".into());
        }
        if !(self.adamw.lr > 0.0 && self.refine_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        Ok(())
    }

    pub fn local_schedule(&self) -> LocalSchedule {
        LocalSchedule {
            epochs: self.local_epochs,
            max_steps: self.local_steps,
            batch_size: self.batch_size,
            adamw: self.adamw,
            loss: LocalLoss {
                mu: self.mu,
                lambda1: if self.components.dsop { self.lambda1 } else { 0.0 },
                variant: self.task_variant,
            },
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            steps: self.refine_steps,
            lambda2: self.lambda2,
            per_cell: self.refine_per_cell,
            adamw: AdamWConfig {
                lr: self.refine_lr,
                ..self.adamw
            },
        }
    }

    /// Frozen model pieces shared by all participants.
    pub fn build_model(&self) -> Result<Model> {
        let backbone = FrozenBackbone::new(self.encoder.clone())?;
        let text = TextEncoder::new(self.encoder.dim, self.encoder.seed);
        let templates = build_prompt_templates(&self.task, &self.attribute)?;
        let classes = text.encode_all(&templates.classes_by_label())?;
        let subspace = if self.components.dsop {
            Some(build_subspace(&text, &self.attribute, &templates.demographics, self.k)?)
        } else {
            None
        };
        Ok(Model {
            backbone,
            classes,
            subspace,
            cdfp: CdfpOptions {
                enabled: self.components.cdfp,
                compounding: self.compounding,
            },
            temperature: self.encoder.temperature,
        })
    }

    pub fn initial_prompts(&self) -> Result<PromptSet> {
        let templates = build_prompt_templates(&self.task, &self.attribute)?;
        let cats: Vec<&str> = templates.categories.iter().map(String::as_str).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[b"prompts"]));
        Ok(PromptSet::init(&self.encoder, &cats, &mut rng))
    }
}

/// Fixed per-client positive subsets used for the cross-client gap.
fn fglobal_sets(
    model: &Model,
    data: &FederationData<'_>,
    cap: usize,
    seed: u64,
) -> Result<Vec<EncodedSet>> {
    let source = if data.holdout.is_empty() { data.shards } else { data.holdout };
    source
        .iter()
        .enumerate()
        .map(|(c, shard)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"fglobal", &(c as u64).to_le_bytes()]));
            let mut chosen = Vec::new();
            for grp in 0..2u8 {
                let pos: Vec<usize> = shard
                    .iter()
                    .copied()
                    .filter(|&i| data.train[i].y == 1 && data.train[i].g == grp)
                    .collect();
                let take = cap.min(pos.len());
                let mut pick: Vec<usize> = rand::seq::index::sample(&mut rng, pos.len(), take)
                    .into_iter()
                    .map(|k| pos[k])
                    .collect();
                pick.sort_unstable();
                chosen.extend(pick);
            }
            EncodedSet::new(&model.backbone, chosen.iter().map(|&i| &data.train[i]))
        })
        .collect()
}

fn evaluate_global(
    model: &Model,
    prompts: &PromptSet,
    test: &EncodedSet,
    fglobal: &[EncodedSet],
) -> Result<(MetricRecord, Vec<usize>)> {
    let mut rec = MetricRecord::from_confusion(&model.confusion(prompts, test)?)?;
    let confs = fglobal
        .iter()
        .map(|s| model.confusion(prompts, s))
        .collect::<Result<Vec<GroupConfusion>>>()?;
    let eod = eod_global(&confs)?;
    rec.f_global = Some(eod.value);
    Ok((rec, eod.excluded))
}

/// Runs the configured number of rounds. Setup errors are returned; a
/// failure inside a round ends the run with a report marked incomplete.
pub fn run_federation(cfg: &FederationConfig, data: FederationData<'_>) -> Result<FairnessReport> {
    cfg.validate()?;
    if data.shards.is_empty() || data.shards.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every client needs a non-empty shard"));
    }
    if !data.holdout.is_empty() && data.holdout.len() != data.shards.len() {
        return Err(Error::invalid("holdout lists must match the client shards"));
    }
    let model = cfg.build_model()?;
    let backbone_hash = model.backbone.content_hash();
    let val = EncodedSet::new(&model.backbone, data.val)?;
    let test = EncodedSet::new(&model.backbone, data.test)?;
    let fglobal = fglobal_sets(&model, &data, cfg.fglobal_cap, cfg.seed)?;
    let mut global = cfg.initial_prompts()?;
    let mut clients = data
        .shards
        .iter()
        .enumerate()
        .map(|(id, shard)| {
            let set = EncodedSet::new(&model.backbone, shard.iter().map(|&i| &data.train[i]))?;
            Ok(ClientState::new(id, set, global.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let (initial, initial_excluded) = evaluate_global(&model, &global, &test, &fglobal)?;
    let mut report = FairnessReport {
        initial,
        initial_excluded,
        rounds: Vec::with_capacity(cfg.rounds),
        complete: true,
        failure: None,
        backbone_hash: backbone_hash.clone(),
        backbone_hash_after: String::new(),
        final_prompts: global.clone(),
    };
    let schedule = cfg.local_schedule();
    let refine = cfg.refine_config();

    for round in 0..cfg.rounds {
        let step = run_round(
            cfg, &model, &schedule, &refine, &mut clients, &global, &val, &test, &fglobal, round,
        );
        match step {
            Ok((record, next)) => {
                report.rounds.push(record);
                global = next;
            }
            Err(e) => {
                report.complete = false;
                report.failure = Some(format!("round {round}: {e}"));
                break;
            }
        }
    }
    report.final_prompts = global;
    report.backbone_hash_after = model.backbone.content_hash();
    if report.backbone_hash_after != backbone_hash {
        report.complete = false;
        report.failure = Some("frozen backbone changed during the run".into());
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    cfg: &FederationConfig,
    model: &Model,
    schedule: &LocalSchedule,
    refine: &RefineConfig,
    clients: &mut [ClientState],
    global: &PromptSet,
    val: &EncodedSet,
    test: &EncodedSet,
    fglobal: &[EncodedSet],
    round: usize,
) -> Result<(RoundRecord, PromptSet)> {
    let round_bytes = (round as u64).to_le_bytes();
    let stats = clients
        .par_iter_mut()
        .map(|c| {
            let seed = derive_seed(cfg.seed, &[b"client", &(c.id as u64).to_le_bytes(), &round_bytes]);
            client_update(model, c, global, schedule, seed)
        })
        .collect::<Vec<Result<LocalStats>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let locals: Vec<PromptSet> = clients.iter().map(|c| c.prompts.clone()).collect();

    let (fused, scores, weights, refine_stats) = if cfg.components.fpf {
        let scored = locals
            .par_iter()
            .map(|p| score_prompt(model, p, val, cfg.bias_metric))
            .collect::<Vec<Result<PromptScore>>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let raw: Vec<f64> = scored.iter().map(|s| s.score).collect();
        let weights = fusion_weights(&raw)?;
        let fused = fuse_prompts(&locals, &raw)?;
        let seed = derive_seed(cfg.seed, &[b"refine", &round_bytes]);
        let (refined, rs) = server_refine(model, &fused, val, refine, seed)?;
        (refined, Some(scored), weights, Some(rs))
    } else {
        let n = locals.len();
        (fuse_uniform(&locals)?, None, vec![1.0 / n as f64; n], None)
    };

    let (global_rec, excluded) = evaluate_global(model, &fused, test, fglobal)?;
    let records = clients
        .iter()
        .zip(&stats)
        .enumerate()
        .map(|(i, (c, s))| ClientRecord {
            client: c.id,
            metrics: scores.as_ref().map(|v| v[i].record),
            score: scores.as_ref().map(|v| v[i].score),
            weight: weights[i],
            local: *s,
        })
        .collect();
    Ok((
        RoundRecord {
            round,
            clients: records,
            global: global_rec,
            fglobal_excluded: excluded,
            refine: refine_stats,
        },
        fused,
    ))
}
