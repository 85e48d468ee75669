use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{EncodedSet, LocalLoss, Model};
use crate::encoder::PromptSet;
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWConfig, Graph, OptimizerState, Tensor};

/// One participant: its shard, its working prompt copy and optimizer
/// moments (kept across rounds).
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: EncodedSet,
    pub prompts: PromptSet,
    pub opt: OptimizerState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalSchedule {
    pub epochs: usize,
    /// Upper bound on optimizer steps per round, across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub loss: LocalLoss,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalStats {
    pub steps: usize,
    /// Objective on the first and last mini-batch of the round.
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

impl ClientState {
    pub fn new(id: usize, data: EncodedSet, prompts: PromptSet) -> Self {
        Self {
            id,
            data,
            prompts,
            opt: OptimizerState::default(),
        }
    }
}

/// Value of the local objective on the given samples, without gradients.
pub fn local_objective(
    model: &Model,
    prompts: &PromptSet,
    data: &EncodedSet,
    idx: &[usize],
    loss: &LocalLoss,
) -> Result<f64> {
    let tokens: Vec<&Tensor> = idx.iter().map(|&i| &data.tokens[i]).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| data.y[i]).collect();
    let mut g = Graph::new();
    let vars = prompts.constants(&mut g);
    let j = model.local_loss(&mut g, &vars, &tokens, &labels, loss)?;
    g.value(j.l_final).item()
}

/// One optimizer step on a batch; returns the objective before the step.
pub(crate) fn train_step<'a>(
    model: &'a Model,
    prompts: &mut PromptSet,
    opt: &mut OptimizerState,
    adamw: &AdamWConfig,
    build: impl FnOnce(&'a Model, &mut Graph<'a>, &crate::encoder::PromptVars) -> Result<crate::numerics::Var>,
) -> Result<f64> {
    let (value, grads) = {
        let mut g = Graph::new();
        let vars = prompts.register_owned(&mut g);
        let loss = build(model, &mut g, &vars)?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        (value, vars.gradients(&grads, prompts))
    };
    let mut params = prompts.to_params();
    adamw_step(&mut params, &grads, opt, adamw)?;
    prompts.set_params(params)?;
    if !prompts.is_finite() {
        return Err(Error::NonFinite("adamw_step"));
    }
    Ok(value)
}

/// Copies `global` into the client and trains it on the local shard.
pub fn client_update(
    model: &Model,
    state: &mut ClientState,
    global: &PromptSet,
    sched: &LocalSchedule,
    seed: u64,
) -> Result<LocalStats> {
    if sched.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if state.data.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty shard", state.id)));
    }
    state.prompts = global.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = LocalStats::default();
    let mut order: Vec<usize> = (0..state.data.len()).collect();
    let budget = sched.max_steps.unwrap_or(usize::MAX);
    'epochs: for _ in 0..sched.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(sched.batch_size) {
            if stats.steps >= budget {
                break 'epochs;
            }
            let data = &state.data;
            let tokens: Vec<&Tensor> = batch.iter().map(|&i| &data.tokens[i]).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| data.y[i]).collect();
            let value = train_step(model, &mut state.prompts, &mut state.opt, &sched.adamw, |m, g, v| {
                Ok(m.local_loss(g, v, &tokens, &labels, &sched.loss)?.l_final)
            })
            .map_err(|e| Error::Diverged(format!("client {}: {e}", state.id)))?;
            stats.first_loss.get_or_insert(value);
            stats.last_loss = Some(value);
            stats.steps += 1;
        }
    }
    Ok(stats)
}
