use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, params: &[Tensor]) -> Result<()> {
        if self.m.is_empty() && self.step == 0 {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        let ok = self.m.len() == params.len()
            && params
                .iter()
                .zip(&self.m)
                .all(|(p, m)| p.shape() == m.shape());
        if !ok {
            return Err(Error::shape(
                "adamw",
                "optimizer state does not match parameter shapes",
            ));
        }
        Ok(())
    }
}

/// One AdamW step with decoupled weight decay, in place.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if params.len() != grads.len()
        || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::shape("adamw", "gradient shapes do not match parameters"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adamw gradient"));
    }
    state.ensure(params)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * cfg.weight_decay * pd[i];
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
