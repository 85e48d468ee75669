//! Cross-layer prompt residuals through gated attention pooling.
//!
//! After transformer layer `l`, the prompt state `P_l` is updated to
//! `P_l + Σ_i γ_i P_i` over the earlier states `P_0..P_{l-1}`, where
//! `γ = softmax_i(g_l · h_i)` and `h_i` is the mean token of `P_i`.

use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph, Tensor, Var};

/// Switches for the cross-layer update inside the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdfpOptions {
    pub enabled: bool,
    /// Whether the updated state (rather than the raw layer output) is what
    /// deeper layers see in their history.
    pub compounding: bool,
}

impl Default for CdfpOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            compounding: true,
        }
    }
}

impl CdfpOptions {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            compounding: true,
        }
    }
}

/// Mean of the `K` token rows, as a `1 × d` row.
pub fn contextualize(state: &Tensor) -> Result<Tensor> {
    let [k, d] = state.shape();
    if k == 0 {
        return Err(Error::invalid("contextualize needs at least one token"));
    }
    let mut h = vec![0.0; d];
    for r in 0..k {
        h.iter_mut().zip(state.row_slice(r)).for_each(|(a, b)| *a += b);
    }
    h.iter_mut().for_each(|a| *a /= k as f64);
    Ok(Tensor::row(h))
}

/// Softmax over `g · h_i`.
pub fn gap_weights(query: &Tensor, contexts: &[Tensor]) -> Result<Vec<f64>> {
    if contexts.is_empty() {
        return Err(Error::invalid("gap_weights needs at least one context"));
    }
    let mut logits = Vec::with_capacity(contexts.len());
    for h in contexts {
        if h.len() != query.len() {
            return Err(Error::shape(
                "gap_weights",
                format!("context width {} vs query width {}", h.len(), query.len()),
            ));
        }
        logits.push(kernels::dot(query.data(), h.data()));
    }
    kernels::softmax_in_place(&mut logits);
    Ok(logits)
}

/// `Σ_i γ_i P_i`.
pub fn gap_pool(gamma: &[f64], history: &[Tensor]) -> Result<Tensor> {
    if gamma.len() != history.len() || history.is_empty() {
        return Err(Error::shape(
            "gap_pool",
            format!("{} weights for {} states", gamma.len(), history.len()),
        ));
    }
    let mut out = Tensor::zeros(history[0].rows(), history[0].cols());
    for (w, p) in gamma.iter().zip(history) {
        if p.shape() != out.shape() {
            return Err(Error::shape("gap_pool", "history states differ in shape"));
        }
        out.add_assign(&p.scale(*w));
    }
    Ok(out)
}

/// Value form of the update for a single sample: `P + gap_pool(γ, history)`.
pub fn cross_layer_update(state: &Tensor, history: &[Tensor], query: &Tensor) -> Result<Tensor> {
    let contexts = history
        .iter()
        .map(contextualize)
        .collect::<Result<Vec<_>>>()?;
    let gamma = gap_weights(query, &contexts)?;
    let delta = gap_pool(&gamma, history)?;
    state.add(&delta)
}

/// Recorded, batched form of [`cross_layer_update`].
///
/// `state` and every `history` entry are `(B·K) × d` with the `K` rows of
/// sample `b` at `b·K..(b+1)·K`; `query` is `1 × d`. Each sample gets its
/// own pooling weights.
pub fn apply_cross_layer(
    g: &mut Graph<'_>,
    state: Var,
    history: &[Var],
    query: Var,
    batch: usize,
    k: usize,
) -> Result<Var> {
    if history.is_empty() {
        return Err(Error::invalid("cross-layer update needs a non-empty history"));
    }
    let [rows, d] = g.value(state).shape();
    if rows != batch * k || k == 0 {
        return Err(Error::shape(
            "apply_cross_layer",
            format!("state has {rows} rows for batch {batch} x K {k}"),
        ));
    }
    if g.value(query).shape() != [1, d] {
        return Err(Error::shape("apply_cross_layer", "query must be 1 x d"));
    }
    for &h in history {
        if g.value(h).shape() != [rows, d] {
            return Err(Error::shape("apply_cross_layer", "history state shape mismatch"));
        }
    }

    // B × (B·K) row averaging and (B·K) × B row expansion.
    let mut avg = Tensor::zeros(batch, rows);
    let mut expand = Tensor::zeros(rows, batch);
    for b in 0..batch {
        for i in 0..k {
            avg.set(b, b * k + i, 1.0 / k as f64);
            expand.set(b * k + i, b, 1.0);
        }
    }
    let avg = g.constant(avg);
    let expand = g.constant(expand);

    let mut logits = Vec::with_capacity(history.len());
    for &h in history {
        let ctx = g.matmul(avg, h)?;
        logits.push(g.matmul_t(ctx, false, query, true)?);
    }
    let logits = g.concat_cols(&logits)?;
    let gamma = g.softmax(logits)?;

    let mut out = state;
    for (i, &h) in history.iter().enumerate() {
        let w = g.slice_cols(gamma, i, 1)?;
        let w = g.matmul(expand, w)?;
        let term = g.mul_col(h, w)?;
        out = g.add(out, term)?;
    }
    Ok(out)
}
