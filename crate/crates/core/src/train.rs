//! Pairwise ranking objective, exact reverse-mode gradients through the
//! full forward pass, mini-batch Adam, and the training loop.
//!
//! The loss is the BPR objective Σ −ln σ(x̂_pos − x̂_neg) + λ‖Θ‖² over
//! sampled (patient, positive, negative) triples. Gradients are derived by
//! hand through concatenation, row normalization, dropout, LeakyReLU, both
//! layer branches, hop mixing (including the softmax Jacobian for the hop
//! logits), the first-order aggregation layer, and the embedding tables.
//! The frozen demographic block never receives a gradient.

use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::InteractionMatrix;
use crate::model::{
    self, final_embeddings, forward, leaky_relu_deriv, seeded_rng, FinalEmbeddings, LayerOutputs,
    Mode, ModelConfig, ModelState, PropagationGraph,
};

const TAG_SHUFFLE: u64 = 10;
const TAG_NEGATIVE: u64 = 11;
const TAG_PROBE: u64 = 12;

/// Which tensors the L2 term covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegScope {
    /// λ‖Θ‖² over every trainable tensor.
    All,
    /// Embedding tables only (matrix-factorization convention).
    EmbeddingsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// L2 regularization weight λ.
    pub l2_weight: f64,
    pub negatives_per_positive: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub reg_scope: RegScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 30,
            l2_weight: 1e-5,
            negatives_per_positive: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            reg_scope: RegScope::All,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.l2_weight < 0.0 {
            return Err(Error::Config("l2_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// One BPR comparison: patient p is assumed more at risk of `pos` than of
/// `neg`, where `pos` is a training positive and `neg` is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub patient: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Gradients for each layer's tensors; shapes mirror [`model::LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w_gc: Array2<f64>,
    pub b_gc: Array1<f64>,
    pub w_bi: Array2<f64>,
    pub b_bi: Array1<f64>,
    pub hop_logits: Array1<f64>,
}

/// One dense gradient tensor per trainable parameter. The frozen patient
/// block intentionally has no slot here.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub patient_learnable: Array2<f64>,
    pub disease_embed: Array2<f64>,
    pub layers: Vec<LayerGrads>,
}

impl GradientBuffer {
    pub fn zeros_like(state: &ModelState) -> Self {
        Self {
            patient_learnable: Array2::zeros(state.patient_learnable.dim()),
            disease_embed: Array2::zeros(state.disease_embed.dim()),
            layers: state
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w_gc: Array2::zeros(l.w_gc.dim()),
                    b_gc: Array1::zeros(l.b_gc.len()),
                    w_bi: Array2::zeros(l.w_bi.dim()),
                    b_bi: Array1::zeros(l.b_bi.len()),
                    hop_logits: Array1::zeros(l.hop_logits.len()),
                })
                .collect(),
        }
    }

    /// Flat slices in the same canonical order as
    /// [`ModelState::trainable_slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 + 5 * self.layers.len());
        out.push(self.patient_learnable.as_slice().expect("standard layout"));
        out.push(self.disease_embed.as_slice().expect("standard layout"));
        for layer in &self.layers {
            out.push(layer.w_gc.as_slice().expect("standard layout"));
            out.push(layer.b_gc.as_slice().expect("standard layout"));
            out.push(layer.w_bi.as_slice().expect("standard layout"));
            out.push(layer.b_bi.as_slice().expect("standard layout"));
            out.push(layer.hop_logits.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 + 5 * self.layers.len());
        out.push(self.patient_learnable.as_slice_mut().expect("standard layout"));
        out.push(self.disease_embed.as_slice_mut().expect("standard layout"));
        for layer in &mut self.layers {
            out.push(layer.w_gc.as_slice_mut().expect("standard layout"));
            out.push(layer.b_gc.as_slice_mut().expect("standard layout"));
            out.push(layer.w_bi.as_slice_mut().expect("standard layout"));
            out.push(layer.b_bi.as_slice_mut().expect("standard layout"));
            out.push(layer.hop_logits.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flatten().copied().collect()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Logistic function, stable for large |x|.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + eˣ) without overflow; −ln σ(x) = softplus(−x).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sq_norm(state: &ModelState, scope: RegScope) -> f64 {
    match scope {
        RegScope::All => state.sq_norm_all(),
        RegScope::EmbeddingsOnly => state.sq_norm_embeddings(),
    }
}

/// BPR objective over a batch: Σ −ln σ(x̂_{p,pos} − x̂_{p,neg}) + λ‖Θ‖².
pub fn bpr_loss(
    batch: &[Triple],
    z: &FinalEmbeddings,
    state: &ModelState,
    cfg: &TrainConfig,
) -> f64 {
    let pairwise: f64 = batch
        .iter()
        .map(|t| {
            let delta = z.score(t.patient, t.pos) - z.score(t.patient, t.neg);
            softplus(-delta)
        })
        .sum();
    pairwise + cfg.l2_weight * sq_norm(state, cfg.reg_scope)
}

/// Backward gradient of the upstream `up` through row-wise l2
/// normalization, given the normalized output and the denominators used.
fn row_norm2_backward(up: &Array2<f64>, out: &Array2<f64>, denoms: &Array1<f64>) -> Array2<f64> {
    let mut grad = Array2::zeros(up.dim());
    for i in 0..up.nrows() {
        let u = up.row(i);
        let o = out.row(i);
        let dot = u.dot(&o);
        let mut g = grad.row_mut(i);
        for j in 0..up.ncols() {
            g[j] = (u[j] - dot * o[j]) / denoms[i];
        }
    }
    grad
}

/// Shared tail of every layer's backward: row normalization, dropout mask,
/// LeakyReLU. Returns the gradient at the pre-activation.
fn post_stage_backward(
    up: &Array2<f64>,
    out: &Array2<f64>,
    denoms: &Array1<f64>,
    mask: Option<&Array2<f64>>,
    pre: &Array2<f64>,
    slope: f64,
) -> Array2<f64> {
    let mut g = row_norm2_backward(up, out, denoms);
    if let Some(m) = mask {
        g *= m;
    }
    ndarray::Zip::from(&mut g).and(pre).for_each(|gv, &pv| {
        *gv *= leaky_relu_deriv(pv, slope);
    });
    g
}

/// Exact gradients of [`bpr_loss`] with respect to every trainable tensor.
/// `outputs` must come from a train-mode forward on the same state.
pub fn backward(
    batch: &[Triple],
    outputs: &LayerOutputs,
    state: &ModelState,
    graph: &PropagationGraph,
    cfg: &TrainConfig,
) -> Result<GradientBuffer> {
    let cache = outputs.cache.as_ref().ok_or_else(|| {
        Error::Structure("backward requires a train-mode forward cache".into())
    })?;
    let num_layers = state.config.num_layers;
    if outputs.zs.len() != num_layers + 1
        || outputs.num_patients != state.num_patients()
        || outputs.zs[0].dim() != (state.num_nodes(), state.config.embed_dim)
    {
        return Err(Error::Structure("forward cache does not match state".into()));
    }

    let z = final_embeddings(outputs);
    let p_count = state.num_patients();
    let mut grads = GradientBuffer::zeros_like(state);

    // Loss gradient at the concatenated embeddings.
    let mut d_final = Array2::zeros((state.num_nodes(), z.width()));
    for t in batch {
        let delta = z.score(t.patient, t.pos) - z.score(t.patient, t.neg);
        let g = -sigmoid(-delta);
        let diff = &z.disease_row(t.pos) - &z.disease_row(t.neg);
        d_final.row_mut(t.patient).scaled_add(g, &diff);
        let zp = z.patient_row(t.patient).to_owned();
        d_final.row_mut(p_count + t.pos).scaled_add(g, &zp);
        d_final.row_mut(p_count + t.neg).scaled_add(-g, &zp);
    }

    // Split through the concatenation into per-layer blocks.
    let mut d_layers: Vec<Array2<f64>> = Vec::with_capacity(num_layers + 1);
    let mut offset = 0;
    for zl in &outputs.zs {
        let w = zl.ncols();
        d_layers.push(d_final.slice(s![.., offset..offset + w]).to_owned());
        offset += w;
    }

    let slope = state.config.leaky_slope;

    // Propagation layers, deepest first.
    for layer in (2..=num_layers).rev() {
        let c = &cache.prop_layers[layer - 2];
        let params = &state.layers[layer - 1];
        let d_pre = post_stage_backward(
            &d_layers[layer],
            &outputs.zs[layer],
            &c.norms,
            c.mask.as_ref(),
            &c.pre,
            slope,
        );

        // Linear branch G = S·W_gc + 1·b_gcᵀ.
        grads.layers[layer - 1].w_gc += &c.s.t().dot(&d_pre);
        grads.layers[layer - 1].b_gc += &d_pre.sum_axis(Axis(0));
        let mut d_s = d_pre.dot(&params.w_gc.t());

        // Bilinear branch B = (Z_prev ∘ S)·W_bi + 1·b_biᵀ.
        let u = &outputs.zs[layer - 1] * &c.s;
        grads.layers[layer - 1].w_bi += &u.t().dot(&d_pre);
        grads.layers[layer - 1].b_bi += &d_pre.sum_axis(Axis(0));
        let d_u = d_pre.dot(&params.w_bi.t());
        d_layers[layer - 1] += &(&d_u * &c.s);
        d_s += &(&d_u * &outputs.zs[layer - 1]);

        // Hop mixing S = Σ β_i Â^i Z_prev: logits via the softmax Jacobian,
        // the input via the self-adjoint hop operator (Â is symmetric).
        let d_beta: Vec<f64> = c.hops.iter().map(|t| (t * &d_s).sum()).collect();
        let pivot: f64 = c.beta.iter().zip(&d_beta).map(|(b, g)| b * g).sum();
        for ((slot, &b), &g) in grads.layers[layer - 1]
            .hop_logits
            .iter_mut()
            .zip(&c.beta)
            .zip(&d_beta)
        {
            *slot += b * (g - pivot);
        }
        d_layers[layer - 1] += &model::hop_mix(graph.laplacian(), &d_s.view(), &c.beta)?;
    }

    // First-order layer.
    if num_layers >= 1 {
        let c = cache.first_order.as_ref().ok_or_else(|| {
            Error::Structure("forward cache is missing the first-order layer".into())
        })?;
        let d_pre = post_stage_backward(
            &d_layers[1],
            &outputs.zs[1],
            &c.norms,
            c.mask.as_ref(),
            &c.pre,
            slope,
        );
        let agg = &outputs.zs[0] * &c.q;
        grads.layers[0].w_gc += &agg.t().dot(&d_pre);
        let d_agg = d_pre.dot(&state.layers[0].w_gc.t());
        d_layers[0] += &(&d_agg * &c.q);
        let d_q = &d_agg * &outputs.zs[0];
        d_layers[0] += &graph.first_order().spmm(&d_q.view())?;
    }

    // Embedding tables; the fixed block's columns are dropped.
    let learn_width = state.config.embed_dim - state.config.fixed_dim;
    grads.patient_learnable += &d_layers[0].slice(s![..p_count, ..learn_width]);
    grads.disease_embed += &d_layers[0].slice(s![p_count.., ..]);

    // L2 term: ∂(λ‖Θ‖²)/∂θ = 2λθ.
    if cfg.l2_weight > 0.0 {
        let two_lambda = 2.0 * cfg.l2_weight;
        match cfg.reg_scope {
            RegScope::All => {
                for (g, p) in grads.slices_mut().into_iter().zip(state.trainable_slices()) {
                    for (gv, pv) in g.iter_mut().zip(p) {
                        *gv += two_lambda * pv;
                    }
                }
            }
            RegScope::EmbeddingsOnly => {
                grads
                    .patient_learnable
                    .scaled_add(two_lambda, &state.patient_learnable);
                grads.disease_embed.scaled_add(two_lambda, &state.disease_embed);
            }
        }
    }

    Ok(grads)
}

/// First and second moment estimates per trainable tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradientBuffer,
    pub v: GradientBuffer,
    pub step: u64,
}

impl AdamState {
    pub fn new(state: &ModelState) -> Self {
        Self {
            m: GradientBuffer::zeros_like(state),
            v: GradientBuffer::zeros_like(state),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over every trainable tensor. The frozen
/// patient block is untouched by construction. Non-finite gradients abort.
pub fn adam_step(
    state: &mut ModelState,
    grads: &GradientBuffer,
    adam: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let params = state.trainable_slices_mut();
    let gs = grads.slices();
    let ms = adam.m.slices_mut();
    let vs = adam.v.slices_mut();
    if params.len() != gs.len() {
        return Err(Error::Structure("gradient shapes do not match state".into()));
    }
    for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Uniform negative for one patient: any disease outside the training
/// positives, rejection-resampled on collision. None when every disease is
/// a positive.
pub fn sample_negative(
    train: &InteractionMatrix,
    patient: usize,
    rng: &mut ChaCha20Rng,
) -> Option<usize> {
    let d = train.num_diseases();
    if train.patient_degree(patient) >= d {
        return None;
    }
    loop {
        let cand = rng.random_range(0..d);
        if !train.has_edge(patient, cand) {
            return Some(cand);
        }
    }
}

/// Sample `count` triples: positives uniform per occurrence, negatives
/// uniform outside each patient's positives. Patients holding every disease
/// are skipped with a warning.
pub fn sample_triples(
    train: &InteractionMatrix,
    count: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Triple> {
    let entries = train.entries();
    let mut out = Vec::with_capacity(count);
    if entries.is_empty() {
        return out;
    }
    for _ in 0..count {
        let e = entries[rng.random_range(0..entries.len())];
        match sample_negative(train, e.patient, rng) {
            Some(neg) => out.push(Triple {
                patient: e.patient,
                pos: e.disease,
                neg,
            }),
            None => {
                log::warn!(
                    "patient {} holds every disease; skipped in sampling",
                    e.patient
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub state: ModelState,
    pub log: Vec<EpochStats>,
}

#[derive(Debug, Error)]
pub enum FitError {
    /// Training produced a non-finite loss or gradient; the last state that
    /// completed an epoch cleanly is carried for checkpointing.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<ModelState>,
        log: Vec<EpochStats>,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

/// Callback invoked after every completed epoch (checkpointing, logging).
pub type EpochObserver<'a> = &'a mut dyn FnMut(&ModelState, &EpochStats) -> Result<()>;

/// Train on the dataset's training split. One epoch is a pass over all
/// training positives in shuffled order; each positive is paired with
/// sampled negatives into BPR triples. Returns the final state and the
/// per-epoch loss log.
pub fn fit(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut observer: Option<EpochObserver>,
) -> std::result::Result<FitResult, FitError> {
    train_cfg.validate().map_err(FitError::Core)?;
    let graph = PropagationGraph::from_interactions(&dataset.train);
    // A model without a fixed block ignores the dataset's demographic
    // features entirely (the matrix-factorization baseline path).
    let features = if model_cfg.fixed_dim == 0 {
        Array2::zeros((dataset.num_patients(), 0))
    } else {
        dataset.features.clone()
    };
    let mut state = model::init_state(model_cfg, dataset.train.num_diseases(), &features.view())
        .map_err(FitError::Core)?;
    let mut adam = AdamState::new(&state);
    let mut log: Vec<EpochStats> = Vec::with_capacity(train_cfg.epochs);

    let positives: Vec<usize> = (0..dataset.train.nnz()).collect();
    let mut probe_rng = seeded_rng(train_cfg.seed, TAG_PROBE, 0);
    let probe: Vec<Triple> = sample_triples(
        &dataset.train,
        positives.len().min(train_cfg.batch_size),
        &mut probe_rng,
    );

    let mut last_good = state.clone();
    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        let mut order = positives.clone();
        let mut shuffle_rng = seeded_rng(train_cfg.seed, TAG_SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut neg_rng = seeded_rng(train_cfg.seed, TAG_NEGATIVE, epoch as u64);

        let mut loss_sum = 0.0;
        let mut triple_count = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * train_cfg.negatives_per_positive);
            for &idx in chunk {
                let e = dataset.train.entries()[idx];
                for _ in 0..train_cfg.negatives_per_positive {
                    match sample_negative(&dataset.train, e.patient, &mut neg_rng) {
                        Some(neg) => batch.push(Triple {
                            patient: e.patient,
                            pos: e.disease,
                            neg,
                        }),
                        None => log::warn!(
                            "patient {} holds every disease; skipped in sampling",
                            e.patient
                        ),
                    }
                }
            }
            if batch.is_empty() {
                continue;
            }
            let outputs = forward(&mut state, &graph, Mode::Train).map_err(FitError::Core)?;
            let z = final_embeddings(&outputs);
            let loss = bpr_loss(&batch, &z, &state, train_cfg);
            if !loss.is_finite() {
                return Err(FitError::Diverged {
                    epoch,
                    reason: format!("non-finite batch loss {loss}"),
                    last_good: Box::new(last_good),
                    log,
                });
            }
            loss_sum += loss;
            triple_count += batch.len();
            let grads =
                backward(&batch, &outputs, &state, &graph, train_cfg).map_err(FitError::Core)?;
            if let Err(e) = adam_step(&mut state, &grads, &mut adam, train_cfg) {
                return Err(FitError::Diverged {
                    epoch,
                    reason: e.to_string(),
                    last_good: Box::new(last_good),
                    log,
                });
            }
        }

        // The probe batch guards against silent divergence between epochs.
        if !probe.is_empty() {
            let outputs = model::forward_eval(&state, &graph).map_err(FitError::Core)?;
            let probe_loss = bpr_loss(&probe, &final_embeddings(&outputs), &state, train_cfg);
            if !probe_loss.is_finite() {
                return Err(FitError::Diverged {
                    epoch,
                    reason: format!("non-finite probe loss {probe_loss}"),
                    last_good: Box::new(last_good),
                    log,
                });
            }
        }

        let stats = EpochStats {
            epoch,
            mean_loss: if triple_count > 0 {
                loss_sum / triple_count as f64
            } else {
                0.0
            },
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&state, &stats).map_err(FitError::Core)?;
        }
        log.push(stats);
        last_good = state.clone();
    }

    Ok(FitResult { state, log })
}
