//! Model forward pass.
//!
//! Patient embeddings concatenate a learnable part with frozen demographic
//! attributes; disease embeddings are fully learnable. Layer 1 aggregates
//! first-order neighbor messages weighted by the edge decay; layers 2..L
//! combine a hop-mixed neighborhood signal through a linear (graph
//! convolution) branch and a bilinear (Hadamard) branch, followed by
//! LeakyReLU, dropout, and row-wise l2 normalization. Scores are inner
//! products of the layer-concatenated final embeddings.

use std::collections::HashSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    first_order_weights, laplacian_from_interactions, CsrMatrix, InteractionMatrix,
    NormalizedLaplacian,
};

/// Rows with l2 norm below this keep their values through RowNorm2.
pub const ROW_NORM_EPS: f64 = 1e-12;

// Seed-stream tags; every RNG in the crate derives from a (base, tag, index)
// triple so entities and tensors get independent, reproducible streams.
pub(crate) const TAG_PATIENT_ROW: u64 = 1;
pub(crate) const TAG_DISEASE_ROW: u64 = 2;
pub(crate) const TAG_W_GC: u64 = 3;
pub(crate) const TAG_W_BI: u64 = 4;
pub(crate) const TAG_DROPOUT: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed, a tag, and an index.
pub(crate) fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(tag)) ^ index)
}

pub(crate) fn seeded_rng(base: u64, tag: u64, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, tag, index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width k.
    pub embed_dim: usize,
    /// Width f of the frozen attribute block (f < k).
    pub fixed_dim: usize,
    /// Number of propagation layers L. 0 degenerates to plain matrix
    /// factorization (used by the reference baseline).
    pub num_layers: usize,
    /// Maximum hop order K mixed per layer.
    pub max_hops: usize,
    /// Output widths d_1..d_L. d_1 must equal k because layer 1 reuses its
    /// graph-convolution weight as the message transform.
    pub layer_dims: Vec<usize>,
    /// Dropout rates per layer, each in [0, 1).
    pub dropout: Vec<f64>,
    /// Negative slope of LeakyReLU.
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            fixed_dim: 43,
            num_layers: 3,
            max_hops: 3,
            layer_dims: vec![64; 3],
            dropout: vec![0.1; 3],
            leaky_slope: 0.2,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Plain embedding-dot-product model: no propagation, no fixed block.
    /// This is the matrix-factorization reference configuration.
    pub fn plain_factorization(embed_dim: usize, seed: u64) -> Self {
        Self {
            embed_dim,
            fixed_dim: 0,
            num_layers: 0,
            max_hops: 1,
            layer_dims: vec![],
            dropout: vec![],
            leaky_slope: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if self.fixed_dim >= self.embed_dim {
            return Err(Error::Config(format!(
                "fixed_dim {} must be smaller than embed_dim {}",
                self.fixed_dim, self.embed_dim
            )));
        }
        if self.max_hops == 0 {
            return Err(Error::Config("max_hops must be >= 1".into()));
        }
        if self.layer_dims.len() != self.num_layers {
            return Err(Error::Config(format!(
                "expected {} layer_dims, got {}",
                self.num_layers,
                self.layer_dims.len()
            )));
        }
        if self.dropout.len() != self.num_layers {
            return Err(Error::Config(format!(
                "expected {} dropout rates, got {}",
                self.num_layers,
                self.dropout.len()
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Config("layer_dims must all be >= 1".into()));
        }
        if self.num_layers >= 1 && self.layer_dims[0] != self.embed_dim {
            return Err(Error::Config(format!(
                "layer 1 width {} must equal embed_dim {}",
                self.layer_dims[0], self.embed_dim
            )));
        }
        if self.dropout.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope <= 0.0 {
            return Err(Error::Config("leaky_slope must be > 0".into()));
        }
        Ok(())
    }

    /// Input width of layer l (1-based): d_0 = k, else d_{l-1}.
    pub fn layer_input_dim(&self, l: usize) -> usize {
        if l <= 1 {
            self.embed_dim
        } else {
            self.layer_dims[l - 2]
        }
    }

    /// Width of the concatenated final embedding, k + Σ d_l.
    pub fn final_width(&self) -> usize {
        self.embed_dim + self.layer_dims.iter().sum::<usize>()
    }
}

/// Per-layer trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_gc: Array2<f64>,
    pub b_gc: Array1<f64>,
    pub w_bi: Array2<f64>,
    pub b_bi: Array1<f64>,
    /// Unnormalized hop-mixing logits α^(l); β^(l) = softmax(α^(l)).
    pub hop_logits: Array1<f64>,
}

/// All model parameters plus the dropout stream position.
///
/// `patient_fixed` holds the raw demographic one-hot block and is frozen:
/// it has no gradient slot and no optimizer ever touches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub patient_learnable: Array2<f64>,
    pub patient_fixed: Array2<f64>,
    pub disease_embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub dropout_seed: u64,
    pub dropout_counter: u64,
}

fn glorot_row(rng: &mut ChaCha20Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| (2.0 * rng.random::<f64>() - 1.0) * limit).collect()
}

/// Initialize a model state. Learnable tensors use a Glorot-style scaled
/// uniform; hop logits start at zero (uniform mixing); the fixed block is
/// copied verbatim from `features`. Every embedding row draws from its own
/// seed stream so initialization is independent of table sizes.
pub fn init_state(
    config: &ModelConfig,
    num_diseases: usize,
    features: &ArrayView2<f64>,
) -> Result<ModelState> {
    config.validate()?;
    if features.ncols() != config.fixed_dim {
        return Err(Error::Config(format!(
            "feature width {} does not match fixed_dim {}",
            features.ncols(),
            config.fixed_dim
        )));
    }
    let num_patients = features.nrows();
    let k = config.embed_dim;
    let learn_width = k - config.fixed_dim;

    let mut patient_learnable = Array2::zeros((num_patients, learn_width));
    for (i, mut row) in patient_learnable.outer_iter_mut().enumerate() {
        let mut rng = seeded_rng(config.seed, TAG_PATIENT_ROW, i as u64);
        let vals = glorot_row(&mut rng, learn_width, k, k);
        for (slot, v) in row.iter_mut().zip(vals) {
            *slot = v;
        }
    }
    let mut disease_embed = Array2::zeros((num_diseases, k));
    for (i, mut row) in disease_embed.outer_iter_mut().enumerate() {
        let mut rng = seeded_rng(config.seed, TAG_DISEASE_ROW, i as u64);
        let vals = glorot_row(&mut rng, k, k, k);
        for (slot, v) in row.iter_mut().zip(vals) {
            *slot = v;
        }
    }

    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 1..=config.num_layers {
        let d_in = config.layer_input_dim(l);
        let d_out = config.layer_dims[l - 1];
        let mut rng_gc = seeded_rng(config.seed, TAG_W_GC, l as u64);
        let mut rng_bi = seeded_rng(config.seed, TAG_W_BI, l as u64);
        let w_gc =
            Array2::from_shape_vec((d_in, d_out), glorot_row(&mut rng_gc, d_in * d_out, d_in, d_out))
                .expect("shape matches generated length");
        let w_bi =
            Array2::from_shape_vec((d_in, d_out), glorot_row(&mut rng_bi, d_in * d_out, d_in, d_out))
                .expect("shape matches generated length");
        layers.push(LayerParams {
            w_gc,
            b_gc: Array1::zeros(d_out),
            w_bi,
            b_bi: Array1::zeros(d_out),
            hop_logits: Array1::zeros(config.max_hops),
        });
    }

    Ok(ModelState {
        config: config.clone(),
        patient_learnable,
        patient_fixed: features.to_owned(),
        disease_embed,
        layers,
        dropout_seed: derive_seed(config.seed, TAG_DROPOUT, 0),
        dropout_counter: 0,
    })
}

impl ModelState {
    pub fn num_patients(&self) -> usize {
        self.patient_learnable.nrows()
    }

    pub fn num_diseases(&self) -> usize {
        self.disease_embed.nrows()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_patients() + self.num_diseases()
    }

    /// Check internal shape consistency (used after checkpoint loads).
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let k = self.config.embed_dim;
        let f = self.config.fixed_dim;
        if self.patient_learnable.ncols() != k - f
            || self.patient_fixed.ncols() != f
            || self.patient_fixed.nrows() != self.patient_learnable.nrows()
            || self.disease_embed.ncols() != k
            || self.layers.len() != self.config.num_layers
        {
            return Err(Error::Structure("model tensors do not match config".into()));
        }
        for (l, params) in self.layers.iter().enumerate() {
            let d_in = self.config.layer_input_dim(l + 1);
            let d_out = self.config.layer_dims[l];
            if params.w_gc.dim() != (d_in, d_out)
                || params.w_bi.dim() != (d_in, d_out)
                || params.b_gc.len() != d_out
                || params.b_bi.len() != d_out
                || params.hop_logits.len() != self.config.max_hops
            {
                return Err(Error::Structure(format!(
                    "layer {} tensors do not match config",
                    l + 1
                )));
            }
        }
        Ok(())
    }

    /// Stack patient rows [learnable | fixed] over disease rows into the
    /// (P+D)×k initial embedding table Z^(0).
    pub fn assemble_z0(&self) -> Array2<f64> {
        let p = self.num_patients();
        let k = self.config.embed_dim;
        let split = k - self.config.fixed_dim;
        let mut z0 = Array2::zeros((self.num_nodes(), k));
        z0.slice_mut(s![..p, ..split]).assign(&self.patient_learnable);
        z0.slice_mut(s![..p, split..]).assign(&self.patient_fixed);
        z0.slice_mut(s![p.., ..]).assign(&self.disease_embed);
        z0
    }

    /// Hop mixture weights β^(l) = softmax(α^(l)) for layer l (1-based).
    pub fn hop_weights(&self, layer: usize) -> Vec<f64> {
        softmax(&self.layers[layer - 1].hop_logits.view())
    }

    /// Fresh dropout stream for one training forward; advances the counter.
    fn next_dropout_rng(&mut self) -> ChaCha20Rng {
        let rng = seeded_rng(self.dropout_seed, TAG_DROPOUT, self.dropout_counter);
        self.dropout_counter += 1;
        rng
    }

    /// Trainable tensors as flat slices in canonical order:
    /// patient_learnable, disease_embed, then per layer
    /// (w_gc, b_gc, w_bi, b_bi, hop_logits). `patient_fixed` is absent.
    pub fn trainable_slices(&self) -> Vec<&[f64]> {
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

    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
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

    pub fn trainable_len(&self) -> usize {
        self.trainable_slices().iter().map(|s| s.len()).sum()
    }

    /// Read one trainable scalar by its flat index (canonical order).
    pub fn trainable_get(&self, mut index: usize) -> f64 {
        for slice in self.trainable_slices() {
            if index < slice.len() {
                return slice[index];
            }
            index -= slice.len();
        }
        panic!("trainable index out of range");
    }

    /// Add `delta` to one trainable scalar by its flat index.
    pub fn trainable_add(&mut self, mut index: usize, delta: f64) {
        for slice in self.trainable_slices_mut() {
            if index < slice.len() {
                slice[index] += delta;
                return;
            }
            index -= slice.len();
        }
        panic!("trainable index out of range");
    }

    /// Σ θ² over all trainable tensors.
    pub fn sq_norm_all(&self) -> f64 {
        self.trainable_slices()
            .iter()
            .map(|s| s.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Σ θ² over embedding tables only (matrix-factorization convention).
    pub fn sq_norm_embeddings(&self) -> f64 {
        self.patient_learnable.iter().map(|v| v * v).sum::<f64>()
            + self.disease_embed.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Numerically stable softmax; shift invariance is exact because the max is
/// subtracted before exponentiation.
pub fn softmax(logits: &ArrayView1<f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub(crate) fn leaky_relu_deriv(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Row-wise l2 normalization with the ROW_NORM_EPS guard: zero rows pass
/// through unchanged. Returns the normalized matrix and the denominator
/// actually used per row.
pub(crate) fn row_norm2(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = m.clone();
    let mut denoms = Array1::zeros(m.nrows());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(ROW_NORM_EPS);
        row.mapv_inplace(|v| v / denom);
        denoms[i] = denom;
    }
    (out, denoms)
}

/// Inverted-scaling dropout factors: 0 with probability rho, else 1/(1-rho).
fn dropout_factors(rows: usize, cols: usize, rho: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let keep_scale = 1.0 / (1.0 - rho);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let u: f64 = rng.random();
        data.push(if u < rho { 0.0 } else { keep_scale });
    }
    Array2::from_shape_vec((rows, cols), data).expect("shape matches generated length")
}

/// Sparse operators the forward pass runs on, both built from the training
/// interactions: the normalized Laplacian Â (with self-loops) and the
/// decay-weighted first-order adjacency (without).
#[derive(Debug, Clone)]
pub struct PropagationGraph {
    laplacian: NormalizedLaplacian,
    first_order: CsrMatrix,
    num_patients: usize,
    num_diseases: usize,
}

impl PropagationGraph {
    pub fn from_interactions(y: &InteractionMatrix) -> Self {
        Self {
            laplacian: laplacian_from_interactions(y),
            first_order: first_order_weights(y),
            num_patients: y.num_patients(),
            num_diseases: y.num_diseases(),
        }
    }

    pub fn laplacian(&self) -> &NormalizedLaplacian {
        &self.laplacian
    }

    pub fn first_order(&self) -> &CsrMatrix {
        &self.first_order
    }

    pub fn num_nodes(&self) -> usize {
        self.num_patients + self.num_diseases
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediates of layer 1 needed for the backward pass.
#[derive(Debug, Clone)]
pub struct FirstOrderCache {
    /// Weighted neighbor sums A_w · Z^(0); the aggregate is Z^(0) ∘ q.
    pub q: Array2<f64>,
    /// Pre-activation (Z^(0) ∘ q) · W.
    pub pre: Array2<f64>,
    pub mask: Option<Array2<f64>>,
    pub norms: Array1<f64>,
}

/// Intermediates of one propagation layer (l >= 2).
#[derive(Debug, Clone)]
pub struct PropLayerCache {
    /// Â^1 Z_prev .. Â^K Z_prev.
    pub hops: Vec<Array2<f64>>,
    /// Hop-mixed signal S = Σ β_i Â^i Z_prev.
    pub s: Array2<f64>,
    /// Pre-activation G + B.
    pub pre: Array2<f64>,
    pub mask: Option<Array2<f64>>,
    pub norms: Array1<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub first_order: Option<FirstOrderCache>,
    pub prop_layers: Vec<PropLayerCache>,
}

/// Z^(0)..Z^(L) plus (in train mode) everything backward needs.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    pub num_patients: usize,
    pub zs: Vec<Array2<f64>>,
    pub cache: Option<ForwardCache>,
}

fn first_order_core(
    z0: &Array2<f64>,
    fo: &CsrMatrix,
    w: &Array2<f64>,
    slope: f64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let q = fo.spmm(&z0.view())?;
    let agg = z0 * &q;
    let pre = agg.dot(w);
    let h = pre.mapv(|x| leaky_relu(x, slope));
    Ok((q, pre, h))
}

/// First-order neighbor aggregation (the layer-1 body, before dropout and
/// normalization): per node i, LeakyReLU(Σ_{j∈N_i} w_ij · W(z_i ∘ z_j)),
/// with W the layer-1 graph-convolution weight. Isolated nodes yield zero
/// rows.
pub fn first_order_aggregate(
    state: &ModelState,
    graph: &PropagationGraph,
) -> Result<Array2<f64>> {
    if state.config.num_layers == 0 {
        return Err(Error::Config(
            "first_order_aggregate requires at least one layer".into(),
        ));
    }
    let z0 = state.assemble_z0();
    let (_, _, h) = first_order_core(
        &z0,
        graph.first_order(),
        &state.layers[0].w_gc,
        state.config.leaky_slope,
    )?;
    Ok(h)
}

/// Hop-mixed signal S = Σ_{i=1..K} β_i Â^i Z, applied as K successive
/// sparse products; powers of Â are never materialized. With K = 1 the
/// result is bitwise identical to a single spmm.
pub fn hop_mix(
    laplacian: &NormalizedLaplacian,
    z_prev: &ArrayView2<f64>,
    beta: &[f64],
) -> Result<Array2<f64>> {
    debug_assert!(
        (beta.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
        "hop weights must sum to 1"
    );
    let mut t = laplacian.apply(z_prev)?;
    let mut s = &t * beta[0];
    for &b in &beta[1..] {
        t = laplacian.apply(&t.view())?;
        s.scaled_add(b, &t);
    }
    Ok(s)
}

fn hop_mix_cached(
    laplacian: &NormalizedLaplacian,
    z_prev: &ArrayView2<f64>,
    beta: &[f64],
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    let mut hops = Vec::with_capacity(beta.len());
    hops.push(laplacian.apply(z_prev)?);
    for _ in 1..beta.len() {
        let next = laplacian.apply(&hops.last().unwrap().view())?;
        hops.push(next);
    }
    let mut s = &hops[0] * beta[0];
    for (b, t) in beta[1..].iter().zip(&hops[1..]) {
        s.scaled_add(*b, t);
    }
    Ok((hops, s))
}

/// One propagation layer (l >= 2): hop-mixed signal, linear and bilinear
/// branches, LeakyReLU, dropout (train mode only), RowNorm2.
pub fn propagate_layer(
    layer: usize,
    laplacian: &NormalizedLaplacian,
    z_prev: &ArrayView2<f64>,
    state: &ModelState,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(Array2<f64>, PropLayerCache)> {
    let cfg = &state.config;
    let params = &state.layers[layer - 1];
    let d_in = cfg.layer_input_dim(layer);
    if z_prev.ncols() != d_in {
        return Err(Error::Structure(format!(
            "layer {layer} expects input width {d_in}, got {}",
            z_prev.ncols()
        )));
    }
    let beta = softmax(&params.hop_logits.view());
    let (hops, s) = hop_mix_cached(laplacian, z_prev, &beta)?;
    let g = s.dot(&params.w_gc) + &params.b_gc;
    let b = (z_prev.to_owned() * &s).dot(&params.w_bi) + &params.b_bi;
    let pre = g + b;
    let mut h = pre.mapv(|x| leaky_relu(x, cfg.leaky_slope));
    let rho = cfg.dropout[layer - 1];
    let mask = match dropout_rng {
        Some(rng) if rho > 0.0 => {
            let m = dropout_factors(h.nrows(), h.ncols(), rho, rng);
            h *= &m;
            Some(m)
        }
        _ => None,
    };
    let (z, norms) = row_norm2(&h);
    Ok((
        z,
        PropLayerCache {
            hops,
            s,
            pre,
            mask,
            norms,
            beta,
        },
    ))
}

fn forward_impl(
    state: &ModelState,
    graph: &PropagationGraph,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
    want_cache: bool,
) -> Result<LayerOutputs> {
    if graph.num_nodes() != state.num_nodes() {
        return Err(Error::Structure(format!(
            "graph has {} nodes, model has {}",
            graph.num_nodes(),
            state.num_nodes()
        )));
    }
    let cfg = &state.config;
    let mut zs = Vec::with_capacity(cfg.num_layers + 1);
    zs.push(state.assemble_z0());
    let mut cache = ForwardCache::default();

    if cfg.num_layers >= 1 {
        let (q, pre, mut h) = first_order_core(
            &zs[0],
            graph.first_order(),
            &state.layers[0].w_gc,
            cfg.leaky_slope,
        )?;
        let rho = cfg.dropout[0];
        let mask = match dropout_rng.as_deref_mut() {
            Some(rng) if rho > 0.0 => {
                let m = dropout_factors(h.nrows(), h.ncols(), rho, rng);
                h *= &m;
                Some(m)
            }
            _ => None,
        };
        let (z1, norms) = row_norm2(&h);
        zs.push(z1);
        if want_cache {
            cache.first_order = Some(FirstOrderCache { q, pre, mask, norms });
        }
    }

    for layer in 2..=cfg.num_layers {
        let (z, layer_cache) = propagate_layer(
            layer,
            graph.laplacian(),
            &zs[layer - 1].view(),
            state,
            dropout_rng.as_deref_mut(),
        )?;
        zs.push(z);
        if want_cache {
            cache.prop_layers.push(layer_cache);
        }
    }

    Ok(LayerOutputs {
        num_patients: state.num_patients(),
        zs,
        cache: want_cache.then_some(cache),
    })
}

/// Run the full forward pass. Train mode draws a fresh dropout stream
/// (advancing the state's counter) and caches every intermediate; eval mode
/// is a pure function of (state, graph).
pub fn forward(
    state: &mut ModelState,
    graph: &PropagationGraph,
    mode: Mode,
) -> Result<LayerOutputs> {
    match mode {
        Mode::Eval => forward_impl(state, graph, None, false),
        Mode::Train => {
            let mut rng = state.next_dropout_rng();
            forward_impl(state, graph, Some(&mut rng), true)
        }
    }
}

/// Eval-mode forward without requiring mutable state.
pub fn forward_eval(state: &ModelState, graph: &PropagationGraph) -> Result<LayerOutputs> {
    forward_impl(state, graph, None, false)
}

/// Layer-concatenated embeddings Z = Z^(0) || Z^(1) || ... || Z^(L) with
/// inner-product scoring.
#[derive(Debug, Clone)]
pub struct FinalEmbeddings {
    z: Array2<f64>,
    num_patients: usize,
}

/// Concatenate the layer outputs in layer order.
pub fn final_embeddings(outputs: &LayerOutputs) -> FinalEmbeddings {
    let views: Vec<ArrayView2<f64>> = outputs.zs.iter().map(|z| z.view()).collect();
    let z = concatenate(Axis(1), &views).expect("layer outputs share row count");
    FinalEmbeddings {
        z,
        num_patients: outputs.num_patients,
    }
}

impl FinalEmbeddings {
    pub fn width(&self) -> usize {
        self.z.ncols()
    }

    pub fn num_patients(&self) -> usize {
        self.num_patients
    }

    pub fn num_diseases(&self) -> usize {
        self.z.nrows() - self.num_patients
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn patient_row(&self, p: usize) -> ArrayView1<'_, f64> {
        self.z.row(p)
    }

    pub fn disease_row(&self, d: usize) -> ArrayView1<'_, f64> {
        self.z.row(self.num_patients + d)
    }

    /// Predicted score x̂_pd = z_pᵀ z_d.
    pub fn score(&self, p: usize, d: usize) -> f64 {
        self.patient_row(p).dot(&self.disease_row(d))
    }

    /// Dense score vector over all diseases for one patient; excluded
    /// positions carry -inf so they can never enter a top-K list.
    pub fn score_all(&self, p: usize, exclude: &HashSet<usize>) -> Vec<f64> {
        let zp = self.patient_row(p);
        (0..self.num_diseases())
            .map(|d| {
                if exclude.contains(&d) {
                    f64::NEG_INFINITY
                } else {
                    zp.dot(&self.disease_row(d))
                }
            })
            .collect()
    }
}
