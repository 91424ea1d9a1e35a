//! Central finite-difference verification of the analytic gradients.
//!
//! Every trainable scalar is perturbed by ±h and the loss recomputed
//! through the full forward pass; dropout is disabled so train- and
//! eval-mode forwards coincide and the loss is smooth at the sampled
//! point.

use cldd_core::graph::{Interaction, InteractionMatrix};
use cldd_core::model::{
    final_embeddings, forward, forward_eval, init_state, Mode, ModelConfig, ModelState,
    PropagationGraph,
};
use cldd_core::train::{backward, bpr_loss, RegScope, TrainConfig, Triple};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

struct Fixture {
    y: InteractionMatrix,
    graph: PropagationGraph,
    state: ModelState,
    batch: Vec<Triple>,
    cfg: TrainConfig,
}

/// P=5, D=6, k=8, f=3, L=2, K=2, dropout off, every node connected.
fn fixture(reg_scope: RegScope, l2_weight: f64) -> Fixture {
    let mut rng = ChaCha20Rng::seed_from_u64(0x6AD);
    let (patients, diseases) = (5usize, 6usize);
    let mut entries = Vec::new();
    for p in 0..patients {
        entries.push(Interaction { patient: p, disease: p % diseases, timestamp: 0 });
    }
    for d in 0..diseases {
        let p = d % patients;
        if !entries.iter().any(|e: &Interaction| e.patient == p && e.disease == d) {
            entries.push(Interaction { patient: p, disease: d, timestamp: 0 });
        }
    }
    for p in 0..patients {
        for d in 0..diseases {
            if rng.random::<f64>() < 0.3
                && !entries.iter().any(|e| e.patient == p && e.disease == d)
            {
                entries.push(Interaction { patient: p, disease: d, timestamp: 0 });
            }
        }
    }
    let y = InteractionMatrix::new(patients, diseases, entries).unwrap();
    let graph = PropagationGraph::from_interactions(&y);

    let cfg_model = ModelConfig {
        embed_dim: 8,
        fixed_dim: 3,
        num_layers: 2,
        max_hops: 2,
        layer_dims: vec![8, 8],
        dropout: vec![0.0, 0.0],
        leaky_slope: 0.2,
        seed: 99,
    };
    let features = Array2::from_shape_fn((patients, 3), |(i, j)| ((i + j) % 3 == 0) as u8 as f64);
    let state = init_state(&cfg_model, diseases, &features.view()).unwrap();

    let mut batch = Vec::new();
    for p in 0..patients {
        let pos = y.patient_row(p)[0].disease;
        let neg = (0..diseases).find(|&d| !y.has_edge(p, d)).unwrap();
        batch.push(Triple { patient: p, pos, neg });
    }

    let cfg = TrainConfig {
        l2_weight,
        reg_scope,
        ..TrainConfig::default()
    };
    Fixture { y, graph, state, batch, cfg }
}

fn loss_of(state: &ModelState, fx: &Fixture) -> f64 {
    let outputs = forward_eval(state, &fx.graph).unwrap();
    bpr_loss(&fx.batch, &final_embeddings(&outputs), state, &fx.cfg)
}

fn run_check(fx: &mut Fixture) -> (usize, f64) {
    let outputs = forward(&mut fx.state, &fx.graph, Mode::Train).unwrap();
    let analytic = backward(&fx.batch, &outputs, &fx.state, &fx.graph, &fx.cfg)
        .unwrap()
        .flatten();
    let n = fx.state.trainable_len();
    assert_eq!(analytic.len(), n);

    let mut worst = 0.0f64;
    for i in 0..n {
        fx.state.trainable_add(i, FD_STEP);
        let up = loss_of(&fx.state, fx);
        fx.state.trainable_add(i, -2.0 * FD_STEP);
        let down = loss_of(&fx.state, fx);
        fx.state.trainable_add(i, FD_STEP);
        let fd = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        assert!(
            rel < REL_TOL,
            "parameter {i}: analytic {} vs fd {fd} (rel {rel})",
            analytic[i]
        );
        worst = worst.max(rel);
    }
    (n, worst)
}

#[test]
fn gradients_match_finite_differences() {
    let mut fx = fixture(RegScope::All, 1e-3);
    let (n, worst) = run_check(&mut fx);
    println!("checked {n} parameters, worst relative error {worst:.3e}");
}

#[test]
fn gradients_match_finite_differences_embedding_regularizer() {
    let mut fx = fixture(RegScope::EmbeddingsOnly, 1e-2);
    let (n, worst) = run_check(&mut fx);
    println!("checked {n} parameters, worst relative error {worst:.3e}");
}

#[test]
fn gradients_match_without_regularizer_and_plain_mf() {
    // L = 0 exercises the embedding-table path alone.
    let mut fx = fixture(RegScope::All, 0.0);
    let cfg_model = ModelConfig::plain_factorization(4, 3);
    fx.state = init_state(&cfg_model, fx.y.num_diseases(), &Array2::zeros((5, 0)).view()).unwrap();
    let (n, worst) = run_check(&mut fx);
    println!("checked {n} parameters, worst relative error {worst:.3e}");
}

#[test]
fn frozen_block_is_bit_identical_through_training() {
    use cldd_core::train::{adam_step, AdamState};
    let mut fx = fixture(RegScope::All, 1e-4);
    let before: Vec<u64> = fx.state.patient_fixed.iter().map(|v| v.to_bits()).collect();
    let mut adam = AdamState::new(&fx.state);
    for _ in 0..100 {
        let outputs = forward(&mut fx.state, &fx.graph, Mode::Train).unwrap();
        let grads = backward(&fx.batch, &outputs, &fx.state, &fx.graph, &fx.cfg).unwrap();
        adam_step(&mut fx.state, &grads, &mut adam, &fx.cfg).unwrap();
    }
    let after: Vec<u64> = fx.state.patient_fixed.iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_eq!(adam.step, 100);
}
