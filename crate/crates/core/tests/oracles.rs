mod common;

use common::*;
use copfl::data::{gen_synthetic, partition, PartitionSpec};
use copfl::mamo::{MamoConfig, MamoState, Phase};
use copfl::model::{self, init_params, LabeledBatch, ModelSpec};
use copfl::{Mask, ParameterVector};
use rand::Rng;

#[test]
fn softmax_gradient_matches_finite_differences() {
    for seed in 0..8 {
        let err = fd_draw(false, seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    for seed in 0..8 {
        let err = fd_draw(true, 100 + seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn gradient_at_initialization_matches_finite_differences() {
    let spec = ModelSpec::mlp2(6, 8, 4);
    let w = init_params(&spec, 3);
    let batch = random_batch(&mut rng(3), 6, 4, 16);
    assert!(max_fd_error(&spec, &w, &batch) < 1e-4);
}

fn adam_config() -> MamoConfig {
    MamoConfig {
        lr: 0.01,
        ..MamoConfig::default()
    }
}

#[test]
fn shared_phase_with_empty_mask_is_textbook_adam() {
    let dim = 7;
    let cfg = adam_config();
    let mut r = rng(11);
    let mut state = MamoState::new(dim, cfg);
    let mut oracle = TextbookAdam::new(dim, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut w = ParameterVector::from_vec(random_vec(&mut r, dim, 1.0));
    let mut w_ref = w.as_slice().to_vec();
    let mask = Mask::zeros(dim);
    for _ in 0..100 {
        let g = random_vec(&mut r, dim, 3.0);
        state
            .apply_step(&mut w, &ParameterVector::from_vec(g.clone()), &mask, Phase::Shared)
            .unwrap();
        oracle.step(&mut w_ref, &g);
        assert!(max_abs_diff(w.as_slice(), &w_ref) < 1e-12);
    }
}

#[test]
fn personalized_phase_with_full_mask_is_textbook_adam() {
    let dim = 5;
    let cfg = adam_config();
    let mut r = rng(12);
    let mut state = MamoState::new(dim, cfg);
    let mut oracle = TextbookAdam::new(dim, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut w = ParameterVector::zeros(dim);
    let mut w_ref = vec![0.0; dim];
    for _ in 0..100 {
        let g = random_vec(&mut r, dim, 0.5);
        state
            .apply_step(&mut w, &ParameterVector::from_vec(g.clone()), &Mask::ones(dim), Phase::Personalized)
            .unwrap();
        oracle.step(&mut w_ref, &g);
    }
    assert!(max_abs_diff(w.as_slice(), &w_ref) < 1e-12);
    assert_eq!(state.moments(Phase::Shared).step, 0);
}

#[test]
fn interleaved_phases_follow_two_independent_adams() {
    // Each phase must behave like its own Adam restricted to its coordinates.
    let dim = 6;
    let cfg = adam_config();
    let mask = Mask::from_u8(&[1, 0, 1, 0, 0, 1]).unwrap();
    let pers: Vec<usize> = (0..dim).filter(|&i| mask.get(i)).collect();
    let shared: Vec<usize> = (0..dim).filter(|&i| !mask.get(i)).collect();
    let mut r = rng(13);
    let mut state = MamoState::new(dim, cfg);
    let mut a = TextbookAdam::new(pers.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut b = TextbookAdam::new(shared.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut w = ParameterVector::zeros(dim);
    let mut wa = vec![0.0; pers.len()];
    let mut wb = vec![0.0; shared.len()];
    for step in 0..60 {
        let g = random_vec(&mut r, dim, 1.0);
        let gv = ParameterVector::from_vec(g.clone());
        if step % 3 == 0 {
            state.apply_step(&mut w, &gv, &mask, Phase::Shared).unwrap();
            b.step(&mut wb, &shared.iter().map(|&i| g[i]).collect::<Vec<_>>());
        } else {
            state.apply_step(&mut w, &gv, &mask, Phase::Personalized).unwrap();
            a.step(&mut wa, &pers.iter().map(|&i| g[i]).collect::<Vec<_>>());
        }
    }
    let got_a: Vec<f64> = pers.iter().map(|&i| w[i]).collect();
    let got_b: Vec<f64> = shared.iter().map(|&i| w[i]).collect();
    assert!(max_abs_diff(&got_a, &wa) < 1e-12);
    assert!(max_abs_diff(&got_b, &wb) < 1e-12);
}

#[test]
fn masked_phase_leaves_other_side_bit_identical() {
    let dim = 9;
    let mut r = rng(14);
    let mut state = MamoState::new(dim, adam_config());
    let mut w = ParameterVector::from_vec(random_vec(&mut r, dim, 1.0));
    let bits: Vec<bool> = (0..dim).map(|_| r.random_bool(0.5)).collect();
    let mask = Mask::from_bits(bits);
    for step in 0..50 {
        let phase = if step % 2 == 0 { Phase::Personalized } else { Phase::Shared };
        let other = if phase == Phase::Personalized { Phase::Shared } else { Phase::Personalized };
        let before_w = w.clone();
        let before_other = state.moments(other).clone();
        let g = ParameterVector::from_vec(random_vec(&mut r, dim, 1.0));
        state.apply_step(&mut w, &g, &mask, phase).unwrap();
        assert_eq!(state.moments(other), &before_other);
        for i in 0..dim {
            let selected = mask.get(i) == (phase == Phase::Personalized);
            if !selected {
                assert_eq!(w[i].to_bits(), before_w[i].to_bits());
            }
        }
        assert!(state.moments(phase).second.iter().all(|&v| v >= 0.0));
    }
}

fn train_full_batch(spec: &ModelSpec, w: &mut ParameterVector, batch: &LabeledBatch, steps: usize, lr: f64) {
    let mut opt = MamoState::new(w.len(), MamoConfig { lr, ..MamoConfig::default() });
    let mask = Mask::zeros(w.len());
    for _ in 0..steps {
        let (_, g) = model::loss_and_grad(spec, w, batch).unwrap();
        opt.apply_step(w, &g, &mask, Phase::Shared).unwrap();
    }
}

#[test]
fn separable_data_is_fit() {
    let mut batch = LabeledBatch::empty(2);
    for &(x, y, label) in &[(2.0, 0.5, 0), (3.0, -0.5, 0), (-2.0, 0.3, 1), (-3.0, -0.2, 1)] {
        batch.push(&[x, y], label);
    }
    for spec in [ModelSpec::softmax_regression(2, 2), ModelSpec::mlp2(2, 8, 2)] {
        let mut w = init_params(&spec, 0);
        train_full_batch(&spec, &mut w, &batch, 500, 0.05);
        let loss = model::predict_loss(&spec, &w, &batch).unwrap();
        assert!(loss < 0.1, "{:?}: loss {loss}", spec.kind);
        assert_eq!(model::accuracy(&spec, &w, &batch).unwrap(), 1.0);
    }
}

#[test]
fn untrained_model_is_at_chance() {
    // Monte Carlo over initializations and fresh unstructured data.
    let spec = ModelSpec::mlp2(20, 32, 10);
    let mut accs = Vec::new();
    for seed in 0..40 {
        let w = init_params(&spec, seed);
        let batch = random_batch(&mut rng(1000 + seed), 20, 10, 200);
        accs.push(model::accuracy(&spec, &w, &batch).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.10).abs() < 0.03, "mean accuracy {mean}");
}

#[test]
fn well_separated_mixture_is_learned() {
    let pool = gen_synthetic(2, 2, 300, 5, 0.1).unwrap();
    let spec = PartitionSpec {
        num_clients: 1,
        classes_per_client: 2,
        train_bound: 100,
        test_bound: 100,
        num_classes: 2,
        seed: 5,
        feature_shift: None,
    };
    let shard = partition(&pool, &spec).unwrap().remove(0);
    let model_spec = ModelSpec::softmax_regression(2, 2);
    let mut w = init_params(&model_spec, 5);
    train_full_batch(&model_spec, &mut w, &shard.train, 300, 0.05);
    let acc = model::accuracy(&model_spec, &w, &shard.test).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
}
