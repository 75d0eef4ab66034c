//! MAP inference against the normal-equations oracle, plus amortizer
//! learning behavior.

mod common;

use common::{chain_quadratic_form, positive_chain};
use lpc_core::data::{ChainTruth, SyntheticTruth};
use lpc_core::inference::{map_inference, Amortizer, InferenceConfig};
use lpc_core::model::{forward_topdown, grad_log_joint_latents, ActivationKind, LatentState};
use lpc_core::numerics::Rng;

fn chain_inference_cfg(steps: usize) -> InferenceConfig {
    InferenceConfig {
        steps,
        step_size: 0.2,
        shrink_factor: 0.9,
        min_step: 1e-5,
        variance_coupled_rescale: false,
    }
}

fn ancestral_mean_init(model: &lpc_core::model::GenerativeModel) -> LatentState {
    let top_dim = model.latent_dims()[0];
    let td = forward_topdown(model, 0, &vec![0.0; top_dim]).unwrap();
    LatentState { z: td.latents }
}

#[test]
fn map_inference_recovers_normal_equations_posterior() {
    for (dims, obs, seed) in [(vec![2usize, 3], 4usize, 300u64), (vec![6, 10, 16], 12, 301)] {
        let (truth, model) = positive_chain(&dims, obs, seed);
        let mut rng = Rng::new(seed + 1);
        let x = truth.sample(&mut rng);
        let qf = chain_quadratic_form(&truth, &x);
        let mu = qf.posterior_mean();

        let init = ancestral_mean_init(&model);
        let out = map_inference(&model, &x, &init, &chain_inference_cfg(150)).unwrap();
        let flat = out.state.to_concat();
        let max_err = flat
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-4, "dims {dims:?}: max error {max_err}");

        // At the recovered optimum the analytic gradient vanishes.
        let g = grad_log_joint_latents(&model, &out.state, &x);
        let gmax = g.iter().flatten().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(gmax < 1e-3, "gradient at MAP: {gmax}");
    }
}

#[test]
fn inference_from_exact_map_stays_put() {
    let (truth, model) = positive_chain(&[2, 3], 4, 302);
    let mut rng = Rng::new(303);
    let x = truth.sample(&mut rng);
    let qf = chain_quadratic_form(&truth, &x);
    let mu = qf.posterior_mean();
    let init = LatentState::from_concat(&model, &mu);
    let out = map_inference(&model, &x, &init, &chain_inference_cfg(150)).unwrap();
    let drift = out
        .state
        .to_concat()
        .iter()
        .zip(&mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(drift < 1e-8, "stationary point drifted by {drift}");
}

#[test]
fn gradient_vanishes_at_converged_critical_point() {
    let (truth, model) = positive_chain(&[3, 5], 6, 304);
    let mut rng = Rng::new(305);
    let x = truth.sample(&mut rng);
    let init = ancestral_mean_init(&model);
    let out = map_inference(&model, &x, &init, &chain_inference_cfg(2000)).unwrap();
    let g = grad_log_joint_latents(&model, &out.state, &x);
    let gmax = g.iter().flatten().map(|v| v.abs()).fold(0.0f64, f64::max);
    assert!(gmax < 1e-8, "gradient at converged point: {gmax}");
}

#[test]
fn amortizer_initialization_gap_shrinks_with_training() {
    // Train the amortizer alone against MAP targets on a fixed batch; the
    // mean squared init-to-MAP distance over 10-epoch windows must trend
    // down.
    let (truth, model) = positive_chain(&[2, 3], 4, 306);
    let mut rng = Rng::new(307);
    let xs: Vec<Vec<f64>> = (0..16).map(|_| truth.sample(&mut rng)).collect();
    let mut am = Amortizer::for_model(&model, &mut rng);
    let cfg = chain_inference_cfg(200);

    // Fixed MAP targets per sample.
    let maps: Vec<LatentState> = xs
        .iter()
        .map(|x| map_inference(&model, x, &ancestral_mean_init(&model), &cfg).unwrap().state)
        .collect();

    let window_mse = |am: &Amortizer| -> f64 {
        xs.iter().zip(&maps).map(|(x, m)| am.init_mse(x, m)).sum::<f64>() / xs.len() as f64
    };
    // Observations here are O(10), so the per-layer MSE curvature is about
    // ‖input‖² ≈ 400; keep lr·λ/(1−momentum) below 1.
    let mut window_means = Vec::new();
    let mut acc = 0.0;
    for epoch in 0..60 {
        for (x, m) in xs.iter().zip(&maps) {
            am.update(x, m, 2e-4, 0.9);
        }
        acc += window_mse(&am);
        if epoch % 20 == 19 {
            window_means.push(acc / 20.0);
            acc = 0.0;
        }
    }
    assert!(
        window_means[0] > window_means[1] && window_means[1] > window_means[2],
        "init gap must trend down: {window_means:?}"
    );
}

#[test]
fn synthetic_truth_round_trips_through_model_conversion() {
    let (truth, model) = positive_chain(&[2, 2], 3, 308);
    // The converted model exposes the same weights and variances.
    for e in 0..truth.weights.len() {
        assert_eq!(model.weight(e), &truth.weights[e]);
        for (lv, v) in model.log_variance(e).iter().zip(std::iter::repeat(truth.noise_vars[e])) {
            assert!((lv.exp() - v).abs() < 1e-15);
        }
    }
    let wrapped = SyntheticTruth::Chain(ChainTruth::new(
        truth.weights.clone(),
        truth.biases.clone(),
        truth.noise_vars.clone(),
    )
    .unwrap());
    let mut rng = Rng::new(309);
    let x = truth.sample(&mut rng);
    assert!((wrapped.log_marginal(&x) - truth.log_marginal(&x)).abs() < 1e-12);
}

#[test]
fn inference_survives_non_finite_excursions() {
    // A pathologically large step size drives iterates to overflow; the
    // guard must revert, shrink, and still return a finite best iterate.
    let (truth, model) = positive_chain(&[2, 3], 4, 310);
    let mut rng = Rng::new(311);
    let x = truth.sample(&mut rng);
    let cfg = InferenceConfig {
        steps: 60,
        step_size: 1e12,
        shrink_factor: 0.5,
        min_step: 1e-6,
        variance_coupled_rescale: false,
    };
    let out = map_inference(&model, &x, &ancestral_mean_init(&model), &cfg).unwrap();
    assert!(out.log_joint.is_finite());
    assert!(out.log_joint >= out.trace[0].log_joint - 1e-9, "best iterate never loses to the init");
}

#[test]
fn amortizer_for_tanh_uses_model_activation() {
    let mut rng = Rng::new(312);
    let model = lpc_core::model::GenerativeModel::new(
        vec![
            lpc_core::model::LayerSpec::new(2, 3, ActivationKind::Tanh, false).unwrap(),
            lpc_core::model::LayerSpec::new(3, 4, ActivationKind::Tanh, false).unwrap(),
        ],
        lpc_core::model::VarianceMode::fixed(1.0),
        &mut rng,
    )
    .unwrap();
    let am = Amortizer::for_model(&model, &mut rng);
    assert_eq!(am.layers().len(), 2);
    // Layer 0 maps observation (4) to the bottom latent (3).
    assert_eq!(am.layers()[0].weights.cols(), 4);
    assert_eq!(am.layers()[0].weights.rows(), 3);
    assert_eq!(am.layers()[1].weights.cols(), 3);
    assert_eq!(am.layers()[1].weights.rows(), 2);
    assert!(matches!(am.layers()[0].activation, ActivationKind::Tanh));
}
