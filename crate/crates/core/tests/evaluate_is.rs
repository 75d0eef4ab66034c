//! Laplace importance sampling against the exact joint-Gaussian marginal,
//! the analytic Laplace ELBO, and related invariants.

mod common;

use common::{chain_quadratic_form, positive_chain};
use lpc_core::evaluate::{
    analytic_laplace_elbo, bits_per_dim, laplace_importance_ll, track_curvature, CurvatureKind,
};
use lpc_core::hessian::full_hessian;
use lpc_core::inference::InferenceConfig;
use lpc_core::model::{GenerativeModel, LatentState, LayerSpec};
use lpc_core::numerics::{Matrix, Rng};

fn eval_cfg(steps: usize, step_size: f64) -> InferenceConfig {
    InferenceConfig {
        steps,
        step_size,
        shrink_factor: 0.9,
        min_step: 1e-5,
        variance_coupled_rescale: false,
    }
}

#[test]
fn importance_estimate_matches_exact_marginal() {
    let (truth, model) = positive_chain(&[2, 3], 4, 500);
    let mut rng = Rng::new(501);
    for trial in 0..5 {
        let x = truth.sample(&mut rng);
        let exact = truth.log_marginal(&x);
        let mut is_rng = Rng::new(502).stream(trial);
        let est = laplace_importance_ll(&model, &x, 256, &eval_cfg(400, 0.2), &mut is_rng).unwrap();
        assert!(!est.fallback, "quadratic energies are PSD");
        let tol = (3.0 * est.stderr).max(1e-6);
        assert!(
            (est.log_marginal - exact).abs() <= tol,
            "trial {trial}: estimate {} vs exact {exact} (stderr {})",
            est.log_marginal,
            est.stderr
        );
    }
}

#[test]
fn analytic_elbo_equals_exact_marginal_on_quadratic_instances() {
    let (truth, model) = positive_chain(&[3, 4], 5, 503);
    let mut rng = Rng::new(504);
    let x = truth.sample(&mut rng);
    let qf = chain_quadratic_form(&truth, &x);
    let state = LatentState::from_concat(&model, &qf.posterior_mean());
    let he = full_hessian(&model, &state, &x).unwrap();
    let elbo = analytic_laplace_elbo(&model, &state, &x, he.factor()).unwrap();
    let exact = truth.log_marginal(&x);
    assert!(elbo <= exact + 1e-8, "ELBO must lower-bound the marginal: {elbo} vs {exact}");
    assert!((elbo - exact).abs() < 1e-6, "Laplace is exact here: {elbo} vs {exact}");
}

#[test]
fn importance_error_shrinks_with_sample_count() {
    // Degrade inference so the proposal mean sits measurably off the mode;
    // the logsumexp estimator must then converge to the exact marginal as S
    // grows, in expectation over seeds.
    let (truth, model) = positive_chain(&[2, 3], 4, 505);
    let cfg = eval_cfg(25, 0.05);
    let mut data_rng = Rng::new(506);
    let xs: Vec<Vec<f64>> = (0..20).map(|_| truth.sample(&mut data_rng)).collect();
    let mut mean_abs_err = Vec::new();
    for (si, s) in [16usize, 256, 4096].into_iter().enumerate() {
        let mut acc = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let mut rng = Rng::new(507).stream2(si as u64, i as u64);
            let est = laplace_importance_ll(&model, x, s, &cfg, &mut rng).unwrap();
            acc += (est.log_marginal - truth.log_marginal(x)).abs();
        }
        mean_abs_err.push(acc / xs.len() as f64);
    }
    assert!(
        mean_abs_err[0] > mean_abs_err[1] && mean_abs_err[1] > mean_abs_err[2],
        "mean |error| must shrink with S: {mean_abs_err:?}"
    );
}

#[test]
fn importance_estimate_is_permutation_invariant_within_mc_error() {
    let (truth, model) = positive_chain(&[2, 3], 4, 508);
    let mut rng = Rng::new(509);
    let x = truth.sample(&mut rng);

    // Permute the middle layer's coordinates along with the adjacent
    // weights; the marginal is unchanged, so paired estimates agree within
    // Monte Carlo error.
    let perm = [2usize, 0, 1];
    let w0 = Matrix::from_fn(3, 2, |i, j| model.weight(0).get(perm[i], j));
    let b0: Vec<f64> = perm.iter().map(|&i| model.bias(0)[i]).collect();
    let lv0: Vec<f64> = perm.iter().map(|&i| model.log_variance(0)[i]).collect();
    let w1 = Matrix::from_fn(4, 3, |i, j| model.weight(1).get(i, perm[j]));
    let permuted = GenerativeModel::from_parts(
        model.layers().to_vec(),
        vec![w0, w1],
        vec![b0, model.bias(1).to_vec()],
        vec![lv0, model.log_variance(1).to_vec()],
        model.variance_mode(),
    )
    .unwrap();

    let cfg = eval_cfg(400, 0.2);
    let mut ra = Rng::new(510);
    let mut rb = Rng::new(510);
    let a = laplace_importance_ll(&model, &x, 512, &cfg, &mut ra).unwrap();
    let b = laplace_importance_ll(&permuted, &x, 512, &cfg, &mut rb).unwrap();
    let tol = 3.0 * (a.stderr + b.stderr) + 1e-9;
    assert!(
        (a.log_marginal - b.log_marginal).abs() <= tol,
        "{} vs {} (tol {tol})",
        a.log_marginal,
        b.log_marginal
    );
}

#[test]
fn bpd_from_importance_sampling_matches_exact_bpd() {
    let (truth, model) = positive_chain(&[2, 3], 4, 511);
    let mut rng = Rng::new(512);
    let x = truth.sample(&mut rng);
    let mut is_rng = Rng::new(513);
    let est = laplace_importance_ll(&model, &x, 256, &eval_cfg(400, 0.2), &mut is_rng).unwrap();
    let d = model.obs_dim();
    let got = bits_per_dim(est.log_marginal, d);
    let want = bits_per_dim(truth.log_marginal(&x), d);
    assert!((got - want).abs() < 0.02, "bpd {got} vs exact {want}");
}

#[test]
fn curvature_of_zero_weight_unit_variance_model_is_zero() {
    use lpc_core::model::{ActivationKind, VarianceMode};
    let model = GenerativeModel::from_parts(
        vec![LayerSpec::new(2, 3, ActivationKind::leaky_relu(), false).unwrap()],
        vec![Matrix::zeros(3, 2)],
        vec![vec![0.0; 3]],
        vec![vec![0.0; 3]],
        VarianceMode::fixed(1.0),
    )
    .unwrap();
    let heldout: Vec<Vec<f64>> = vec![vec![0.1, -0.2, 0.3], vec![0.0, 0.5, -0.5]];
    let report =
        track_curvature(&model, &heldout, &eval_cfg(50, 0.1), CurvatureKind::Full).unwrap();
    assert!(report.mean_log_det.abs() < 1e-8, "identity Hessian has zero log det");
    assert_eq!(report.fallback_rate, 0.0);
    let blocks =
        track_curvature(&model, &heldout, &eval_cfg(50, 0.1), CurvatureKind::Blocks).unwrap();
    assert!(blocks.mean_log_det.abs() < 1e-8);
}
