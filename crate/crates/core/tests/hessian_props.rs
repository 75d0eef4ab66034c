//! Structural properties of the block-diagonal Hessian approximation and
//! the dense full Hessian.

mod common;

use common::{chain_quadratic_form, positive_chain, push_away_from_kinks, random_instance};
use lpc_core::hessian::{block_hessian, full_hessian};
use lpc_core::model::{
    ActivationKind, GenerativeModel, LatentState, LayerSpec, VarianceMode,
};
use lpc_core::numerics::{min_eigenvalue, Matrix, Rng};

#[test]
fn blocks_are_psd_over_random_instances() {
    // Both activations, with and without skips, learned and fixed
    // variances: every block stays PSD (min eigenvalue ≥ −1e-9). The
    // acceptance suite runs the full 1000-pair sweep; this is a smaller
    // always-on version.
    let mut rng = Rng::new(200);
    for trial in 0..300 {
        let inst = random_instance(&mut rng, 8, None);
        let blocks = block_hessian(&inst.model, &inst.state).expect("blocks always factor");
        for (b, layer) in blocks.blocks().iter().zip(blocks.layers()) {
            let min = min_eigenvalue(b);
            assert!(min >= -1e-9, "trial {trial}, layer {layer}: min eigenvalue {min}");
        }
    }
}

#[test]
fn leaky_blocks_equal_full_hessian_diagonal_away_from_kinks() {
    let mut rng = Rng::new(201);
    for trial in 0..30 {
        let inst = random_instance(&mut rng, 6, Some(ActivationKind::leaky_relu()));
        let mut state = inst.state.clone();
        push_away_from_kinks(&mut state, 1e-3);
        let blocks = block_hessian(&inst.model, &state).unwrap();
        let full = full_hessian(&inst.model, &state, &inst.x).unwrap();
        assert!(!full.fallback(), "piecewise-quadratic energies have PSD Hessians");
        let mut off = 0usize;
        for (j, b) in blocks.blocks().iter().enumerate() {
            for r in 0..b.n() {
                for c in 0..b.n() {
                    let diff = (b.get(r, c) - full.matrix().get(off + r, off + c)).abs();
                    assert!(diff <= 1e-4, "trial {trial}, block {j} entry ({r},{c}): diff {diff}");
                }
            }
            off += b.n();
        }
    }
}

#[test]
fn tanh_block_error_is_exactly_the_second_order_term() {
    // 1-d instance: the block approximation differs from the true Hessian
    // entry by r·f''(z)/σ² with f(z) = w·tanh(z) + b.
    let mut rng = Rng::new(202);
    for _ in 0..20 {
        let w = rng.uniform_in(-2.0, 2.0);
        let b = rng.uniform_in(-1.0, 1.0);
        let var = rng.uniform_in(0.2, 1.5);
        let model = GenerativeModel::from_parts(
            vec![LayerSpec::new(1, 1, ActivationKind::Tanh, false).unwrap()],
            vec![Matrix::from_rows(&[vec![w]]).unwrap()],
            vec![vec![b]],
            vec![vec![var.ln()]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        let z = rng.uniform_in(-2.0, 2.0);
        let x = rng.uniform_in(-3.0, 3.0);
        let state = LatentState { z: vec![vec![z]] };

        let blocks = block_hessian(&model, &state).unwrap();
        let full = full_hessian(&model, &state, &[x]).unwrap();
        let got_diff = blocks.blocks()[0].get(0, 0) - full.matrix().get(0, 0);

        // Second-order term by hand: r · f''(z) / σ² with
        // f''(z) = −2 w tanh(z)(1 − tanh²(z)).
        let t = z.tanh();
        let f = w * t + b;
        let r = x - f;
        let fpp = -2.0 * w * t * (1.0 - t * t);
        let want = r * fpp / var;
        assert!(
            (got_diff - want).abs() < 1e-5 * want.abs().max(1.0),
            "block−full {got_diff} vs analytic second-order term {want}"
        );
    }
}

#[test]
fn full_hessian_matches_hand_assembled_quadratic_chain() {
    // Linear chain in the positive regime: the full Hessian is block
    // tridiagonal with off-diagonal blocks −Wᵀ/σ², assembled here from the
    // quadratic form of the density.
    let (truth, model) = positive_chain(&[2, 3, 4], 5, 203);
    let mut rng = Rng::new(204);
    let x = truth.sample(&mut rng);
    let qf = chain_quadratic_form(&truth, &x);
    let mu = qf.posterior_mean();
    let state = LatentState::from_concat(&model, &mu);
    assert!(state.z.iter().skip(1).all(|z| z.iter().all(|v| *v > 1.0)), "positive regime");

    let full = full_hessian(&model, &state, &x).unwrap();
    assert!(!full.fallback());
    let n = qf.h.n();
    for i in 0..n {
        for j in 0..n {
            let diff = (full.matrix().get(i, j) - qf.h.get(i, j)).abs();
            assert!(diff < 1e-6, "entry ({i},{j}): {} vs {}", full.matrix().get(i, j), qf.h.get(i, j));
        }
    }

    // Spot-check the off-diagonal block between latents 1 and 2, which sits
    // on edge 1 (the top edge's weights are zero by construction):
    // H[parent, child] = −Wᵀ/σ².
    let w = &truth.weights[1];
    let prec = 1.0 / truth.noise_vars[1];
    let (p_off, c_off) = (2usize, 5usize);
    for r in 0..3 {
        for c in 0..4 {
            let want = -w.get(c, r) * prec;
            let got = full.matrix().get(p_off + r, c_off + c);
            assert!((got - want).abs() < 1e-6, "off-diag ({r},{c}): {got} vs {want}");
        }
    }
}

#[test]
fn block_hessian_is_independent_of_the_observation() {
    // The Gauss-Newton blocks depend on the state and parameters only.
    let mut rng = Rng::new(205);
    let inst = random_instance(&mut rng, 5, None);
    let b1 = block_hessian(&inst.model, &inst.state).unwrap();
    let b2 = block_hessian(&inst.model, &inst.state).unwrap();
    for (x, y) in b1.blocks().iter().zip(b2.blocks()) {
        assert_eq!(x.max_abs_diff(y), 0.0);
    }
}
