//! Shared oracles for the integration tests.
//!
//! Everything here is written straight from the density formulas with its
//! own loops, independent of the library's `log_joint`, gradient, and
//! Hessian paths it is used to check. The only library pieces reused are
//! parameter accessors and the validated dense Cholesky solver.

#![allow(dead_code)]

use lpc_core::data::ChainTruth;
use lpc_core::model::{ActivationKind, GenerativeModel, LatentState, VarianceMode};
use lpc_core::numerics::{cholesky, symmetrize, CholFactor, Matrix, Rng, SymMatrix};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn act_by_hand(kind: ActivationKind, v: f64) -> f64 {
    match kind {
        ActivationKind::LeakyRelu { slope } => {
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        }
        ActivationKind::Tanh => v.tanh(),
    }
}

/// Straight-line reimplementation of the Gaussian density sum.
pub fn oracle_log_joint(model: &GenerativeModel, state: &LatentState, x: &[f64]) -> f64 {
    let n_layers = model.num_latent_layers();
    let mut total = 0.0;
    for v in &state.z[0] {
        total += -0.5 * (v * v + LN_2PI);
    }
    for e in 0..n_layers {
        let spec = &model.layers()[e];
        let zin = &state.z[e];
        let child: &[f64] = if e + 1 < n_layers { &state.z[e + 1] } else { x };
        for i in 0..spec.out_dim {
            let mut pred = model.bias(e)[i];
            for j in 0..spec.in_dim {
                pred += model.weight(e).get(i, j) * act_by_hand(spec.activation, zin[j]);
            }
            if spec.skip {
                pred += zin[i];
            }
            let var = model.log_variance(e)[i].exp();
            let r = child[i] - pred;
            total += -0.5 * (r * r / var + var.ln() + LN_2PI);
        }
    }
    total
}

/// A linear-Gaussian chain whose matched leaky-ReLU model behaves exactly
/// quadratically: biases are large and positive so every latent below the
/// top sits deep on the positive branch, and the top edge's weights are
/// zero so the kink at the top layer (whose posterior straddles zero) is
/// multiplied away.
pub fn positive_chain(
    latent_dims: &[usize],
    obs_dim: usize,
    seed: u64,
) -> (ChainTruth, GenerativeModel) {
    let mut rng = Rng::new(seed);
    let mut dims = latent_dims.to_vec();
    dims.push(obs_dim);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut noise_vars = Vec::new();
    for e in 0..dims.len() - 1 {
        let (inn, out) = (dims[e], dims[e + 1]);
            // Weight scale shrinks with fan-in so summed contributions stay
        // small against the positive biases at any width.
        let scale = 0.3 / (inn as f64).sqrt();
        let w = if e == 0 {
            Matrix::zeros(out, inn)
        } else {
            Matrix::from_fn(out, inn, |_, _| rng.uniform_in(-scale, scale))
        };
        weights.push(w);
        biases.push((0..out).map(|_| rng.uniform_in(6.0, 10.0)).collect());
        noise_vars.push(rng.uniform_in(0.3, 0.8));
    }
    let truth = ChainTruth::new(weights, biases, noise_vars).unwrap();
    let model = truth
        .to_generative_model(ActivationKind::leaky_relu(), VarianceMode::fixed(1.0))
        .unwrap();
    (truth, model)
}

/// Quadratic form of the negative log joint of a linear chain,
/// `½ zᵀ H z − cᵀ z + const`, assembled by hand from the density formula.
pub struct QuadraticForm {
    pub h: SymMatrix,
    pub c: Vec<f64>,
    pub offsets: Vec<usize>,
    pub dims: Vec<usize>,
}

impl QuadraticForm {
    /// Posterior mean: solve `H μ = c`.
    pub fn posterior_mean(&self) -> Vec<f64> {
        self.factor().solve(&self.c)
    }

    pub fn factor(&self) -> CholFactor {
        cholesky(&self.h).expect("hand-assembled precision is PD")
    }

    /// Dense inverse of `H` (the posterior covariance).
    pub fn covariance(&self) -> Matrix {
        let f = self.factor();
        let n = self.h.n();
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = f.solve(&e);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        inv
    }

    /// Diagonal block for latent layer `j`.
    pub fn diag_block(&self, j: usize) -> SymMatrix {
        let (off, d) = (self.offsets[j], self.dims[j]);
        let mut m = Matrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m.set(r, c, self.h.get(off + r, off + c));
            }
        }
        symmetrize(&m).unwrap()
    }
}

/// Assemble the quadratic form for a chain with parameters `(weights,
/// biases, noise_vars)` observed at `x`. Derivation: expand each Gaussian
/// term `½ (child − A z − b)ᵀ D (child − A z − b)` and collect the
/// quadratic and linear pieces.
pub fn chain_quadratic_form(truth: &ChainTruth, x: &[f64]) -> QuadraticForm {
    let dims: Vec<usize> = truth.latent_dims();
    let n_lat = dims.len();
    let n: usize = dims.iter().sum();
    let mut offsets = vec![0usize; n_lat];
    for j in 1..n_lat {
        offsets[j] = offsets[j - 1] + dims[j - 1];
    }
    let mut h = Matrix::zeros(n, n);
    let mut c = vec![0.0; n];
    // Top prior N(0, I).
    for i in 0..dims[0] {
        h.set(i, i, h.get(i, i) + 1.0);
    }
    for e in 0..truth.weights.len() {
        let a = &truth.weights[e];
        let b = &truth.biases[e];
        let prec = 1.0 / truth.noise_vars[e];
        let p_off = offsets[e];
        if e + 1 < n_lat {
            let c_off = offsets[e + 1];
            // H_cc += D; H_pp += AᵀDA; H_cp += −DA (symmetric counterpart −AᵀD).
            for i in 0..a.rows() {
                h.set(c_off + i, c_off + i, h.get(c_off + i, c_off + i) + prec);
            }
            for r in 0..a.cols() {
                for s in 0..a.cols() {
                    let mut acc = 0.0;
                    for k in 0..a.rows() {
                        acc += a.get(k, r) * prec * a.get(k, s);
                    }
                    h.set(p_off + r, p_off + s, h.get(p_off + r, p_off + s) + acc);
                }
            }
            for k in 0..a.rows() {
                for r in 0..a.cols() {
                    let v = -prec * a.get(k, r);
                    h.set(c_off + k, p_off + r, h.get(c_off + k, p_off + r) + v);
                    h.set(p_off + r, c_off + k, h.get(p_off + r, c_off + k) + v);
                }
            }
            // c_c += D b; c_p += −AᵀD b.
            for k in 0..a.rows() {
                c[c_off + k] += prec * b[k];
                for r in 0..a.cols() {
                    c[p_off + r] -= a.get(k, r) * prec * b[k];
                }
            }
        } else {
            // Observation edge: only the parent block and linear term.
            for r in 0..a.cols() {
                for s in 0..a.cols() {
                    let mut acc = 0.0;
                    for k in 0..a.rows() {
                        acc += a.get(k, r) * prec * a.get(k, s);
                    }
                    h.set(p_off + r, p_off + s, h.get(p_off + r, p_off + s) + acc);
                }
                let mut acc = 0.0;
                for k in 0..a.rows() {
                    acc += a.get(k, r) * prec * (x[k] - b[k]);
                }
                c[p_off + r] += acc;
            }
        }
    }
    QuadraticForm { h: symmetrize(&h).unwrap(), c, offsets, dims }
}

/// `Tr[A · B]` for symmetric `A` and a dense `B`.
pub fn trace_product(a: &SymMatrix, b: &Matrix) -> f64 {
    let n = a.n();
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += a.get(i, j) * b.get(j, i);
        }
    }
    t
}

/// Split a flat latent vector into a state for `model`.
pub fn state_from_flat(model: &GenerativeModel, flat: &[f64]) -> LatentState {
    LatentState::from_concat(model, flat)
}

/// Random model + state generator for property sweeps.
pub struct RandomInstance {
    pub model: GenerativeModel,
    pub state: LatentState,
    pub x: Vec<f64>,
}

/// Random chain model with 1–3 latent layers (dims up to `max_dim`), both
/// activations, optional skips, and mixed variance modes.
pub fn random_instance(rng: &mut Rng, max_dim: usize, activation: Option<ActivationKind>) -> RandomInstance {
    use lpc_core::model::LayerSpec;
    let n_lat = 1 + rng.gen_range_usize(3);
    let mut dims: Vec<usize> = (0..=n_lat).map(|_| 1 + rng.gen_range_usize(max_dim)).collect();
    // Occasionally force equal adjacent dims so skips get exercised.
    if rng.uniform() < 0.5 && dims.len() >= 2 {
        dims[1] = dims[0];
    }
    let mut layers = Vec::new();
    for e in 0..n_lat {
        let kind = activation.unwrap_or(if rng.uniform() < 0.5 {
            ActivationKind::leaky_relu()
        } else {
            ActivationKind::Tanh
        });
        let skip = dims[e] == dims[e + 1] && rng.uniform() < 0.5;
        layers.push(LayerSpec::new(dims[e], dims[e + 1], kind, skip).unwrap());
    }
    let mode = if rng.uniform() < 0.5 { VarianceMode::fixed(1.0) } else { VarianceMode::learned() };
    let mut model = GenerativeModel::new(layers, mode, rng).unwrap();
    // Random biases and variances in the legal range.
    {
        let spread: Vec<Vec<f64>> = model
            .layers()
            .iter()
            .map(|l| (0..l.out_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let lvs: Vec<Vec<f64>> = model
            .layers()
            .iter()
            .map(|l| (0..l.out_dim).map(|_| rng.uniform_in(0.05f64.ln(), 2f64.ln())).collect())
            .collect();
        model = GenerativeModel::from_parts(
            model.layers().to_vec(),
            (0..model.num_latent_layers()).map(|e| model.weight(e).clone()).collect(),
            spread,
            lvs,
            model.variance_mode(),
        )
        .unwrap();
    }
    let state = LatentState {
        z: model.latent_dims().iter().map(|&d| (0..d).map(|_| 2.0 * rng.standard_normal()).collect()).collect(),
    };
    let x = (0..model.obs_dim()).map(|_| 2.0 * rng.standard_normal()).collect();
    RandomInstance { model, state, x }
}

/// Keep leaky-ReLU pre-activations (the latent coordinates themselves) at
/// least `margin` away from the kink at zero.
pub fn push_away_from_kinks(state: &mut LatentState, margin: f64) {
    for z in &mut state.z {
        for v in z.iter_mut() {
            if v.abs() < margin {
                *v = if *v >= 0.0 { margin } else { -margin };
            }
        }
    }
}
