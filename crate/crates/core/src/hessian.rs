//! Hessians of the negative log joint with respect to the latent states.
//!
//! Two routes are provided. [`block_hessian`] builds the per-layer
//! Gauss-Newton-style blocks `diag(1/σ²_own) + Jᵀ diag(1/σ²_child) J`,
//! which are positive semi-definite by construction and exact for
//! piecewise-linear activations away from their kinks. [`full_hessian`]
//! builds the dense Hessian over all (or a subset of) latent coordinates by
//! central differences of the analytic gradient; when that matrix fails to
//! factor it is replaced by the identity and the fallback is flagged, which
//! keeps the associated posterior sampleable.

use crate::model::{grad_log_joint_latents, layer_jacobian, GenerativeModel, LatentState};
use crate::numerics::{
    cholesky, min_eigenvalue, symmetrize, CholFactor, Matrix, SymMatrix, FD_STEP,
};
use crate::{Error, Result};

/// One symmetric PSD block per latent layer, with Cholesky factors and the
/// total log-determinant.
#[derive(Debug, Clone)]
pub struct HessianBlocks {
    layers: Vec<usize>,
    blocks: Vec<SymMatrix>,
    factors: Vec<CholFactor>,
    log_det_total: f64,
}

impl HessianBlocks {
    /// Latent layer indices covered by these blocks, ascending.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn blocks(&self) -> &[SymMatrix] {
        &self.blocks
    }

    pub fn factors(&self) -> &[CholFactor] {
        &self.factors
    }

    pub fn log_det_total(&self) -> f64 {
        self.log_det_total
    }

    pub fn block_for(&self, layer: usize) -> Option<&SymMatrix> {
        self.layers.iter().position(|&l| l == layer).map(|i| &self.blocks[i])
    }

    /// Maximum eigenvalue over all blocks.
    pub fn sharpness(&self) -> f64 {
        self.blocks.iter().map(sharpness).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Block-diagonal Hessian approximation over every latent layer.
pub fn block_hessian(model: &GenerativeModel, state: &LatentState) -> Result<HessianBlocks> {
    let all: Vec<usize> = (0..model.num_latent_layers()).collect();
    block_hessian_for(model, state, &all)
}

/// Block-diagonal Hessian approximation restricted to `layers`.
///
/// For each latent layer `j`: `diag(1/σ²_own) + Jᵀ diag(1/σ²_child) J`
/// where `J` is the outgoing edge's Jacobian at the current state and the
/// child is the next latent layer or the observation. Blocks are
/// symmetrized and factored; a factorization failure here means something
/// is numerically broken, so it is an error rather than a fallback.
pub fn block_hessian_for(
    model: &GenerativeModel,
    state: &LatentState,
    layers: &[usize],
) -> Result<HessianBlocks> {
    let n_layers = model.num_latent_layers();
    let mut blocks = Vec::with_capacity(layers.len());
    let mut factors = Vec::with_capacity(layers.len());
    let mut log_det_total = 0.0;
    for &j in layers {
        assert!(j < n_layers, "latent layer index out of range");
        let dim = state.z[j].len();
        // Precision of this layer's own conditional: the unit prior for the
        // top layer, the incoming edge's variances otherwise.
        let own_prec: Vec<f64> = if j == 0 {
            vec![1.0; dim]
        } else {
            model.variances(j - 1).iter().map(|v| 1.0 / v).collect()
        };
        let jac = layer_jacobian(model, j, &state.z[j]);
        let child_prec: Vec<f64> = model.variances(j).iter().map(|v| 1.0 / v).collect();
        let mut m = Matrix::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..=r {
                let mut s = 0.0;
                for k in 0..jac.rows() {
                    s += jac.get(k, r) * child_prec[k] * jac.get(k, c);
                }
                m.set(r, c, s);
                m.set(c, r, s);
            }
            m.set(r, r, m.get(r, r) + own_prec[r]);
        }
        let block = symmetrize(&m)?;
        let factor = cholesky(&block).ok_or_else(|| {
            Error::NotPsd(format!(
                "block for latent layer {j} failed to factor (min eigenvalue {:.3e}); \
                 blocks are PSD by construction, so this indicates a numerical defect",
                min_eigenvalue(&block)
            ))
        })?;
        log_det_total += factor.log_det();
        blocks.push(block);
        factors.push(factor);
    }
    Ok(HessianBlocks { layers: layers.to_vec(), blocks, factors, log_det_total })
}

/// Dense Hessian over a set of latent coordinates, with identity fallback.
#[derive(Debug, Clone)]
pub struct FullHessian {
    layers: Vec<usize>,
    /// The symmetrized finite-difference matrix, kept even when the
    /// fallback replaced it for sampling purposes.
    matrix: SymMatrix,
    /// Factor of `matrix`, or of the identity when `fallback` is set.
    factor: CholFactor,
    fallback: bool,
}

impl FullHessian {
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn fallback(&self) -> bool {
        self.fallback
    }

    pub fn dim(&self) -> usize {
        self.matrix.n()
    }

    /// Log-determinant of the matrix actually used for sampling; zero when
    /// the identity fallback is active.
    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }
}

/// Full Hessian of the negative log joint over all latents.
pub fn full_hessian(model: &GenerativeModel, state: &LatentState, x: &[f64]) -> Result<FullHessian> {
    let all: Vec<usize> = (0..model.num_latent_layers()).collect();
    full_hessian_over(model, state, x, &all)
}

/// Full Hessian restricted to the coordinates of `layers`, computed by
/// central differences of the analytic latent gradient (one gradient call
/// per perturbed coordinate and sign), then symmetrized. Returns the
/// identity with the fallback flag set when the matrix is not PSD.
pub fn full_hessian_over(
    model: &GenerativeModel,
    state: &LatentState,
    x: &[f64],
    layers: &[usize],
) -> Result<FullHessian> {
    let dims: Vec<usize> = layers.iter().map(|&j| state.z[j].len()).collect();
    let n: usize = dims.iter().sum();
    let gather = |grads: &[Vec<f64>]| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for &j in layers {
            out.extend_from_slice(&grads[j]);
        }
        out
    };
    let mut m = Matrix::zeros(n, n);
    let mut col = 0;
    for (li, &j) in layers.iter().enumerate() {
        for c in 0..dims[li] {
            let z0 = state.z[j][c];
            let h = FD_STEP * (1.0 + z0.abs());
            let mut st = state.clone();
            st.z[j][c] = z0 + h;
            let gp = gather(&grad_log_joint_latents(model, &st, x));
            st.z[j][c] = z0 - h;
            let gm = gather(&grad_log_joint_latents(model, &st, x));
            for r in 0..n {
                // Hessian of the NEGATIVE log joint.
                m.set(r, col, -(gp[r] - gm[r]) / (2.0 * h));
            }
            col += 1;
        }
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("full Hessian contains non-finite entries".into()));
    }
    let matrix = symmetrize(&m)?;
    match cholesky(&matrix) {
        Some(factor) => Ok(FullHessian { layers: layers.to_vec(), matrix, factor, fallback: false }),
        None => {
            let factor = cholesky(&SymMatrix::identity(n)).expect("identity factors");
            Ok(FullHessian { layers: layers.to_vec(), matrix, factor, fallback: true })
        }
    }
}

/// Maximum eigenvalue of a symmetric matrix.
pub fn sharpness(s: &SymMatrix) -> f64 {
    -min_eigenvalue(&s.negated())
}
