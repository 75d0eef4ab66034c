//! Hierarchical latent Gaussian generative model.
//!
//! A model with `L` latent layers is a chain of prediction edges
//!
//! ```text
//! z[0] (top) → z[1] → … → z[L-1] (bottom) → x (observation)
//! ```
//!
//! Edge `e` predicts its child's mean as `f_e(v) = W_e · act(v) + b_e`
//! (plus `v` itself when the edge carries a skip connection), and the child
//! has a diagonal Gaussian conditional around that mean. The top layer has
//! a fixed standard-normal prior. The log joint is the sum of every
//! conditional's full Gaussian log density, normalization constants
//! included, so values are directly usable for marginal-likelihood work.

use crate::numerics::Matrix;
use crate::numerics::Rng;
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Elementwise nonlinearity applied to a layer's latent vector before the
/// affine map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl ActivationKind {
    pub fn leaky_relu() -> Self {
        ActivationKind::LeakyRelu { slope: 0.01 }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match self {
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

    /// Derivative; at exactly 0 the leaky ReLU derivative is defined as 1.
    #[inline]
    pub fn deriv(&self, v: f64) -> f64 {
        match self {
            ActivationKind::LeakyRelu { slope } => {
                if v >= 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            ActivationKind::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Elementwise activation of a vector.
pub fn activation(kind: ActivationKind, v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| kind.apply(*x)).collect()
}

/// Elementwise activation derivative of a vector.
pub fn activation_deriv(kind: ActivationKind, v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| kind.deriv(*x)).collect()
}

/// One prediction edge of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: ActivationKind,
    pub skip: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: ActivationKind, skip: bool) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if skip && in_dim != out_dim {
            return Err(Error::Config(format!(
                "skip connection requires equal dims, got {in_dim} -> {out_dim}"
            )));
        }
        if let ActivationKind::LeakyRelu { slope } = activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!("leaky ReLU slope must be in (0,1), got {slope}")));
            }
        }
        Ok(Self { in_dim, out_dim, activation, skip })
    }
}

/// How conditional variances are treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceMode {
    /// All conditional variances pinned to one value; not trained.
    Fixed { value: f64 },
    /// Per-coordinate log-variances are parameters, clamped into
    /// `[min, max]` (as variances) after every update.
    Learned { min: f64, max: f64 },
}

impl VarianceMode {
    pub fn fixed(value: f64) -> Self {
        VarianceMode::Fixed { value }
    }

    pub fn learned() -> Self {
        VarianceMode::Learned { min: 1e-3, max: 2.0 }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, VarianceMode::Learned { .. })
    }
}

/// Latent vectors, one per layer, top first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<Vec<f64>>,
}

impl LatentState {
    pub fn zeros(model: &GenerativeModel) -> Self {
        Self { z: model.latent_dims().iter().map(|&d| vec![0.0; d]).collect() }
    }

    pub fn total_dim(&self) -> usize {
        self.z.iter().map(Vec::len).sum()
    }

    /// Flatten all layers into one vector, top layer first.
    pub fn to_concat(&self) -> Vec<f64> {
        self.z.concat()
    }

    /// Rebuild a state from a flat vector using the model's layer dims.
    pub fn from_concat(model: &GenerativeModel, flat: &[f64]) -> Self {
        let mut z = Vec::with_capacity(model.num_latent_layers());
        let mut off = 0;
        for d in model.latent_dims() {
            z.push(flat[off..off + d].to_vec());
            off += d;
        }
        assert_eq!(off, flat.len(), "flat latent vector has wrong length");
        Self { z }
    }
}

/// Gradients of the log joint with respect to every model parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub log_vars: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &GenerativeModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| Matrix::zeros(l.out_dim, l.in_dim)).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
            log_vars: model.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, c: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, c);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        for (a, b) in self.log_vars.iter_mut().zip(&other.log_vars) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            w.scale(c);
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x *= c;
            }
        }
        for lv in &mut self.log_vars {
            for x in lv.iter_mut() {
                *x *= c;
            }
        }
    }
}

/// The generative model: one weight matrix, bias, and log-variance vector
/// per prediction edge, plus a fixed N(0, I) prior on the top layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    layers: Vec<LayerSpec>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    log_variances: Vec<Vec<f64>>,
    variance_mode: VarianceMode,
}

impl GenerativeModel {
    /// Fresh model with uniform `±sqrt(6/(in+out))` weights, zero biases,
    /// and variances initialized from the variance mode.
    pub fn new(layers: Vec<LayerSpec>, variance_mode: VarianceMode, rng: &mut Rng) -> Result<Self> {
        validate_chain(&layers)?;
        let mut weights = Vec::with_capacity(layers.len());
        let mut biases = Vec::with_capacity(layers.len());
        let mut log_variances = Vec::with_capacity(layers.len());
        let init_log_var = match variance_mode {
            VarianceMode::Fixed { value } => {
                if value <= 0.0 {
                    return Err(Error::Config(format!("fixed variance must be positive, got {value}")));
                }
                value.ln()
            }
            VarianceMode::Learned { min, max } => {
                if !(min > 0.0 && max > min) {
                    return Err(Error::Config("variance clamp range must satisfy 0 < min < max".into()));
                }
                1f64.clamp(min, max).ln()
            }
        };
        for l in &layers {
            let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            weights.push(Matrix::from_fn(l.out_dim, l.in_dim, |_, _| rng.uniform_in(-bound, bound)));
            biases.push(vec![0.0; l.out_dim]);
            log_variances.push(vec![init_log_var; l.out_dim]);
        }
        Ok(Self { layers, weights, biases, log_variances, variance_mode })
    }

    /// Assemble a model from explicit parameters, validating shapes.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        log_variances: Vec<Vec<f64>>,
        variance_mode: VarianceMode,
    ) -> Result<Self> {
        validate_chain(&layers)?;
        if weights.len() != layers.len() || biases.len() != layers.len() || log_variances.len() != layers.len() {
            return Err(Error::Dim("parameter list lengths must match layer count".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if weights[i].rows() != l.out_dim || weights[i].cols() != l.in_dim {
                return Err(Error::Dim(format!(
                    "weight {i} must be {}x{}, got {}x{}",
                    l.out_dim,
                    l.in_dim,
                    weights[i].rows(),
                    weights[i].cols()
                )));
            }
            if biases[i].len() != l.out_dim || log_variances[i].len() != l.out_dim {
                return Err(Error::Dim(format!("bias/log-variance {i} must have length {}", l.out_dim)));
            }
        }
        if weights.iter().any(|w| w.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("model weights must be finite".into()));
        }
        Ok(Self { layers, weights, biases, log_variances, variance_mode })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Number of latent layers (equals the number of prediction edges).
    pub fn num_latent_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn latent_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.in_dim).collect()
    }

    pub fn total_latent_dim(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim).sum()
    }

    pub fn obs_dim(&self) -> usize {
        self.layers.last().expect("model has at least one layer").out_dim
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.variance_mode
    }

    pub fn weight(&self, edge: usize) -> &Matrix {
        &self.weights[edge]
    }

    pub fn bias(&self, edge: usize) -> &[f64] {
        &self.biases[edge]
    }

    pub fn log_variance(&self, edge: usize) -> &[f64] {
        &self.log_variances[edge]
    }

    /// Conditional variances for edge `edge`'s child, per coordinate.
    pub fn variances(&self, edge: usize) -> Vec<f64> {
        self.log_variances[edge].iter().map(|lv| lv.exp()).collect()
    }

    /// Smallest conditional variance across all edges.
    pub fn min_variance(&self) -> f64 {
        self.log_variances
            .iter()
            .flatten()
            .map(|lv| lv.exp())
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [Matrix], &mut [Vec<f64>], &mut [Vec<f64>]) {
        (&mut self.weights, &mut self.biases, &mut self.log_variances)
    }

    /// Clamp learned variances into their configured range. No-op for
    /// fixed variances.
    pub fn clamp_variances(&mut self) {
        if let VarianceMode::Learned { min, max } = self.variance_mode {
            let (lo, hi) = (min.ln(), max.ln());
            for lv in self.log_variances.iter_mut().flatten() {
                *lv = lv.clamp(lo, hi);
            }
        }
    }

    fn check_state(&self, state: &LatentState, x: &[f64]) -> Result<()> {
        if state.z.len() != self.layers.len() {
            return Err(Error::Dim(format!(
                "state has {} layers, model has {}",
                state.z.len(),
                self.layers.len()
            )));
        }
        for (j, (z, l)) in state.z.iter().zip(&self.layers).enumerate() {
            if z.len() != l.in_dim {
                return Err(Error::Dim(format!("latent layer {j} has dim {}, expected {}", z.len(), l.in_dim)));
            }
        }
        if x.len() != self.obs_dim() {
            return Err(Error::Dim(format!("observation has dim {}, expected {}", x.len(), self.obs_dim())));
        }
        Ok(())
    }
}

fn validate_chain(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("model needs at least one layer".into()));
    }
    for w in layers.windows(2) {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::Dim(format!(
                "adjacent layers disagree: out_dim {} vs in_dim {}",
                w[0].out_dim, w[1].in_dim
            )));
        }
    }
    Ok(())
}

/// Mean of edge `l`'s child: `W_l · act(z_parent) + b_l` (+ `z_parent` when
/// skip is set).
pub fn layer_predict(model: &GenerativeModel, l: usize, z_parent: &[f64]) -> Result<Vec<f64>> {
    let spec = &model.layers[l];
    if z_parent.len() != spec.in_dim {
        return Err(Error::Dim(format!(
            "layer {l} expects input dim {}, got {}",
            spec.in_dim,
            z_parent.len()
        )));
    }
    let act = activation(spec.activation, z_parent);
    let mut out = model.weights[l].matvec(&act);
    for (o, b) in out.iter_mut().zip(&model.biases[l]) {
        *o += b;
    }
    if spec.skip {
        for (o, z) in out.iter_mut().zip(z_parent) {
            *o += z;
        }
    }
    Ok(out)
}

/// Jacobian of edge `l`'s prediction with respect to its parent:
/// `W_l · diag(act'(z_parent))`, plus the identity when skip is set.
pub fn layer_jacobian(model: &GenerativeModel, l: usize, z_parent: &[f64]) -> Matrix {
    let spec = &model.layers[l];
    assert_eq!(z_parent.len(), spec.in_dim, "layer_jacobian dimension mismatch");
    let d = activation_deriv(spec.activation, z_parent);
    let w = &model.weights[l];
    let mut j = Matrix::from_fn(spec.out_dim, spec.in_dim, |r, c| w.get(r, c) * d[c]);
    if spec.skip {
        for i in 0..spec.in_dim {
            j.set(i, i, j.get(i, i) + 1.0);
        }
    }
    j
}

fn gaussian_term(resid_sq_over_var: f64, sum_log_var: f64, dim: usize) -> f64 {
    -0.5 * (resid_sq_over_var + sum_log_var + dim as f64 * LN_2PI)
}

/// Full log joint `log P(x, z)`, normalization constants included: the sum
/// over the top prior, every latent conditional, and the observation
/// conditional of `-½ [ Σ (r_i²/σ_i² + ln σ_i²) + d ln 2π ]`.
pub fn log_joint(model: &GenerativeModel, state: &LatentState, x: &[f64]) -> Result<f64> {
    model.check_state(state, x)?;
    let n_layers = model.layers.len();
    // Conditional 0: top prior N(0, I).
    let top = &state.z[0];
    let mut total = gaussian_term(top.iter().map(|v| v * v).sum(), 0.0, top.len());
    if !total.is_finite() {
        return Err(Error::NonFinite("log joint conditional 0 (top prior)".into()));
    }
    for e in 0..n_layers {
        let pred = layer_predict(model, e, &state.z[e])?;
        let child: &[f64] = if e + 1 < n_layers { &state.z[e + 1] } else { x };
        let vars = model.variances(e);
        let mut quad = 0.0;
        let mut sum_lv = 0.0;
        for i in 0..child.len() {
            let r = child[i] - pred[i];
            quad += r * r / vars[i];
            sum_lv += model.log_variances[e][i];
        }
        let term = gaussian_term(quad, sum_lv, child.len());
        if !term.is_finite() {
            return Err(Error::NonFinite(format!("log joint conditional {} (edge {e})", e + 1)));
        }
        total += term;
    }
    Ok(total)
}

/// Analytic gradient of the log joint with respect to every latent layer:
/// `-r_j/σ_j² + J_jᵀ (r_child/σ_child²)`.
pub fn grad_log_joint_latents(model: &GenerativeModel, state: &LatentState, x: &[f64]) -> Vec<Vec<f64>> {
    model.check_state(state, x).expect("grad_log_joint_latents dimension mismatch");
    let n_layers = model.layers.len();
    // Residuals weighted by precision, one per edge.
    let mut weighted: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for e in 0..n_layers {
        let pred = layer_predict(model, e, &state.z[e]).expect("dims already validated");
        let child: &[f64] = if e + 1 < n_layers { &state.z[e + 1] } else { x };
        let vars = model.variances(e);
        weighted.push(
            child
                .iter()
                .zip(&pred)
                .zip(&vars)
                .map(|((c, p), v)| (c - p) / v)
                .collect(),
        );
    }
    let mut grads = Vec::with_capacity(n_layers);
    for j in 0..n_layers {
        // Own conditional: prior score for the top layer, otherwise the
        // precision-weighted residual of the incoming edge.
        let mut g: Vec<f64> = if j == 0 {
            state.z[0].iter().map(|v| -v).collect()
        } else {
            weighted[j - 1].iter().map(|w| -w).collect()
        };
        // Child conditional through this layer's outgoing edge.
        let jac = layer_jacobian(model, j, &state.z[j]);
        let pull = jac.tr_matvec(&weighted[j]);
        for (a, b) in g.iter_mut().zip(&pull) {
            *a += b;
        }
        grads.push(g);
    }
    grads
}

/// Analytic gradient of the log joint with respect to weights, biases, and
/// log variances. Log-variance gradients are `½ (r²/σ² − 1)` per coordinate
/// and are reported regardless of variance mode; the optimizer decides
/// whether to apply them.
pub fn grad_log_joint_params(model: &GenerativeModel, state: &LatentState, x: &[f64]) -> ParamGrads {
    model.check_state(state, x).expect("grad_log_joint_params dimension mismatch");
    let n_layers = model.layers.len();
    let mut grads = ParamGrads::zeros_like(model);
    for e in 0..n_layers {
        let act = activation(model.layers[e].activation, &state.z[e]);
        let pred = layer_predict(model, e, &state.z[e]).expect("dims already validated");
        let child: &[f64] = if e + 1 < n_layers { &state.z[e + 1] } else { x };
        let vars = model.variances(e);
        for i in 0..child.len() {
            let r = child[i] - pred[i];
            let w = r / vars[i];
            grads.biases[e][i] = w;
            for (c, a) in act.iter().enumerate() {
                grads.weights[e].set(i, c, w * a);
            }
            grads.log_vars[e][i] = 0.5 * (r * r / vars[i] - 1.0);
        }
    }
    grads
}

/// Result of a deterministic top-down pass.
#[derive(Debug, Clone)]
pub struct TopDown {
    /// Means for the fixed layer and every latent layer below it, in order.
    pub latents: Vec<Vec<f64>>,
    /// Predicted observation mean.
    pub observation: Vec<f64>,
}

/// Fix latent layer `layer` at `z` and propagate means downward through the
/// remaining edges.
pub fn forward_topdown(model: &GenerativeModel, layer: usize, z: &[f64]) -> Result<TopDown> {
    let n_layers = model.num_latent_layers();
    if layer >= n_layers {
        return Err(Error::Dim(format!("layer {layer} out of range, model has {n_layers} latent layers")));
    }
    if z.len() != model.layers[layer].in_dim {
        return Err(Error::Dim(format!(
            "fixed vector has dim {}, layer {layer} expects {}",
            z.len(),
            model.layers[layer].in_dim
        )));
    }
    let mut latents = vec![z.to_vec()];
    let mut cur = z.to_vec();
    for e in layer..n_layers {
        let next = layer_predict(model, e, &cur)?;
        if e + 1 < n_layers {
            latents.push(next.clone());
            cur = next;
        } else {
            return Ok(TopDown { latents, observation: next });
        }
    }
    unreachable!("chain has at least one edge");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_identity_model() -> GenerativeModel {
        // One latent (dim 1), obs dim 1, f(z) = z, unit variances.
        GenerativeModel::from_parts(
            vec![LayerSpec::new(1, 1, ActivationKind::leaky_relu(), false).unwrap()],
            vec![Matrix::from_rows(&[vec![1.0]]).unwrap()],
            vec![vec![0.0]],
            vec![vec![0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap()
    }

    #[test]
    fn activation_examples() {
        let lr = ActivationKind::leaky_relu();
        assert_eq!(activation(lr, &[-1.0, 0.0, 2.0]), vec![-0.01, 0.0, 2.0]);
        assert_eq!(activation(ActivationKind::Tanh, &[0.0]), vec![0.0]);
        assert_eq!(activation_deriv(ActivationKind::Tanh, &[0.0]), vec![1.0]);
        assert_eq!(activation_deriv(lr, &[-3.0, 5.0]), vec![0.01, 1.0]);
        assert_eq!(activation_deriv(lr, &[0.0]), vec![1.0]);
    }

    #[test]
    fn layer_predict_examples() {
        let m = GenerativeModel::from_parts(
            vec![LayerSpec::new(2, 2, ActivationKind::Tanh, false).unwrap()],
            vec![Matrix::identity(2)],
            vec![vec![0.0, 0.0]],
            vec![vec![0.0, 0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        assert_eq!(layer_predict(&m, 0, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);

        let m = GenerativeModel::from_parts(
            vec![LayerSpec::new(1, 1, ActivationKind::leaky_relu(), false).unwrap()],
            vec![Matrix::from_rows(&[vec![2.0]]).unwrap()],
            vec![vec![1.0]],
            vec![vec![0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        assert_eq!(layer_predict(&m, 0, &[3.0]).unwrap(), vec![7.0]);

        let m = GenerativeModel::from_parts(
            vec![LayerSpec::new(1, 1, ActivationKind::leaky_relu(), true).unwrap()],
            vec![Matrix::from_rows(&[vec![0.0]]).unwrap()],
            vec![vec![0.0]],
            vec![vec![0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        assert_eq!(layer_predict(&m, 0, &[5.0]).unwrap(), vec![5.0]);
    }

    #[test]
    fn layer_predict_rejects_dim_mismatch() {
        let m = single_identity_model();
        assert!(matches!(layer_predict(&m, 0, &[1.0, 2.0]), Err(Error::Dim(_))));
    }

    #[test]
    fn log_joint_standard_normal_modes() {
        let m = single_identity_model();
        let state = LatentState { z: vec![vec![0.0]] };
        let lj = log_joint(&m, &state, &[0.0]).unwrap();
        assert!((lj + LN_2PI).abs() < 1e-12);
        let lj = log_joint(&m, &state, &[1.0]).unwrap();
        assert!((lj + LN_2PI + 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_joint_zero_residuals_counts_dimensions() {
        // Zero weights/biases, zero state and observation: every residual is
        // zero and all variances are 1, so only the constants remain.
        let mut rng = Rng::new(3);
        let m = GenerativeModel::new(
            vec![
                LayerSpec::new(2, 3, ActivationKind::Tanh, false).unwrap(),
                LayerSpec::new(3, 4, ActivationKind::Tanh, false).unwrap(),
            ],
            VarianceMode::fixed(1.0),
            &mut rng,
        )
        .unwrap();
        let m = GenerativeModel::from_parts(
            m.layers.clone(),
            vec![Matrix::zeros(3, 2), Matrix::zeros(4, 3)],
            vec![vec![0.0; 3], vec![0.0; 4]],
            vec![vec![0.0; 3], vec![0.0; 4]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        let state = LatentState { z: vec![vec![0.0; 2], vec![0.0; 3]] };
        let lj = log_joint(&m, &state, &[0.0; 4]).unwrap();
        let total_dim = (2 + 3 + 4) as f64;
        assert!((lj + 0.5 * total_dim * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn prior_only_gradient_is_negative_state() {
        let m = single_identity_model();
        // Make the observation edge irrelevant by zeroing its weight: the
        // top latent's gradient then reduces to the prior score.
        let m = GenerativeModel::from_parts(
            m.layers.clone(),
            vec![Matrix::from_rows(&[vec![0.0]]).unwrap()],
            vec![vec![0.0]],
            vec![vec![0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        let state = LatentState { z: vec![vec![2.0]] };
        let g = grad_log_joint_latents(&m, &state, &[0.0]);
        assert!((g[0][0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_residuals_zero_weight_bias_grads() {
        let m = single_identity_model();
        let state = LatentState { z: vec![vec![0.7]] };
        // x equals the prediction, so the observation residual is zero.
        let x = layer_predict(&m, 0, &state.z[0]).unwrap();
        let g = grad_log_joint_params(&m, &state, &x);
        assert_eq!(g.weights[0].get(0, 0), 0.0);
        assert_eq!(g.biases[0][0], 0.0);
    }

    #[test]
    fn variance_gradient_stationary_at_r2_eq_var() {
        let m = GenerativeModel::from_parts(
            vec![LayerSpec::new(1, 1, ActivationKind::leaky_relu(), false).unwrap()],
            vec![Matrix::from_rows(&[vec![0.0]]).unwrap()],
            vec![vec![0.0]],
            vec![vec![(0.25f64).ln()]],
            VarianceMode::learned(),
        )
        .unwrap();
        let state = LatentState { z: vec![vec![0.0]] };
        // Residual r = x - 0 = 0.5 so r² = 0.25 = σ².
        let g = grad_log_joint_params(&m, &state, &[0.5]);
        assert!(g.log_vars[0][0].abs() < 1e-12);
    }

    #[test]
    fn log_joint_decreases_in_variance_with_zero_residuals() {
        let build = |log_var: f64| {
            GenerativeModel::from_parts(
                vec![LayerSpec::new(1, 1, ActivationKind::leaky_relu(), false).unwrap()],
                vec![Matrix::from_rows(&[vec![0.0]]).unwrap()],
                vec![vec![0.0]],
                vec![vec![log_var]],
                VarianceMode::learned(),
            )
            .unwrap()
        };
        let state = LatentState { z: vec![vec![0.0]] };
        let lo = log_joint(&build((0.01f64).ln()), &state, &[0.0]).unwrap();
        let hi = log_joint(&build((1.9f64).ln()), &state, &[0.0]).unwrap();
        assert!(lo > hi, "ln σ² penalty must make larger variances worse at zero residual");
    }

    #[test]
    fn layer_jacobian_examples() {
        let m = GenerativeModel::from_parts(
            vec![LayerSpec::new(2, 2, ActivationKind::leaky_relu(), false).unwrap()],
            vec![Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap()],
            vec![vec![0.0, 0.0]],
            vec![vec![0.0, 0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        let j = layer_jacobian(&m, 0, &[1.0, -1.0]);
        assert_eq!(j.get(0, 0), 2.0);
        assert_eq!(j.get(1, 1), 0.03);
        assert_eq!(j.get(0, 1), 0.0);

        let m = GenerativeModel::from_parts(
            vec![LayerSpec::new(2, 2, ActivationKind::leaky_relu(), true).unwrap()],
            vec![Matrix::zeros(2, 2)],
            vec![vec![0.0, 0.0]],
            vec![vec![0.0, 0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        let j = layer_jacobian(&m, 0, &[0.4, -0.4]);
        assert_eq!(j.get(0, 0), 1.0);
        assert_eq!(j.get(1, 1), 1.0);
        assert_eq!(j.get(0, 1), 0.0);
    }

    #[test]
    fn forward_topdown_examples() {
        let m = GenerativeModel::from_parts(
            vec![
                LayerSpec::new(1, 1, ActivationKind::leaky_relu(), false).unwrap(),
                LayerSpec::new(1, 1, ActivationKind::leaky_relu(), false).unwrap(),
            ],
            vec![Matrix::from_rows(&[vec![1.0]]).unwrap(), Matrix::from_rows(&[vec![1.0]]).unwrap()],
            vec![vec![0.0], vec![0.0]],
            vec![vec![0.0], vec![0.0]],
            VarianceMode::fixed(1.0),
        )
        .unwrap();
        let td = forward_topdown(&m, 0, &[1.0]).unwrap();
        assert_eq!(td.observation, vec![1.0]);
        assert_eq!(td.latents.len(), 2);

        let td = forward_topdown(&m, 1, &[0.5]).unwrap();
        assert_eq!(td.observation, layer_predict(&m, 1, &[0.5]).unwrap());
    }

    #[test]
    fn forward_topdown_composes_layer_predict() {
        let mut rng = Rng::new(21);
        let m = GenerativeModel::new(
            vec![
                LayerSpec::new(3, 4, ActivationKind::Tanh, false).unwrap(),
                LayerSpec::new(4, 4, ActivationKind::Tanh, true).unwrap(),
                LayerSpec::new(4, 5, ActivationKind::Tanh, false).unwrap(),
            ],
            VarianceMode::fixed(1.0),
            &mut rng,
        )
        .unwrap();
        let z: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
        let td = forward_topdown(&m, 0, &z).unwrap();
        let a = layer_predict(&m, 0, &z).unwrap();
        let b = layer_predict(&m, 1, &a).unwrap();
        let c = layer_predict(&m, 2, &b).unwrap();
        assert_eq!(td.observation, c);
        assert_eq!(td.latents, vec![z, a, b]);
    }

    #[test]
    fn log_joint_invariant_under_layer_permutation() {
        // Permute the middle layer's coordinates together with the rows of
        // the incoming weight/bias/variance and the columns of the outgoing
        // weight; the log joint must not change. Skip connections are off so
        // the permutation stays local to one layer.
        let mut rng = Rng::new(17);
        let m = GenerativeModel::new(
            vec![
                LayerSpec::new(2, 4, ActivationKind::Tanh, false).unwrap(),
                LayerSpec::new(4, 3, ActivationKind::Tanh, false).unwrap(),
            ],
            VarianceMode::learned(),
            &mut rng,
        )
        .unwrap();
        let state = LatentState { z: vec![rng.normal_vec(2), rng.normal_vec(4)] };
        let x = rng.normal_vec(3);
        let base = log_joint(&m, &state, &x).unwrap();

        let perm = [2usize, 0, 3, 1];
        let w0 = Matrix::from_fn(4, 2, |i, j| m.weight(0).get(perm[i], j));
        let b0: Vec<f64> = perm.iter().map(|&i| m.bias(0)[i]).collect();
        let lv0: Vec<f64> = perm.iter().map(|&i| m.log_variance(0)[i]).collect();
        let w1 = Matrix::from_fn(3, 4, |i, j| m.weight(1).get(i, perm[j]));
        let mp = GenerativeModel::from_parts(
            m.layers().to_vec(),
            vec![w0, w1],
            vec![b0, m.bias(1).to_vec()],
            vec![lv0, m.log_variance(1).to_vec()],
            m.variance_mode(),
        )
        .unwrap();
        let zp: Vec<f64> = perm.iter().map(|&i| state.z[1][i]).collect();
        let sp = LatentState { z: vec![state.z[0].clone(), zp] };
        let permuted = log_joint(&mp, &sp, &x).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn skip_requires_equal_dims() {
        assert!(LayerSpec::new(2, 3, ActivationKind::Tanh, true).is_err());
    }

    #[test]
    fn clamp_keeps_learned_variances_in_range() {
        let mut rng = Rng::new(1);
        let mut m = GenerativeModel::new(
            vec![LayerSpec::new(1, 1, ActivationKind::Tanh, false).unwrap()],
            VarianceMode::learned(),
            &mut rng,
        )
        .unwrap();
        {
            let (_, _, lvs) = m.params_mut();
            lvs[0][0] = 100.0;
        }
        m.clamp_variances();
        assert!((m.variances(0)[0] - 2.0).abs() < 1e-12);
        {
            let (_, _, lvs) = m.params_mut();
            lvs[0][0] = -100.0;
        }
        m.clamp_variances();
        assert!((m.variances(0)[0] - 1e-3).abs() < 1e-15);
    }
}
