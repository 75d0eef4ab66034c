//! MAP inference over latent states and the feedforward amortizer that
//! initializes it.
//!
//! Inference is plain gradient ascent on the log joint with a per-sample
//! adaptive step size: the step shrinks by `shrink_factor` whenever the
//! negative log joint increases relative to the previous iterate, floored
//! at `min_step`. The returned state is the best iterate seen, so its log
//! joint never falls below the initial one.

use crate::model::{
    activation, activation_deriv, grad_log_joint_latents, log_joint, ActivationKind,
    GenerativeModel, LatentState,
};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct InferenceConfig {
    pub steps: usize,
    pub step_size: f64,
    pub shrink_factor: f64,
    pub min_step: f64,
    /// Rescale the initial step by the smallest learned variance
    /// (`max(min_step, step · min σ²)`); only applies in learned-variance
    /// mode.
    pub variance_coupled_rescale: bool,
}

impl InferenceConfig {
    /// Defaults for a given activation: 150 steps, step size 0.05 for tanh
    /// and 0.001 for leaky ReLU.
    pub fn for_activation(kind: ActivationKind) -> Self {
        let step_size = match kind {
            ActivationKind::Tanh => 0.05,
            ActivationKind::LeakyRelu { .. } => 0.001,
        };
        Self { steps: 150, step_size, shrink_factor: 0.9, min_step: 1e-5, variance_coupled_rescale: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("inference needs at least one step".into()));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(Error::Config(format!(
                "shrink factor must be in (0,1), got {}",
                self.shrink_factor
            )));
        }
        if !(self.step_size > 0.0) || !(self.min_step > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the per-sample inference trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: usize,
    pub log_joint: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct InferenceOutcome {
    /// Best iterate seen (maximum log joint).
    pub state: LatentState,
    /// Log joint at the best iterate.
    pub log_joint: f64,
    pub trace: Vec<TraceRow>,
    /// Set when inference ended on a run of non-finite candidates and had
    /// to return the best iterate early.
    pub warning: bool,
}

/// Gradient-ascent MAP inference.
pub fn map_inference(
    model: &GenerativeModel,
    x: &[f64],
    init: &LatentState,
    cfg: &InferenceConfig,
) -> Result<InferenceOutcome> {
    cfg.validate()?;
    let lj0 = log_joint(model, init, x)?;
    let mut eta = cfg.step_size;
    if cfg.variance_coupled_rescale && model.variance_mode().is_learned() {
        eta = (eta * model.min_variance()).max(cfg.min_step);
    }
    let mut cur = init.clone();
    let mut lj_cur = lj0;
    let mut best = init.clone();
    let mut lj_best = lj0;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(TraceRow { step: 0, log_joint: lj0, step_size: eta });
    let mut tail_nonfinite = 0usize;
    for step in 1..=cfg.steps {
        let grads = grad_log_joint_latents(model, &cur, x);
        let mut cand = cur.clone();
        for (z, g) in cand.z.iter_mut().zip(&grads) {
            for (zi, gi) in z.iter_mut().zip(g) {
                *zi += eta * gi;
            }
        }
        match log_joint(model, &cand, x) {
            Ok(lj) => {
                tail_nonfinite = 0;
                if lj < lj_cur {
                    eta = (eta * cfg.shrink_factor).max(cfg.min_step);
                }
                cur = cand;
                lj_cur = lj;
                // Ties resolve toward the later iterate so the returned
                // state keeps contracting once improvements drop below
                // float resolution.
                if lj >= lj_best {
                    best = cur.clone();
                    lj_best = lj;
                }
            }
            Err(_) => {
                // Revert to the best iterate, shrink, and keep going.
                tail_nonfinite += 1;
                cur = best.clone();
                lj_cur = lj_best;
                eta = (eta * cfg.shrink_factor).max(cfg.min_step);
            }
        }
        trace.push(TraceRow { step, log_joint: lj_cur, step_size: eta });
    }
    Ok(InferenceOutcome { state: best, log_joint: lj_best, trace, warning: tail_nonfinite > 0 })
}

/// Write a trace as CSV rows `step,log_joint,step_size`.
pub fn write_trace_csv(path: &std::path::Path, rows: &[TraceRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,log_joint,step_size")?;
    for r in rows {
        writeln!(f, "{},{:?},{:?}", r.step, r.log_joint, r.step_size)?;
    }
    Ok(())
}

/// One layer of the amortization network.
#[derive(Debug, Clone)]
pub struct AmortLayer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: ActivationKind,
}

/// Feedforward network mapping an observation up the hierarchy:
/// layer 0 maps the observation to the bottom latent, the last layer
/// produces the top latent. Carries its own SGD-momentum state.
#[derive(Debug, Clone)]
pub struct Amortizer {
    layers: Vec<AmortLayer>,
    vel_w: Vec<Matrix>,
    vel_b: Vec<Vec<f64>>,
}

impl Amortizer {
    /// Mirror of the generative model: layer dims are reversed and the
    /// activation kind is shared.
    pub fn for_model(model: &GenerativeModel, rng: &mut Rng) -> Self {
        let mut dims: Vec<usize> = model.latent_dims();
        dims.push(model.obs_dim());
        // dims = [top, ..., bottom, obs]; amortizer walks it backwards.
        let mut layers = Vec::new();
        for k in (0..dims.len() - 1).rev() {
            let (in_dim, out_dim) = (dims[k + 1], dims[k]);
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            layers.push(AmortLayer {
                weights: Matrix::from_fn(out_dim, in_dim, |_, _| rng.uniform_in(-bound, bound)),
                biases: vec![0.0; out_dim],
                activation: model.layers()[k].activation,
            });
        }
        let vel_w = layers.iter().map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols())).collect();
        let vel_b = layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();
        Self { layers, vel_w, vel_b }
    }

    pub fn from_layers(layers: Vec<AmortLayer>) -> Self {
        let vel_w = layers.iter().map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols())).collect();
        let vel_b = layers.iter().map(|l| vec![0.0; l.biases.len()]).collect();
        Self { layers, vel_w, vel_b }
    }

    pub fn layers(&self) -> &[AmortLayer] {
        &self.layers
    }

    fn predict_layer(layer: &AmortLayer, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = layer.weights.matvec(input);
        for (p, b) in pre.iter_mut().zip(&layer.biases) {
            *p += b;
        }
        let out = activation(layer.activation, &pre);
        (pre, out)
    }

    /// Feedforward pass producing an initial latent state: layer `k`'s
    /// output is `act(W_k · input + b_k)`, and all intermediate
    /// representations become the state (bottom latent first computed,
    /// stored top-first to match [`LatentState`] layout).
    pub fn init_state(&self, x: &[f64]) -> LatentState {
        let n = self.layers.len();
        let mut z = vec![Vec::new(); n];
        let mut h = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let (_, out) = Self::predict_layer(layer, &h);
            z[n - 1 - k] = out.clone();
            h = out;
        }
        LatentState { z }
    }

    /// One SGD-momentum step per layer on `½‖prediction − target‖²`.
    /// Layers train independently: layer `k`'s input is the MAP value of
    /// the layer below it (the observation for layer 0), and its target is
    /// the MAP value of the layer it predicts.
    pub fn update(&mut self, x: &[f64], z_map: &LatentState, lr: f64, momentum: f64) {
        let n = self.layers.len();
        assert_eq!(z_map.z.len(), n, "amortizer/state layer count mismatch");
        for k in 0..n {
            let input: &[f64] = if k == 0 { x } else { &z_map.z[n - k] };
            let target = &z_map.z[n - 1 - k];
            let layer = &self.layers[k];
            let (pre, out) = Self::predict_layer(layer, input);
            let dact = activation_deriv(layer.activation, &pre);
            let delta: Vec<f64> = out
                .iter()
                .zip(target)
                .zip(&dact)
                .map(|((o, t), d)| (o - t) * d)
                .collect();
            let vw = &mut self.vel_w[k];
            for i in 0..delta.len() {
                for (j, inp) in input.iter().enumerate() {
                    let g = delta[i] * inp;
                    let v = momentum * vw.get(i, j) + g;
                    vw.set(i, j, v);
                }
            }
            for (vb, d) in self.vel_b[k].iter_mut().zip(&delta) {
                *vb = momentum * *vb + d;
            }
            let layer = &mut self.layers[k];
            for i in 0..layer.biases.len() {
                for j in 0..layer.weights.cols() {
                    let w = layer.weights.get(i, j) - lr * self.vel_w[k].get(i, j);
                    layer.weights.set(i, j, w);
                }
                layer.biases[i] -= lr * self.vel_b[k][i];
            }
        }
    }

    /// Mean squared distance between the feedforward initialization and a
    /// reference state, averaged over coordinates.
    pub fn init_mse(&self, x: &[f64], reference: &LatentState) -> f64 {
        let init = self.init_state(x);
        let mut acc = 0.0;
        let mut n = 0usize;
        for (a, b) in init.z.iter().zip(&reference.z) {
            for (u, v) in a.iter().zip(b) {
                acc += (u - v) * (u - v);
                n += 1;
            }
        }
        acc / n as f64
    }
}
