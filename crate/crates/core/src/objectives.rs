//! Training objectives and the training loop.
//!
//! `pc_objective` evaluates the log joint at the MAP point.
//! `lmc_objective` and `almc_objective` average the log joint (and its
//! parameter gradients) over `K` draws from the Laplace-optimal posterior:
//! jointly from the full Hessian factor for LMC, independently per layer
//! from the block factors for ALMC. `combined_objective` holds designated
//! layers at their MAP values while sampling the rest. Parameter updates
//! are plain SGD with momentum, ascending the objective, with learned
//! variances clamped after every step.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::{batches, Dataset};
use crate::evaluate::{track_curvature, CurvatureKind};
use crate::hessian::{block_hessian, block_hessian_for, full_hessian, full_hessian_over, FullHessian, HessianBlocks};
use crate::inference::{map_inference, Amortizer, InferenceConfig};
use crate::model::{
    grad_log_joint_params, log_joint, GenerativeModel, LatentState, ParamGrads,
};
use crate::numerics::{sample_mvn_from_precision, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Pc,
    Lmc,
    Almc,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::Pc => "pc",
            ObjectiveKind::Lmc => "lmc",
            ObjectiveKind::Almc => "almc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pc" => Ok(ObjectiveKind::Pc),
            "lmc" => Ok(ObjectiveKind::Lmc),
            "almc" => Ok(ObjectiveKind::Almc),
            other => Err(Error::Config(format!("unknown objective '{other}' (expected pc|lmc|almc)"))),
        }
    }
}

/// Objective value and the parameter gradients that go with it.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grads: ParamGrads,
}

/// Standard predictive coding: log joint and gradients at the MAP point.
pub fn pc_objective(model: &GenerativeModel, z_map: &LatentState, x: &[f64]) -> Result<ObjectiveEval> {
    let value = log_joint(model, z_map, x)?;
    let grads = grad_log_joint_params(model, z_map, x);
    Ok(ObjectiveEval { value, grads })
}

/// Which Laplace posterior the Monte Carlo objectives sample from.
#[derive(Debug, Clone, Copy)]
pub enum LaplacePosterior<'a> {
    /// Joint draw over the concatenated coordinates of the covered layers.
    Joint(&'a FullHessian),
    /// Independent per-layer draws from the block factors.
    Factored(&'a HessianBlocks),
}

/// Monte Carlo objective: average the log joint and parameter gradients
/// over `k` posterior draws centered at the MAP state. Layers not covered
/// by the posterior stay at their MAP values (a Dirac delta). Samples are
/// treated as constants; no gradient flows into the Hessian.
pub fn sampled_objective(
    model: &GenerativeModel,
    z_map: &LatentState,
    x: &[f64],
    posterior: LaplacePosterior<'_>,
    k: usize,
    temp: f64,
    rng: &mut Rng,
) -> Result<ObjectiveEval> {
    if k < 1 {
        return Err(Error::Config("sample count K must be at least 1".into()));
    }
    let mut value = 0.0;
    let mut grads = ParamGrads::zeros_like(model);
    for _ in 0..k {
        let mut zs = z_map.clone();
        match posterior {
            LaplacePosterior::Joint(he) => {
                let mean: Vec<f64> = he.layers().iter().flat_map(|&j| z_map.z[j].iter().copied()).collect();
                let draw = sample_mvn_from_precision(&mean, he.factor(), temp, rng);
                let mut off = 0;
                for &j in he.layers() {
                    let d = zs.z[j].len();
                    zs.z[j].copy_from_slice(&draw[off..off + d]);
                    off += d;
                }
            }
            LaplacePosterior::Factored(blocks) => {
                for (&j, factor) in blocks.layers().iter().zip(blocks.factors()) {
                    zs.z[j] = sample_mvn_from_precision(&z_map.z[j], factor, temp, rng);
                }
            }
        }
        value += log_joint(model, &zs, x)?;
        grads.add_scaled(&grad_log_joint_params(model, &zs, x), 1.0);
    }
    let inv_k = 1.0 / k as f64;
    grads.scale(inv_k);
    Ok(ObjectiveEval { value: value * inv_k, grads })
}

/// Laplace Monte Carlo objective with the full (or identity-fallback)
/// Hessian posterior.
pub fn lmc_objective(
    model: &GenerativeModel,
    z_map: &LatentState,
    x: &[f64],
    he: &FullHessian,
    k: usize,
    rng: &mut Rng,
) -> Result<ObjectiveEval> {
    sampled_objective(model, z_map, x, LaplacePosterior::Joint(he), k, 1.0, rng)
}

/// Approximate LMC: per-layer independent draws from the block factors.
pub fn almc_objective(
    model: &GenerativeModel,
    z_map: &LatentState,
    x: &[f64],
    blocks: &HessianBlocks,
    k: usize,
    rng: &mut Rng,
) -> Result<ObjectiveEval> {
    sampled_objective(model, z_map, x, LaplacePosterior::Factored(blocks), k, 1.0, rng)
}

/// Combined objective: layers in `pc_layers` stay at their MAP values while
/// the remaining layers are sampled from `blocks_upper`, which must not
/// cover any PC layer, so when the bottom layer is PC its block (and with
/// it the observation-dimension Jacobian) is never materialized.
pub fn combined_objective(
    model: &GenerativeModel,
    z_map: &LatentState,
    x: &[f64],
    blocks_upper: &HessianBlocks,
    k: usize,
    rng: &mut Rng,
    pc_layers: &std::collections::BTreeSet<usize>,
) -> Result<ObjectiveEval> {
    if blocks_upper.layers().iter().any(|l| pc_layers.contains(l)) {
        return Err(Error::Config("combined objective: blocks must exclude PC layers".into()));
    }
    sampled_objective(model, z_map, x, LaplacePosterior::Factored(blocks_upper), k, 1.0, rng)
}

/// SGD-with-momentum state; velocity buffers mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    vel_w: Vec<Matrix>,
    vel_b: Vec<Vec<f64>>,
    vel_lv: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &GenerativeModel, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            vel_w: model.layers().iter().map(|l| Matrix::zeros(l.out_dim, l.in_dim)).collect(),
            vel_b: model.layers().iter().map(|l| vec![0.0; l.out_dim]).collect(),
            vel_lv: model.layers().iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }
}

/// Ascent step: `v ← momentum·v + g`, `param ← param + lr·v`. Learned
/// variances are clamped afterwards; log-variance gradients are ignored in
/// fixed-variance mode. Tensors with non-finite gradients are skipped with
/// a warning; returns how many were skipped.
pub fn sgd_momentum_step(
    model: &mut GenerativeModel,
    grads: &ParamGrads,
    opt: &mut OptimizerState,
) -> usize {
    let learned = model.variance_mode().is_learned();
    let mut skipped = 0usize;
    let n_layers = model.num_latent_layers();
    let (lr, momentum) = (opt.lr, opt.momentum);
    let (weights, biases, log_vars) = model.params_mut();
    for e in 0..n_layers {
        if grads.weights[e].data().iter().all(|v| v.is_finite()) {
            let vw = &mut opt.vel_w[e];
            for i in 0..vw.rows() {
                for j in 0..vw.cols() {
                    let v = momentum * vw.get(i, j) + grads.weights[e].get(i, j);
                    vw.set(i, j, v);
                    weights[e].set(i, j, weights[e].get(i, j) + lr * v);
                }
            }
        } else {
            skipped += 1;
            log::warn!("skipping weight update for edge {e}: non-finite gradient");
        }
        if grads.biases[e].iter().all(|v| v.is_finite()) {
            for (i, g) in grads.biases[e].iter().enumerate() {
                let v = momentum * opt.vel_b[e][i] + g;
                opt.vel_b[e][i] = v;
                biases[e][i] += lr * v;
            }
        } else {
            skipped += 1;
            log::warn!("skipping bias update for edge {e}: non-finite gradient");
        }
        if learned {
            if grads.log_vars[e].iter().all(|v| v.is_finite()) {
                for (i, g) in grads.log_vars[e].iter().enumerate() {
                    let v = momentum * opt.vel_lv[e][i] + g;
                    opt.vel_lv[e][i] = v;
                    log_vars[e][i] += lr * v;
                }
            } else {
                skipped += 1;
                log::warn!("skipping log-variance update for edge {e}: non-finite gradient");
            }
        }
    }
    model.clamp_variances();
    skipped
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub combined: bool,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub amortizer_lr: f64,
    pub amortizer_momentum: f64,
    pub inference: InferenceConfig,
    /// How many bottom latent layers use the PC (Dirac delta) posterior in
    /// combined mode.
    pub pc_layer_count: usize,
    /// Which Hessian's log-determinant to track on held-out data.
    pub curvature: CurvatureKind,
    /// Cap on held-out samples used for curvature tracking per epoch.
    pub curvature_samples: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, model: &GenerativeModel) -> Result<()> {
        self.inference.validate()?;
        if self.k < 1 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.objective == ObjectiveKind::Pc && self.combined {
            return Err(Error::Config(
                "combined mode does not apply to the PC objective (it would change nothing)".into(),
            ));
        }
        if self.pc_layer_count > model.num_latent_layers() {
            return Err(Error::Config(format!(
                "pc_layer_count {} exceeds the {} latent layers",
                self.pc_layer_count,
                model.num_latent_layers()
            )));
        }
        Ok(())
    }

    /// Latent layers sampled by the objective under this configuration.
    fn sampled_layers(&self, model: &GenerativeModel) -> Vec<usize> {
        let n = model.num_latent_layers();
        if self.combined {
            (0..n.saturating_sub(self.pc_layer_count)).collect()
        } else {
            (0..n).collect()
        }
    }
}

/// One row of the per-epoch metrics history.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub objective: ObjectiveKind,
    pub mean_objective: f64,
    pub heldout_logdet_mean: f64,
    pub psd_fallback_rate: f64,
    pub wall_seconds: f64,
}

struct SampleResult {
    eval: ObjectiveEval,
    z_map: LatentState,
    fallback: bool,
}

fn run_sample(
    model: &GenerativeModel,
    am: &Amortizer,
    x: &[f64],
    cfg: &TrainConfig,
    sampled: &[usize],
    rng: &mut Rng,
) -> Result<SampleResult> {
    let init = am.init_state(x);
    let outcome = map_inference(model, x, &init, &cfg.inference)?;
    let z_map = outcome.state;
    let mut fallback = false;
    let eval = match (cfg.objective, cfg.combined) {
        (ObjectiveKind::Pc, _) => pc_objective(model, &z_map, x)?,
        (ObjectiveKind::Lmc, false) => {
            let he = full_hessian(model, &z_map, x)?;
            fallback = he.fallback();
            lmc_objective(model, &z_map, x, &he, cfg.k, rng)?
        }
        (ObjectiveKind::Lmc, true) => {
            let he = full_hessian_over(model, &z_map, x, sampled)?;
            fallback = he.fallback();
            sampled_objective(model, &z_map, x, LaplacePosterior::Joint(&he), cfg.k, 1.0, rng)?
        }
        (ObjectiveKind::Almc, false) => {
            let blocks = block_hessian(model, &z_map)?;
            almc_objective(model, &z_map, x, &blocks, cfg.k, rng)?
        }
        (ObjectiveKind::Almc, true) => {
            let blocks = block_hessian_for(model, &z_map, sampled)?;
            let pc: std::collections::BTreeSet<usize> = (0..model.num_latent_layers())
                .filter(|l| !sampled.contains(l))
                .collect();
            combined_objective(model, &z_map, x, &blocks, cfg.k, rng, &pc)?
        }
    };
    Ok(SampleResult { eval, z_map, fallback })
}

// Stream ids for deriving independent per-purpose rngs from the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DEQUANT: u64 = 2;
const STREAM_SAMPLE: u64 = 3;

/// Full training loop. Per batch: amortizer initialization → MAP inference
/// → objective evaluation → one SGD-momentum step on the averaged gradients
/// → amortizer updates. Deterministic given `cfg.seed`: every sample draws
/// from its own derived stream and reductions run in a fixed order, so the
/// trajectory does not depend on thread count.
///
/// `on_epoch` runs after each epoch's metrics row is assembled (for
/// checkpointing and metric streaming).
pub fn train(
    model: &mut GenerativeModel,
    am: &mut Amortizer,
    data: &Dataset,
    train_idx: &[usize],
    heldout_idx: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&GenerativeModel, &Amortizer, &MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate(model)?;
    if train_idx.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let root = Rng::new(cfg.seed);
    let sampled = cfg.sampled_layers(model);
    let mut opt = OptimizerState::new(model, cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);

    // Held-out observations use the evaluation noise stream, fixed across
    // epochs so curvature numbers are comparable.
    let heldout: Vec<Vec<f64>> = if heldout_idx.is_empty() {
        Vec::new()
    } else {
        let capped: Vec<usize> =
            heldout_idx.iter().copied().take(cfg.curvature_samples.max(1)).collect();
        crate::data::realize_for_eval(data, &capped, cfg.eval_seed)?
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut dequant_rng = root.stream2(STREAM_DEQUANT, epoch as u64);
        let realized = data.realize(train_idx, &mut dequant_rng)?;
        let mut shuffle_rng = root.stream2(STREAM_SHUFFLE, epoch as u64);
        let blocks_of_indices = batches(train_idx.len(), cfg.batch_size, &mut shuffle_rng)?;

        let mut objective_sum = 0.0;
        let mut fallback_count = 0usize;
        let mut seen = 0usize;
        for block in &blocks_of_indices {
            let model_ref: &GenerativeModel = model;
            let am_ref: &Amortizer = am;
            let results: Vec<Result<SampleResult>> = block
                .par_iter()
                .enumerate()
                .map(|(pos, &local)| {
                    let counter = (epoch * train_idx.len() + seen + pos) as u64;
                    let mut rng = root.stream2(STREAM_SAMPLE, counter);
                    run_sample(model_ref, am_ref, &realized[local], cfg, &sampled, &mut rng)
                        .map_err(|e| {
                            Error::Eval(format!(
                                "epoch {epoch}, sample {local}: {e}"
                            ))
                        })
                })
                .collect();
            let mut batch_grads = ParamGrads::zeros_like(model);
            let mut z_maps = Vec::with_capacity(block.len());
            for r in results {
                let r = r?;
                objective_sum += r.eval.value;
                fallback_count += r.fallback as usize;
                batch_grads.add_scaled(&r.eval.grads, 1.0);
                z_maps.push(r.z_map);
            }
            batch_grads.scale(1.0 / block.len() as f64);
            sgd_momentum_step(model, &batch_grads, &mut opt);
            for (&local, z_map) in block.iter().zip(&z_maps) {
                am.update(&realized[local], z_map, cfg.amortizer_lr, cfg.amortizer_momentum);
            }
            seen += block.len();
        }

        let (heldout_logdet_mean, _fallback_rate_heldout) = if heldout.is_empty() {
            (0.0, 0.0)
        } else {
            let report = track_curvature(model, &heldout, &cfg.inference, cfg.curvature)?;
            (report.mean_log_det, report.fallback_rate)
        };
        let row = MetricsRow {
            epoch,
            objective: cfg.objective,
            mean_objective: objective_sum / train_idx.len() as f64,
            heldout_logdet_mean,
            psd_fallback_rate: fallback_count as f64 / train_idx.len() as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(model, am, &row)?;
        history.push(row);
    }
    Ok(history)
}

/// Write metrics rows as the standard CSV
/// (`epoch,objective_kind,mean_objective,heldout_logdet_mean,psd_fallback_rate,wall_seconds`).
pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,objective_kind,mean_objective,heldout_logdet_mean,psd_fallback_rate,wall_seconds")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:?},{:?},{:?},{:.3}",
            r.epoch, r.objective.as_str(), r.mean_objective, r.heldout_logdet_mean, r.psd_fallback_rate, r.wall_seconds
        )?;
    }
    Ok(())
}
