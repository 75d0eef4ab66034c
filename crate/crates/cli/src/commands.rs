//! The five subcommands: train, eval, sample, interp, hessian-check.
//!
//! Every run writes into one output directory: `config.resolved`,
//! `metrics.csv`, `eval.csv`, `checkpoints/`, `images/`, and (for
//! hessian-check) `hessian/` CSV dumps.

use std::io::Write;
use std::path::{Path, PathBuf};

use lpc_core::checkpoint::{load_checkpoint, save_checkpoint};
use lpc_core::data::{
    load_idx, load_tensor, make_synthetic, realize_for_eval, Dataset, SplitTag, SyntheticTruth,
};
use lpc_core::evaluate::{
    ancestral_sample, bits_per_dim, default_temps, evaluate_dataset, interpolate, write_eval_csv,
    write_pgm,
};
use lpc_core::hessian::{block_hessian, full_hessian};
use lpc_core::inference::{map_inference, write_trace_csv, Amortizer};
use lpc_core::model::{GenerativeModel, LatentState, LayerSpec};
use lpc_core::numerics::{min_eigenvalue, Rng};
use lpc_core::objectives::{train, MetricsRow, TrainConfig};

use crate::config::{DataKind, Resolved, SkipPolicy};
use crate::CliError;

// Stream ids for evaluation-time randomness derived from eval_seed.
const STREAM_IS: u64 = 5;
const STREAM_SAMPLE_CMD: u64 = 7;

fn resolve_out_dir(cfg: &Resolved) -> Result<PathBuf, CliError> {
    if let Some(p) = &cfg.out_dir {
        return Ok(p.clone());
    }
    if let Ok(env) = std::env::var("LPC_OUT_DIR") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    Err(CliError::Config(
        "no output directory: pass --out, set out_dir in the config, or set LPC_OUT_DIR".into(),
    ))
}

fn prepare_out_dir(cfg: &Resolved) -> Result<PathBuf, CliError> {
    let out = resolve_out_dir(cfg)?;
    std::fs::create_dir_all(&out).map_err(lpc_core::Error::Io)?;
    std::fs::write(out.join("config.resolved"), cfg.echo()).map_err(lpc_core::Error::Io)?;
    Ok(out)
}

/// Load the configured dataset, apply `limit`, and tag the holdout split.
fn load_dataset(cfg: &Resolved) -> Result<(Dataset, Option<SyntheticTruth>), CliError> {
    let kind = cfg
        .data
        .ok_or_else(|| CliError::MissingInput("field 'data' is required (idx|synthetic|tensor)".into()))?;
    let (mut data, truth) = match kind {
        DataKind::Idx => {
            let images = cfg
                .idx_images
                .as_ref()
                .ok_or_else(|| CliError::MissingInput("field 'idx_images' is required for data = idx".into()))?;
            if !images.exists() {
                return Err(CliError::MissingInput(format!(
                    "field 'idx_images': file '{}' does not exist",
                    images.display()
                )));
            }
            (load_idx(images, cfg.idx_labels.as_deref())?, None)
        }
        DataKind::Tensor => {
            let path = cfg
                .tensor_path
                .as_ref()
                .ok_or_else(|| CliError::MissingInput("field 'tensor_path' is required for data = tensor".into()))?;
            if !path.exists() {
                return Err(CliError::MissingInput(format!(
                    "field 'tensor_path': file '{}' does not exist",
                    path.display()
                )));
            }
            (load_tensor(path)?, None)
        }
        DataKind::Synthetic => {
            let spec = cfg.synthetic_spec();
            let mut rng = Rng::new(spec.seed());
            let (d, t) = make_synthetic(&spec, &mut rng)?;
            (d, Some(t))
        }
    };
    if cfg.limit > 0 && cfg.limit < data.len() {
        match &mut data.samples {
            lpc_core::data::Samples::Quantized(v) => v.truncate(cfg.limit),
            lpc_core::data::Samples::Real(v) => v.truncate(cfg.limit),
        }
        data.splits.truncate(cfg.limit);
        if let Some(l) = &mut data.labels {
            l.truncate(cfg.limit);
        }
    }
    if cfg.holdout > 0 {
        data.tag_holdout(cfg.holdout)?;
    }
    Ok((data, truth))
}

fn build_model(cfg: &Resolved, obs_dim: usize, rng: &mut Rng) -> Result<GenerativeModel, CliError> {
    let mut dims = cfg.latent_dims.clone();
    dims.push(obs_dim);
    let mut layers = Vec::new();
    for e in 0..dims.len() - 1 {
        let skip = cfg.skip == SkipPolicy::Auto && dims[e] == dims[e + 1];
        layers.push(LayerSpec::new(dims[e], dims[e + 1], cfg.activation, skip)?);
    }
    Ok(GenerativeModel::new(layers, cfg.variance_mode, rng)?)
}

fn image_geometry(cfg: &Resolved, d: usize) -> (usize, usize) {
    if cfg.image_width > 0 && cfg.image_height > 0 && cfg.image_width * cfg.image_height == d {
        return (cfg.image_width, cfg.image_height);
    }
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        (side, side)
    } else {
        (d, 1)
    }
}

fn eval_indices(data: &Dataset) -> Vec<usize> {
    let val = data.indices(SplitTag::Val);
    if val.is_empty() {
        (0..data.len()).collect()
    } else {
        val
    }
}

fn load_model(path: &Path) -> Result<(GenerativeModel, Option<Amortizer>), CliError> {
    if !path.exists() {
        return Err(CliError::MissingInput(format!("checkpoint '{}' does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn check_dims(model: &GenerativeModel, data: &Dataset) -> Result<(), CliError> {
    if model.obs_dim() != data.dim {
        return Err(CliError::DimMismatch(format!(
            "checkpoint expects observations of dim {}, dataset has dim {}",
            model.obs_dim(),
            data.dim
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &Resolved) -> Result<(), CliError> {
    let out = prepare_out_dir(cfg)?;
    std::fs::create_dir_all(out.join("checkpoints")).map_err(lpc_core::Error::Io)?;
    let (data, truth) = load_dataset(cfg)?;
    let train_idx = data.indices(SplitTag::Train);
    let heldout_idx = data.indices(SplitTag::Val);
    if train_idx.is_empty() {
        return Err(CliError::Config("no training samples left after holdout".into()));
    }

    let root = Rng::new(cfg.seed);
    let mut model = build_model(cfg, data.dim, &mut root.stream(100))?;
    let mut am = Amortizer::for_model(&model, &mut root.stream(101));

    let tc = TrainConfig {
        objective: cfg.objective,
        combined: cfg.combined,
        k: cfg.k,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        amortizer_lr: cfg.amortizer_lr,
        amortizer_momentum: cfg.amortizer_momentum,
        inference: cfg.inference(),
        pc_layer_count: cfg.pc_layers,
        curvature: cfg.curvature,
        curvature_samples: cfg.curvature_samples,
        seed: cfg.seed,
        eval_seed: cfg.eval_seed,
    };

    let metrics_path = out.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path).map_err(lpc_core::Error::Io)?);
    writeln!(metrics, "epoch,objective_kind,mean_objective,heldout_logdet_mean,psd_fallback_rate,wall_seconds")
        .map_err(lpc_core::Error::Io)?;

    let trace_probe: Option<Vec<f64>> = if cfg.trace {
        std::fs::create_dir_all(out.join("traces")).map_err(lpc_core::Error::Io)?;
        let idx = heldout_idx.first().or_else(|| train_idx.first()).copied().unwrap();
        Some(realize_for_eval(&data, &[idx], cfg.eval_seed)?.remove(0))
    } else {
        None
    };

    let infer_cfg = cfg.inference();
    train(&mut model, &mut am, &data, &train_idx, &heldout_idx, &tc, |m, a, row: &MetricsRow| {
        writeln!(
            metrics,
            "{},{},{:?},{:?},{:?},{:.3}",
            row.epoch,
            row.objective.as_str(),
            row.mean_objective,
            row.heldout_logdet_mean,
            row.psd_fallback_rate,
            row.wall_seconds
        )?;
        metrics.flush()?;
        save_checkpoint(&out.join(format!("checkpoints/epoch_{:03}.ckpt", row.epoch)), m, Some(a))?;
        if let Some(x) = &trace_probe {
            let outcome = map_inference(m, x, &a.init_state(x), &infer_cfg)?;
            write_trace_csv(&out.join(format!("traces/epoch_{:03}.csv", row.epoch)), &outcome.trace)?;
        }
        println!(
            "epoch {:>3}  objective {:<4}  mean {:>12.4}  heldout logdet {:>12.4}  fallback {:.3}  {:.1}s",
            row.epoch,
            row.objective.as_str(),
            row.mean_objective,
            row.heldout_logdet_mean,
            row.psd_fallback_rate,
            row.wall_seconds
        );
        Ok(())
    })?;

    // Final evaluation on the holdout (or the full set when none was
    // reserved).
    let idx = eval_indices(&data);
    let xs = realize_for_eval(&data, &idx, cfg.eval_seed)?;
    let report = evaluate_dataset(&model, &xs, cfg.eval_s, &cfg.inference(), &Rng::new(cfg.eval_seed).stream(STREAM_IS))?;
    write_eval_csv(&out.join("eval.csv"), &report)?;
    println!(
        "final eval: mean_bpd {:.4} ± {:.4}, mean logdet He {:.4}, fallback rate {:.3} ({} samples, S={})",
        report.mean_bpd,
        report.bpd_stderr,
        report.mean_logdet_he,
        report.psd_fallback_rate,
        report.n_samples,
        report.importance_samples
    );
    if let Some(SyntheticTruth::Chain(chain)) = &truth {
        let exact = chain.mean_log_marginal(&xs);
        println!("exact data marginal (reference): bpd {:.4}", bits_per_dim(exact, data.dim));
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &Resolved,
    checkpoint: &Path,
    s_override: Option<usize>,
    exact_marginal: bool,
) -> Result<(), CliError> {
    let out = prepare_out_dir(cfg)?;
    let (model, _) = load_model(checkpoint)?;
    let (data, truth) = load_dataset(cfg)?;
    check_dims(&model, &data)?;
    let s = s_override.unwrap_or(cfg.eval_s);
    let idx = eval_indices(&data);
    let xs = realize_for_eval(&data, &idx, cfg.eval_seed)?;
    let report = evaluate_dataset(&model, &xs, s, &cfg.inference(), &Rng::new(cfg.eval_seed).stream(STREAM_IS))?;
    write_eval_csv(&out.join("eval.csv"), &report)?;
    println!(
        "estimated_bpd={:.6} stderr={:.6} mean_logdet_he={:.6} psd_fallback_rate={:.4} n={} S={}",
        report.mean_bpd,
        report.bpd_stderr,
        report.mean_logdet_he,
        report.psd_fallback_rate,
        report.n_samples,
        report.importance_samples
    );
    if exact_marginal {
        let Some(truth) = truth else {
            return Err(CliError::Config(
                "--exact-marginal requires synthetic data with a known marginal".into(),
            ));
        };
        let exact_bpd = xs
            .iter()
            .map(|x| bits_per_dim(truth.log_marginal(x), data.dim))
            .sum::<f64>()
            / xs.len() as f64;
        println!(
            "exact_bpd={:.6} delta={:.6}",
            exact_bpd,
            (report.mean_bpd - exact_bpd).abs()
        );
    }
    Ok(())
}

pub fn cmd_sample(
    cfg: &Resolved,
    checkpoint: &Path,
    n: usize,
    temps_arg: Option<&str>,
) -> Result<(), CliError> {
    let out = prepare_out_dir(cfg)?;
    std::fs::create_dir_all(out.join("images")).map_err(lpc_core::Error::Io)?;
    let (model, _) = load_model(checkpoint)?;
    let temps: Vec<f64> = match temps_arg {
        None => default_temps(&model),
        Some(s) => s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("--temps: expected numbers, got '{t}'")))
            })
            .collect::<Result<_, _>>()?,
    };
    let (w, h) = image_geometry(cfg, model.obs_dim());
    let root = Rng::new(cfg.seed);
    for i in 0..n {
        let mut rng = root.stream2(STREAM_SAMPLE_CMD, i as u64);
        let obs = ancestral_sample(&model, &temps, &mut rng)?;
        write_pgm(&obs, w, h, &out.join(format!("images/sample_{i:03}.pgm")))?;
    }
    println!("wrote {n} samples ({w}x{h}) to {}", out.join("images").display());
    Ok(())
}

pub fn cmd_interp(
    cfg: &Resolved,
    checkpoint: &Path,
    a_idx: usize,
    b_idx: usize,
    layer: usize,
    steps: usize,
) -> Result<(), CliError> {
    let out = prepare_out_dir(cfg)?;
    std::fs::create_dir_all(out.join("images")).map_err(lpc_core::Error::Io)?;
    let (model, am) = load_model(checkpoint)?;
    let Some(am) = am else {
        return Err(CliError::Config(
            "checkpoint has no amortizer; interpolation needs one (train writes it automatically)".into(),
        ));
    };
    let (data, _) = load_dataset(cfg)?;
    check_dims(&model, &data)?;
    if a_idx >= data.len() || b_idx >= data.len() {
        return Err(CliError::Config(format!(
            "sample indices {a_idx},{b_idx} out of range (dataset has {} samples)",
            data.len()
        )));
    }
    let xs = realize_for_eval(&data, &[a_idx, b_idx], cfg.eval_seed)?;
    let frames = interpolate(&model, &am, &xs[0], &xs[1], layer, steps, &cfg.inference())?;
    let (w, h) = image_geometry(cfg, model.obs_dim());
    for (k, frame) in frames.iter().enumerate() {
        write_pgm(frame, w, h, &out.join(format!("images/interp_{k:02}.pgm")))?;
    }
    println!("wrote {} interpolation frames at layer {layer} to {}", frames.len(), out.join("images").display());
    Ok(())
}

pub fn cmd_hessian_check(cfg: &Resolved, checkpoint: &Path, n_samples: usize) -> Result<(), CliError> {
    let out = prepare_out_dir(cfg)?;
    let hess_dir = out.join("hessian");
    std::fs::create_dir_all(&hess_dir).map_err(lpc_core::Error::Io)?;
    let (model, _) = load_model(checkpoint)?;
    let (data, _) = load_dataset(cfg)?;
    check_dims(&model, &data)?;
    let idx: Vec<usize> = eval_indices(&data).into_iter().take(n_samples.max(1)).collect();
    let xs = realize_for_eval(&data, &idx, cfg.eval_seed)?;
    let infer_cfg = cfg.inference();
    let is_leaky = matches!(model.layers()[0].activation, lpc_core::model::ActivationKind::LeakyRelu { .. });

    let mut stats = std::io::BufWriter::new(
        std::fs::File::create(hess_dir.join("psd_stats.csv")).map_err(lpc_core::Error::Io)?,
    );
    writeln!(stats, "sample,fallback,min_eig_full,logdet_full,logdet_blocks,max_block_diff,near_kink")
        .map_err(lpc_core::Error::Io)?;

    let mut fallbacks = 0usize;
    let mut max_diff_away = 0.0f64;
    let mut away_count = 0usize;
    for (i, x) in xs.iter().enumerate() {
        let outcome = map_inference(&model, x, &LatentState::zeros(&model), &infer_cfg)?;
        let blocks = block_hessian(&model, &outcome.state)?;
        let full = full_hessian(&model, &outcome.state, x)?;
        fallbacks += full.fallback() as usize;

        write_matrix_csv(&hess_dir.join(format!("full_{i:03}.csv")), full.matrix())?;
        for (j, b) in blocks.blocks().iter().enumerate() {
            write_matrix_csv(&hess_dir.join(format!("blocks_{i:03}_l{j}.csv")), b)?;
        }

        let near_kink = is_leaky
            && outcome.state.z.iter().flatten().any(|v| v.abs() < 1e-3);
        let mut max_diff = 0.0f64;
        let mut off = 0usize;
        for b in blocks.blocks() {
            for r in 0..b.n() {
                for c in 0..b.n() {
                    max_diff = max_diff.max((b.get(r, c) - full.matrix().get(off + r, off + c)).abs());
                }
            }
            off += b.n();
        }
        if is_leaky && !near_kink && !full.fallback() {
            max_diff_away = max_diff_away.max(max_diff);
            away_count += 1;
        }
        writeln!(
            stats,
            "{i},{},{:?},{:?},{:?},{:?},{}",
            full.fallback(),
            min_eigenvalue(full.matrix()),
            full.log_det(),
            blocks.log_det_total(),
            max_diff,
            near_kink
        )
        .map_err(lpc_core::Error::Io)?;
    }
    println!(
        "hessian-check: {} samples, {} identity fallbacks; max |block - full diagonal block| away from kinks: {:.3e} over {} samples",
        xs.len(),
        fallbacks,
        max_diff_away,
        away_count
    );
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &lpc_core::numerics::SymMatrix) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(lpc_core::Error::Io)?);
    for i in 0..m.n() {
        let row: Vec<String> = (0..m.n()).map(|j| format!("{:?}", m.get(i, j))).collect();
        writeln!(f, "{}", row.join(",")).map_err(lpc_core::Error::Io)?;
    }
    Ok(())
}
