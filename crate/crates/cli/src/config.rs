//! Flat `key = value` run configuration with typed schema validation.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored.
//! Unknown keys, malformed values, and invalid combinations are reported
//! with the offending line or field. Presets expand before the file and
//! command-line flags are applied, and the fully resolved configuration is
//! echoed back out in the same format (`config.resolved`), which parses to
//! an identical run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lpc_core::data::SyntheticSpec;
use lpc_core::evaluate::CurvatureKind;
use lpc_core::inference::InferenceConfig;
use lpc_core::model::{ActivationKind, VarianceMode};
use lpc_core::objectives::ObjectiveKind;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipPolicy {
    /// Skip connections wherever adjacent layers share a dimension.
    Auto,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Idx,
    Synthetic,
    Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    LinearGaussianChain,
    MixtureOfGaussians,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub objective: ObjectiveKind,
    pub combined: bool,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub amortizer_lr: f64,
    pub amortizer_momentum: f64,
    pub seed: u64,
    pub eval_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub threads: usize,
    pub eval_s: usize,
    pub curvature: CurvatureKind,
    pub curvature_samples: usize,
    pub pc_layers: usize,
    pub trace: bool,

    pub inference_steps: usize,
    pub inference_step_size: f64,
    pub shrink_factor: f64,
    pub min_step: f64,
    pub variance_coupled_rescale: bool,

    pub latent_dims: Vec<usize>,
    pub activation: ActivationKind,
    pub skip: SkipPolicy,
    pub variance_mode: VarianceMode,

    pub data: Option<DataKind>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub tensor_path: Option<PathBuf>,
    pub holdout: usize,
    pub limit: usize,
    pub synthetic_kind: SyntheticKind,
    pub synthetic_dims: Vec<usize>,
    pub weight_scale: f64,
    pub noise_scale: f64,
    pub n_samples: usize,
    pub data_seed: u64,
    pub components: usize,
    pub mixture_dim: usize,

    pub image_width: usize,
    pub image_height: usize,
}

impl Resolved {
    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            steps: self.inference_steps,
            step_size: self.inference_step_size,
            shrink_factor: self.shrink_factor,
            min_step: self.min_step,
            variance_coupled_rescale: self.variance_coupled_rescale,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        match self.synthetic_kind {
            SyntheticKind::LinearGaussianChain => SyntheticSpec::LinearGaussianChain {
                dims: self.synthetic_dims.clone(),
                weight_scale: self.weight_scale,
                noise_scale: self.noise_scale,
                n_samples: self.n_samples,
                seed: self.data_seed,
            },
            SyntheticKind::MixtureOfGaussians => SyntheticSpec::MixtureOfGaussians {
                components: self.components,
                dim: self.mixture_dim,
                n_samples: self.n_samples,
                seed: self.data_seed,
            },
        }
    }

    /// Echo in the flat key=value format; parsing the result reproduces
    /// this configuration exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("activation", match self.activation {
            ActivationKind::LeakyRelu { .. } => "leaky_relu".into(),
            ActivationKind::Tanh => "tanh".into(),
        });
        put("amortizer_lr", format!("{:?}", self.amortizer_lr));
        put("amortizer_momentum", format!("{:?}", self.amortizer_momentum));
        put("batch_size", self.batch_size.to_string());
        put("combined", self.combined.to_string());
        put("components", self.components.to_string());
        put("curvature", match self.curvature {
            CurvatureKind::Full => "full".into(),
            CurvatureKind::Blocks => "blocks".into(),
        });
        put("curvature_samples", self.curvature_samples.to_string());
        if let Some(d) = self.data {
            put("data", match d {
                DataKind::Idx => "idx".into(),
                DataKind::Synthetic => "synthetic".into(),
                DataKind::Tensor => "tensor".into(),
            });
        }
        put("data_seed", self.data_seed.to_string());
        put("epochs", self.epochs.to_string());
        put("eval_s", self.eval_s.to_string());
        put("eval_seed", self.eval_seed.to_string());
        put("fixed_variance", match self.variance_mode {
            VarianceMode::Fixed { value } => format!("{value:?}"),
            VarianceMode::Learned { .. } => "1.0".into(),
        });
        put("holdout", self.holdout.to_string());
        if let Some(p) = &self.idx_images {
            put("idx_images", p.display().to_string());
        }
        if let Some(p) = &self.idx_labels {
            put("idx_labels", p.display().to_string());
        }
        put("image_height", self.image_height.to_string());
        put("image_width", self.image_width.to_string());
        put("inference_step_size", format!("{:?}", self.inference_step_size));
        put("inference_steps", self.inference_steps.to_string());
        put("k", self.k.to_string());
        put(
            "latent_dims",
            self.latent_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "),
        );
        if let ActivationKind::LeakyRelu { slope } = self.activation {
            put("leaky_slope", format!("{slope:?}"));
        }
        put("limit", self.limit.to_string());
        put("lr", format!("{:?}", self.lr));
        put("min_step", format!("{:?}", self.min_step));
        put("momentum", format!("{:?}", self.momentum));
        put("n_samples", self.n_samples.to_string());
        put("mixture_dim", self.mixture_dim.to_string());
        put("noise_scale", format!("{:?}", self.noise_scale));
        put("objective", self.objective.as_str().to_string());
        if let Some(p) = &self.out_dir {
            put("out_dir", p.display().to_string());
        }
        put("pc_layers", self.pc_layers.to_string());
        put("seed", self.seed.to_string());
        put("shrink_factor", format!("{:?}", self.shrink_factor));
        put("skip", match self.skip {
            SkipPolicy::Auto => "auto".into(),
            SkipPolicy::None => "none".into(),
        });
        put("synthetic_dims", self.synthetic_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "));
        put("synthetic_kind", match self.synthetic_kind {
            SyntheticKind::LinearGaussianChain => "linear_gaussian_chain".into(),
            SyntheticKind::MixtureOfGaussians => "mixture_of_gaussians".into(),
        });
        if let Some(p) = &self.tensor_path {
            put("tensor_path", p.display().to_string());
        }
        put("threads", self.threads.to_string());
        put("trace", self.trace.to_string());
        put("variance_coupled_rescale", self.variance_coupled_rescale.to_string());
        put("variance_mode", if self.variance_mode.is_learned() { "learned".into() } else { "fixed".into() });
        put("weight_scale", format!("{:?}", self.weight_scale));
        s
    }
}

/// Command-line overrides applied after the preset and the file.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub objective: Option<ObjectiveKind>,
    pub combined: Option<bool>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

fn cfg_err(msg: String) -> CliError {
    CliError::Config(msg)
}

fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(cfg_err(format!("line {line_no}: expected 'key = value', got '{line}'")));
        };
        let key = k.trim().to_string();
        let val = v.trim().to_string();
        if key.is_empty() || val.is_empty() {
            return Err(cfg_err(format!("line {line_no}: empty key or value")));
        }
        out.push((line_no, key, val));
    }
    Ok(out)
}

struct Builder {
    r: Resolved,
    lr_set: bool,
    step_size_set: bool,
    amortizer_lr_set: bool,
    rescale_set: bool,
    leaky_slope: f64,
    fixed_variance: f64,
    variance_learned: bool,
    /// Whether `combined` came from an explicit source (file or flag)
    /// rather than a preset; explicit pc+combined is rejected, the
    /// preset-sourced combination is silently forced off.
    combined_explicit: bool,
}

impl Default for Builder {
    fn default() -> Self {
        Builder {
            r: Resolved {
                objective: ObjectiveKind::Pc,
                combined: false,
                k: 20,
                epochs: 10,
                batch_size: 64,
                lr: 0.0,
                momentum: 0.9,
                amortizer_lr: 0.0,
                amortizer_momentum: 0.9,
                seed: 0,
                eval_seed: 1,
                out_dir: None,
                threads: 0,
                eval_s: 512,
                curvature: CurvatureKind::Full,
                curvature_samples: 100,
                pc_layers: 1,
                trace: false,
                inference_steps: 150,
                inference_step_size: 0.0,
                shrink_factor: 0.9,
                min_step: 1e-5,
                variance_coupled_rescale: false,
                latent_dims: vec![10, 64, 64, 64, 64],
                activation: ActivationKind::Tanh,
                skip: SkipPolicy::Auto,
                variance_mode: VarianceMode::fixed(1.0),
                data: None,
                idx_images: None,
                idx_labels: None,
                tensor_path: None,
                holdout: 0,
                limit: 0,
                synthetic_kind: SyntheticKind::LinearGaussianChain,
                synthetic_dims: vec![3, 6, 10],
                weight_scale: 0.5,
                noise_scale: 0.3,
                n_samples: 512,
                data_seed: 1234,
                components: 4,
                mixture_dim: 8,
                image_width: 0,
                image_height: 0,
            },
            lr_set: false,
            step_size_set: false,
            amortizer_lr_set: false,
            rescale_set: false,
            leaky_slope: 0.01,
            fixed_variance: 1.0,
            variance_learned: false,
            combined_explicit: false,
        }
    }
}

fn parse_usize(v: &str, ctx: &str) -> Result<usize, CliError> {
    v.parse().map_err(|_| cfg_err(format!("{ctx}: expected a non-negative integer, got '{v}'")))
}

fn parse_u64(v: &str, ctx: &str) -> Result<u64, CliError> {
    v.parse().map_err(|_| cfg_err(format!("{ctx}: expected a non-negative integer, got '{v}'")))
}

fn parse_f64(v: &str, ctx: &str) -> Result<f64, CliError> {
    v.parse().map_err(|_| cfg_err(format!("{ctx}: expected a number, got '{v}'")))
}

fn parse_bool(v: &str, ctx: &str) -> Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(format!("{ctx}: expected true|false, got '{v}'"))),
    }
}

fn parse_dims(v: &str, ctx: &str) -> Result<Vec<usize>, CliError> {
    let dims: Vec<usize> = v
        .split_whitespace()
        .map(|t| parse_usize(t, ctx))
        .collect::<Result<_, _>>()?;
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(cfg_err(format!("{ctx}: dims must be positive integers")));
    }
    Ok(dims)
}

impl Builder {
    fn apply_preset(&mut self, preset: u8) -> Result<(), CliError> {
        match preset {
            1 => {
                self.r.activation = ActivationKind::LeakyRelu { slope: self.leaky_slope };
                self.variance_learned = true;
                self.r.combined = true;
            }
            2 => {
                self.r.activation = ActivationKind::Tanh;
                self.variance_learned = false;
                self.r.combined = true;
            }
            3 => {
                self.r.activation = ActivationKind::Tanh;
                self.variance_learned = false;
                self.r.combined = false;
            }
            other => return Err(cfg_err(format!("--preset must be 1, 2, or 3, got {other}"))),
        }
        Ok(())
    }

    fn apply_key(&mut self, line: usize, key: &str, val: &str) -> Result<(), CliError> {
        let ctx = format!("line {line}, field '{key}'");
        match key {
            "objective" => self.r.objective = ObjectiveKind::parse(val).map_err(|e| cfg_err(format!("{ctx}: {e}")))?,
            "combined" => {
                self.r.combined = parse_bool(val, &ctx)?;
                self.combined_explicit = true;
            }
            "k" => self.r.k = parse_usize(val, &ctx)?,
            "epochs" => self.r.epochs = parse_usize(val, &ctx)?,
            "batch_size" => self.r.batch_size = parse_usize(val, &ctx)?,
            "lr" => {
                self.r.lr = parse_f64(val, &ctx)?;
                self.lr_set = true;
            }
            "momentum" => self.r.momentum = parse_f64(val, &ctx)?,
            "amortizer_lr" => {
                self.r.amortizer_lr = parse_f64(val, &ctx)?;
                self.amortizer_lr_set = true;
            }
            "amortizer_momentum" => self.r.amortizer_momentum = parse_f64(val, &ctx)?,
            "seed" => self.r.seed = parse_u64(val, &ctx)?,
            "eval_seed" => self.r.eval_seed = parse_u64(val, &ctx)?,
            "out_dir" => self.r.out_dir = Some(PathBuf::from(val)),
            "threads" => self.r.threads = parse_usize(val, &ctx)?,
            "eval_s" => self.r.eval_s = parse_usize(val, &ctx)?,
            "curvature" => {
                self.r.curvature = match val {
                    "full" => CurvatureKind::Full,
                    "blocks" => CurvatureKind::Blocks,
                    _ => return Err(cfg_err(format!("{ctx}: expected full|blocks, got '{val}'"))),
                }
            }
            "curvature_samples" => self.r.curvature_samples = parse_usize(val, &ctx)?,
            "pc_layers" => self.r.pc_layers = parse_usize(val, &ctx)?,
            "trace" => self.r.trace = parse_bool(val, &ctx)?,
            "inference_steps" => self.r.inference_steps = parse_usize(val, &ctx)?,
            "inference_step_size" => {
                self.r.inference_step_size = parse_f64(val, &ctx)?;
                self.step_size_set = true;
            }
            "shrink_factor" => self.r.shrink_factor = parse_f64(val, &ctx)?,
            "min_step" => self.r.min_step = parse_f64(val, &ctx)?,
            "variance_coupled_rescale" => {
                self.r.variance_coupled_rescale = parse_bool(val, &ctx)?;
                self.rescale_set = true;
            }
            "latent_dims" => self.r.latent_dims = parse_dims(val, &ctx)?,
            "activation" => {
                self.r.activation = match val {
                    "leaky_relu" => ActivationKind::LeakyRelu { slope: self.leaky_slope },
                    "tanh" => ActivationKind::Tanh,
                    _ => return Err(cfg_err(format!("{ctx}: expected leaky_relu|tanh, got '{val}'"))),
                }
            }
            "leaky_slope" => {
                self.leaky_slope = parse_f64(val, &ctx)?;
                if let ActivationKind::LeakyRelu { slope } = &mut self.r.activation {
                    *slope = self.leaky_slope;
                }
            }
            "skip" => {
                self.r.skip = match val {
                    "auto" => SkipPolicy::Auto,
                    "none" => SkipPolicy::None,
                    _ => return Err(cfg_err(format!("{ctx}: expected auto|none, got '{val}'"))),
                }
            }
            "variance_mode" => {
                self.variance_learned = match val {
                    "fixed" => false,
                    "learned" => true,
                    _ => return Err(cfg_err(format!("{ctx}: expected fixed|learned, got '{val}'"))),
                }
            }
            "fixed_variance" => self.fixed_variance = parse_f64(val, &ctx)?,
            "data" => {
                self.r.data = Some(match val {
                    "idx" => DataKind::Idx,
                    "synthetic" => DataKind::Synthetic,
                    "tensor" => DataKind::Tensor,
                    _ => return Err(cfg_err(format!("{ctx}: expected idx|synthetic|tensor, got '{val}'"))),
                })
            }
            "idx_images" => self.r.idx_images = Some(PathBuf::from(val)),
            "idx_labels" => self.r.idx_labels = Some(PathBuf::from(val)),
            "tensor_path" => self.r.tensor_path = Some(PathBuf::from(val)),
            "holdout" => self.r.holdout = parse_usize(val, &ctx)?,
            "limit" => self.r.limit = parse_usize(val, &ctx)?,
            "synthetic_kind" => {
                self.r.synthetic_kind = match val {
                    "linear_gaussian_chain" => SyntheticKind::LinearGaussianChain,
                    "mixture_of_gaussians" => SyntheticKind::MixtureOfGaussians,
                    _ => {
                        return Err(cfg_err(format!(
                            "{ctx}: expected linear_gaussian_chain|mixture_of_gaussians, got '{val}'"
                        )))
                    }
                }
            }
            "synthetic_dims" => self.r.synthetic_dims = parse_dims(val, &ctx)?,
            "weight_scale" => self.r.weight_scale = parse_f64(val, &ctx)?,
            "noise_scale" => self.r.noise_scale = parse_f64(val, &ctx)?,
            "n_samples" => self.r.n_samples = parse_usize(val, &ctx)?,
            "data_seed" => self.r.data_seed = parse_u64(val, &ctx)?,
            "components" => self.r.components = parse_usize(val, &ctx)?,
            "mixture_dim" => self.r.mixture_dim = parse_usize(val, &ctx)?,
            "image_width" => self.r.image_width = parse_usize(val, &ctx)?,
            "image_height" => self.r.image_height = parse_usize(val, &ctx)?,
            _ => return Err(cfg_err(format!("line {line}: unknown field '{key}'"))),
        }
        Ok(())
    }

    fn finalize(mut self, flags: &FlagOverrides) -> Result<Resolved, CliError> {
        if let Some(o) = flags.objective {
            self.r.objective = o;
        }
        if let Some(c) = flags.combined {
            self.r.combined = c;
            self.combined_explicit = true;
        }
        if let Some(s) = flags.seed {
            self.r.seed = s;
        }
        if let Some(p) = &flags.out {
            self.r.out_dir = Some(p.clone());
        }
        if let Some(t) = flags.threads {
            self.r.threads = t;
        }

        self.r.variance_mode = if self.variance_learned {
            VarianceMode::learned()
        } else {
            VarianceMode::fixed(self.fixed_variance)
        };
        // Activation-dependent defaults.
        let leaky = matches!(self.r.activation, ActivationKind::LeakyRelu { .. });
        if !self.lr_set {
            self.r.lr = if leaky { 1e-4 } else { 0.01 };
        }
        if !self.step_size_set {
            self.r.inference_step_size = if leaky { 0.001 } else { 0.05 };
        }
        if !self.amortizer_lr_set {
            self.r.amortizer_lr = self.r.lr;
        }
        if !self.rescale_set {
            self.r.variance_coupled_rescale = self.variance_learned;
        }

        if self.r.objective == ObjectiveKind::Pc && self.r.combined {
            if self.combined_explicit {
                return Err(cfg_err(
                    "field 'combined': the PC objective does not support combined mode".into(),
                ));
            }
            // Preset-sourced: the combined configuration changes nothing
            // for PC, so it is dropped.
            self.r.combined = false;
        }
        if self.r.k == 0 {
            return Err(cfg_err("field 'k': must be at least 1".into()));
        }
        if self.r.batch_size == 0 {
            return Err(cfg_err("field 'batch_size': must be at least 1".into()));
        }
        if self.r.pc_layers >= self.r.latent_dims.len() && self.r.combined {
            return Err(cfg_err(format!(
                "field 'pc_layers': {} leaves no sampled layer for a {}-layer model",
                self.r.pc_layers,
                self.r.latent_dims.len()
            )));
        }
        Ok(self.r)
    }
}

/// Resolve a configuration from an optional preset, optional file text,
/// and command-line flag overrides.
pub fn resolve(
    preset: Option<u8>,
    file_text: Option<&str>,
    flags: &FlagOverrides,
) -> Result<Resolved, CliError> {
    let mut b = Builder::default();
    if let Some(p) = preset {
        b.apply_preset(p)?;
    }
    if let Some(text) = file_text {
        for (line, key, val) in parse_kv(text)? {
            b.apply_key(line, &key, &val)?;
        }
    }
    b.finalize(flags)
}

/// Resolve from a config file path.
pub fn resolve_from_file(
    preset: Option<u8>,
    path: Option<&Path>,
    flags: &FlagOverrides,
) -> Result<Resolved, CliError> {
    let text = match path {
        None => None,
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
            CliError::MissingInput(format!("config file '{}': {e}", p.display()))
        })?),
    };
    resolve(preset, text.as_deref(), flags)
}
