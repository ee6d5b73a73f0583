use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wsd_core::flowmatch::{GenerativeModel, TrainMode};
use wsd_core::nn::{Activation, AdamWConfig, Mlp, MlpSpec};
use wsd_core::solvers::{GridKind, Method};
use wsd_core::tasks::{
    AnalyticConfig, AnalyticTask, ConditionalTask, ForecastConfig, ForecastTask, InpaintingConfig, InpaintingTask,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Analytic(AnalyticConfig),
    Inpainting(InpaintingConfig),
    Forecast(ForecastConfig),
}

impl TaskConfig {
    pub fn build(&self, seed: u64) -> Result<Arc<dyn ConditionalTask>> {
        Ok(match self {
            TaskConfig::Analytic(c) => Arc::new(AnalyticTask::new(c.clone(), seed)?),
            TaskConfig::Inpainting(c) => Arc::new(InpaintingTask::new(c.clone(), seed)?),
            TaskConfig::Forecast(c) => Arc::new(ForecastTask::new(c.clone(), seed)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Analytic(_) => "analytic",
            TaskConfig::Inpainting(_) => "inpainting",
            TaskConfig::Forecast(_) => "forecast",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
}

fn default_embed() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: usize,
    /// Steps per loss window for plateau detection.
    pub plateau_window: usize,
    /// Training stops once a window improves on the previous one by less than this fraction.
    pub plateau_tol: f64,
    pub optim: AdamWConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_steps: 50_000,
            plateau_window: 2_000,
            plateau_tol: 1e-3,
            optim: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub nfe: Vec<usize>,
    pub methods: Vec<Method>,
    pub grids: Vec<GridKind>,
    pub warmth: Vec<f64>,
    /// Held-out contexts per cell.
    pub n_eval: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            nfe: vec![2, 4, 6, 8, 12, 16, 20, 32, 50, 100],
            methods: Method::ALL.to_vec(),
            grids: GridKind::ALL.to_vec(),
            warmth: vec![1.0],
            n_eval: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Held-out initial conditions per sweep cell.
    pub n_initial: usize,
    pub n_ensemble: usize,
    pub n_steps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_initial: 8,
            n_ensemble: 50,
            n_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub task: TaskConfig,
    pub mode: TrainMode,
    /// Training samples are indices `0..n_train`; evaluation uses indices from `n_train` on.
    pub n_train: usize,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    pub warm_start: NetConfig,
    pub generator: NetConfig,
    #[serde(default)]
    pub warm_training: TrainingConfig,
    #[serde(default)]
    pub gen_training: TrainingConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub rollout: RolloutConfig,
    pub output_dir: PathBuf,
}

fn default_sigma_min() -> f64 {
    0.01
}

/// Largest allowed warm-start to generator parameter ratio.
pub const MAX_WARM_RATIO: f64 = 0.2;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn dims(&self) -> Result<(Vec<usize>, usize)> {
        let task = self.task.build(self.seed)?;
        Ok((task.sample_shape(), task.context_dim()))
    }

    pub fn warm_spec(&self) -> Result<MlpSpec> {
        let (shape, ctx) = self.dims()?;
        let d: usize = shape.iter().product();
        Ok(MlpSpec {
            input_dim: ctx,
            hidden_dims: self.warm_start.hidden_dims.clone(),
            output_dim: 2 * d,
            activation: self.warm_start.activation,
            embed_dim: self.warm_start.embed_dim,
            n_scalars: 0,
        })
    }

    pub fn generator_spec(&self) -> Result<MlpSpec> {
        let (shape, ctx) = self.dims()?;
        let d: usize = shape.iter().product();
        Ok(MlpSpec {
            input_dim: GenerativeModel::input_dim(d, ctx),
            hidden_dims: self.generator.hidden_dims.clone(),
            output_dim: d,
            activation: self.generator.activation,
            embed_dim: self.generator.embed_dim,
            n_scalars: 2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.run_id.is_empty(), "run_id must be non-empty");
        ensure!(
            self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
            "run_id may only contain ASCII letters, digits, '-' and '_'"
        );
        ensure!(self.n_train > 0, "n_train must be positive");
        ensure!(self.sigma_min > 0.0, "sigma_min must be positive");
        for (name, t) in [("warm_training", &self.warm_training), ("gen_training", &self.gen_training)] {
            ensure!(t.batch_size > 0 && t.max_steps > 0, "{name}: batch_size and max_steps must be positive");
            ensure!(t.plateau_window > 0, "{name}: plateau_window must be positive");
        }
        ensure!(self.sweep.nfe.iter().all(|&n| n > 0), "sweep NFE values must be positive");
        ensure!(
            self.sweep.warmth.iter().all(|w| (0.0..=1.0).contains(w)),
            "sweep warmth values must lie in [0, 1]"
        );
        ensure!(self.sweep.n_eval > 0, "sweep.n_eval must be positive");
        ensure!(
            self.rollout.n_initial > 0 && self.rollout.n_ensemble > 0,
            "rollout needs at least one initial condition and one member"
        );
        let warm = Mlp::new(self.warm_spec()?)?.n_params();
        let gen = Mlp::new(self.generator_spec()?)?.n_params();
        let ratio = warm as f64 / gen as f64;
        if ratio > MAX_WARM_RATIO {
            bail!("warm-start model has {warm} parameters, {ratio:.3} of the generator's {gen}; at most {MAX_WARM_RATIO} allowed");
        }
        Ok(())
    }

    /// Short content hash of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(bytes))[..12].to_string()
    }

    /// Hash of the fields that determine phase 1, shared by runs that differ only in phase 2.
    pub fn warm_key(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "task": self.task,
            "n_train": self.n_train,
            "sigma_min": self.sigma_min,
            "warm_start": self.warm_start,
            "warm_training": self.warm_training,
        });
        hex(&Sha256::digest(serde_json::to_vec(&key).expect("json")))[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn warm_dir(&self) -> PathBuf {
        self.output_dir.join(format!("warmstart-{}", self.warm_key()))
    }
}
