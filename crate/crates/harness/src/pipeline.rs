//! Two-phase training: the warm-start model first, then the generator on
//! frozen, cached moments.

use std::fs;
use std::sync::Arc;

use anyhow::{Context as _, Result};
use ndarray::{s, Array2, ArrayView1};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wsd_core::flowmatch::GenerativeModel;
use wsd_core::nn::{load_checkpoint, params_hash, save_checkpoint, CheckpointMeta, Mlp, TrainState};
use wsd_core::rng::{derive_seed, stream};
use wsd_core::solvers::ModelBundle;
use wsd_core::tasks::ConditionalTask;
use wsd_core::warmstart::{CacheManifest, MomentCache, WarmStartModel};

use crate::config::{ExperimentConfig, TrainingConfig};

const TAG_WARM_INIT: u64 = 1;
const TAG_WARM_BATCH: u64 = 2;
const TAG_GEN_INIT: u64 = 3;
const TAG_GEN_BATCH: u64 = 4;
const TAG_GEN_NOISE: u64 = 5;

/// Stops training once a full window of losses fails to improve on the
/// previous window by the relative tolerance.
#[derive(Debug, Clone)]
pub struct Plateau {
    window: usize,
    tol: f64,
    sum: f64,
    count: usize,
    previous: Option<f64>,
    history: Vec<f64>,
}

impl Plateau {
    pub fn new(window: usize, tol: f64) -> Self {
        Self {
            window,
            tol,
            sum: 0.0,
            count: 0,
            previous: None,
            history: Vec::new(),
        }
    }

    /// Records one loss; returns true when the plateau criterion fires.
    pub fn push(&mut self, loss: f64) -> bool {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return false;
        }
        let mean = self.sum / self.window as f64;
        self.sum = 0.0;
        self.count = 0;
        self.history.push(mean);
        let done = match self.previous {
            Some(p) => p - mean < self.tol * p.abs(),
            None => false,
        };
        self.previous = Some(mean);
        done
    }

    /// Mean loss of every completed window.
    pub fn window_means(&self) -> &[f64] {
        &self.history
    }
}

/// Contexts and targets for indices `first..first + n`, one row per sample.
pub struct Dataset {
    pub contexts: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn generate(task: &dyn ConditionalTask, first: u64, n: usize) -> Self {
        let rows: Vec<_> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let s = task.sample(first + i);
                (s.context.features(), s.x0.data().to_vec())
            })
            .collect();
        let mut contexts = Array2::zeros((n, task.context_dim()));
        let mut targets = Array2::zeros((n, task.sample_dim()));
        for (i, (c, x)) in rows.into_iter().enumerate() {
            contexts.row_mut(i).assign(&ArrayView1::from(&c));
            targets.row_mut(i).assign(&ArrayView1::from(&x));
        }
        Self { contexts, targets }
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.contexts.select(ndarray::Axis(0), idx), self.targets.select(ndarray::Axis(0), idx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub steps: usize,
    pub plateaued: bool,
    pub window_means: Vec<f64>,
    pub params_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub run_id: String,
    pub config_hash: String,
    pub task: String,
    pub mode: String,
    pub seed: u64,
    pub warm_start: Option<PhaseSummary>,
    pub generator: PhaseSummary,
    /// Warm-start forward passes spent filling the moment cache in this run.
    pub h_forward_passes: u64,
}

fn draw_indices(rng: &mut wsd_core::rng::Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn train_loop<F>(t: &TrainingConfig, mut step: F) -> Result<(usize, Plateau)>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut plateau = Plateau::new(t.plateau_window, t.plateau_tol);
    for i in 0..t.max_steps {
        let loss = step(i)?;
        if plateau.push(loss) {
            return Ok((i + 1, plateau));
        }
    }
    Ok((t.max_steps, plateau))
}

pub struct WarmArtifacts {
    pub model: WarmStartModel,
    pub params: Vec<f64>,
    pub hash: String,
    /// Present only if the model was trained in this call.
    pub summary: Option<PhaseSummary>,
}

fn warm_model(cfg: &ExperimentConfig, task: &dyn ConditionalTask) -> Result<WarmStartModel> {
    Ok(WarmStartModel::new(cfg.warm_spec()?, task.sample_shape(), cfg.sigma_min)?)
}

/// Phase 1. Reuses the checkpoint in the shared warm-start directory if present.
pub fn ensure_warm_start(cfg: &ExperimentConfig, task: &dyn ConditionalTask, data: &Dataset) -> Result<WarmArtifacts> {
    let model = warm_model(cfg, task)?;
    let stem = cfg.warm_dir().join("warmstart");
    if stem.with_extension("bin").exists() {
        let (params, _) = load_checkpoint(&stem)?;
        let hash = params_hash(&params);
        return Ok(WarmArtifacts { model, params, hash, summary: None });
    }
    let t = &cfg.warm_training;
    let mut state = TrainState::new(model.mlp().init_params(&mut stream(derive_seed(cfg.seed, TAG_WARM_INIT), 0)));
    let mut rng = stream(derive_seed(cfg.seed, TAG_WARM_BATCH), 0);
    let (steps, plateau) = train_loop(t, |i| {
        let idx = draw_indices(&mut rng, data.len(), t.batch_size);
        let (c, x) = data.batch(&idx);
        model
            .train_step(&mut state, c.view(), x.view(), &t.optim)
            .with_context(|| format!("warm-start training diverged at step {i}"))
    })?;
    let meta = CheckpointMeta {
        spec: model.mlp().spec().clone(),
        step: state.step,
        ema_rate: t.optim.ema_rate,
        seed: cfg.seed,
        mode: None,
        task: Some(cfg.task.name().into()),
    };
    let hash = save_checkpoint(&stem, &state.ema, &meta)?;
    let summary = PhaseSummary {
        steps,
        plateaued: steps < t.max_steps,
        window_means: plateau.window_means().to_vec(),
        params_hash: hash.clone(),
    };
    fs::write(cfg.warm_dir().join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(WarmArtifacts {
        model,
        params: state.ema,
        hash,
        summary: Some(summary),
    })
}

/// Loads the moment cache if it was built from this exact warm-start
/// checkpoint, otherwise rebuilds it. Returns the cache and the number of
/// warm-start forward passes spent.
pub fn ensure_moment_cache(cfg: &ExperimentConfig, warm: &WarmArtifacts, data: &Dataset) -> Result<(MomentCache, u64)> {
    let dir = cfg.warm_dir().join("moments");
    if let Ok(cache) = MomentCache::load(&dir) {
        if cache.matches(&warm.hash) && cache.manifest().n_samples == data.len() {
            return Ok((cache, 0));
        }
    }
    let d = warm.model.sample_dim();
    let mut cache = MomentCache::new(CacheManifest {
        task: cfg.task.name().into(),
        n_samples: data.len(),
        sample_dim: d,
        sigma_min: cfg.sigma_min,
        h_checkpoint_hash: warm.hash.clone(),
        dataset_seed: cfg.seed,
    });
    let chunk = 1024;
    let mut passes = 0;
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let (mu, sigma) = warm
            .model
            .predict_batch(&warm.params, data.contexts.slice(s![start..end, ..]))?;
        passes += (end - start) as u64;
        for (k, i) in (start..end).enumerate() {
            cache.insert(
                i as u64,
                mu.row(k).as_slice().expect("row-major"),
                sigma.row(k).as_slice().expect("row-major"),
            )?;
        }
    }
    cache.save(&dir)?;
    Ok((cache, passes))
}

fn generator_model(cfg: &ExperimentConfig, task: &dyn ConditionalTask) -> Result<GenerativeModel> {
    Ok(GenerativeModel::new(
        cfg.generator_spec()?,
        cfg.mode,
        task.sample_shape(),
        task.context_dim(),
    )?)
}

/// Phase 2: trains the generator and writes `generator.{bin,json}` in the run directory.
pub fn train_generator(
    cfg: &ExperimentConfig,
    task: &dyn ConditionalTask,
    data: &Dataset,
    cache: Option<&MomentCache>,
) -> Result<PhaseSummary> {
    let model = generator_model(cfg, task)?;
    let t = &cfg.gen_training;
    let mlp = Mlp::new(cfg.generator_spec()?)?;
    let mut state = TrainState::new(mlp.init_params(&mut stream(derive_seed(cfg.seed, TAG_GEN_INIT), 0)));
    let mut batch_rng = stream(derive_seed(cfg.seed, TAG_GEN_BATCH), 0);
    let mut noise_rng = stream(derive_seed(cfg.seed, TAG_GEN_NOISE), 0);
    let (steps, plateau) = train_loop(t, |i| {
        let idx = draw_indices(&mut batch_rng, data.len(), t.batch_size);
        let (c, x) = data.batch(&idx);
        let keys: Vec<u64> = idx.iter().map(|&k| k as u64).collect();
        model
            .train_step_cached(&mut state, &keys, c.view(), x.view(), cache, &mut noise_rng, &t.optim)
            .with_context(|| format!("generator training failed at step {i}"))
    })?;
    let meta = CheckpointMeta {
        spec: mlp.spec().clone(),
        step: state.step,
        ema_rate: t.optim.ema_rate,
        seed: cfg.seed,
        mode: Some(cfg.mode.name().into()),
        task: Some(cfg.task.name().into()),
    };
    let hash = save_checkpoint(&cfg.run_dir().join("generator"), &state.ema, &meta)?;
    Ok(PhaseSummary {
        steps,
        plateaued: steps < t.max_steps,
        window_means: plateau.window_means().to_vec(),
        params_hash: hash,
    })
}

/// Runs the phases the configured mode needs and writes `manifest.json`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineManifest> {
    cfg.validate()?;
    let task = cfg.task.build(cfg.seed)?;
    let data = Dataset::generate(task.as_ref(), 0, cfg.n_train);
    fs::create_dir_all(cfg.run_dir())?;
    let (warm_summary, cache, passes) = if cfg.mode.needs_moments() {
        let warm = ensure_warm_start(cfg, task.as_ref(), &data)?;
        let (cache, passes) = ensure_moment_cache(cfg, &warm, &data)?;
        (warm.summary, Some(cache), passes)
    } else {
        (None, None, 0)
    };
    let generator = train_generator(cfg, task.as_ref(), &data, cache.as_ref())?;
    let manifest = PipelineManifest {
        run_id: cfg.run_id.clone(),
        config_hash: cfg.hash(),
        task: cfg.task.name().into(),
        mode: cfg.mode.name().into(),
        seed: cfg.seed,
        warm_start: warm_summary,
        generator,
        h_forward_passes: passes,
    };
    fs::write(cfg.run_dir().join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(cfg.run_dir().join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(manifest)
}

/// Phase 1 only, with the moment cache.
pub fn run_warm_start(cfg: &ExperimentConfig) -> Result<(Option<PhaseSummary>, u64)> {
    cfg.validate()?;
    let task = cfg.task.build(cfg.seed)?;
    let data = Dataset::generate(task.as_ref(), 0, cfg.n_train);
    let warm = ensure_warm_start(cfg, task.as_ref(), &data)?;
    let (_, passes) = ensure_moment_cache(cfg, &warm, &data)?;
    Ok((warm.summary, passes))
}

/// Trained models of a finished run, ready for sampling.
pub fn load_bundle(cfg: &ExperimentConfig) -> Result<(Arc<dyn ConditionalTask>, ModelBundle)> {
    let task = cfg.task.build(cfg.seed)?;
    let generator = generator_model(cfg, task.as_ref())?;
    let (params, _) = load_checkpoint(&cfg.run_dir().join("generator"))
        .with_context(|| format!("no trained generator in {}", cfg.run_dir().display()))?;
    let warm = if cfg.mode.needs_moments() {
        let (hp, _) = load_checkpoint(&cfg.warm_dir().join("warmstart"))
            .with_context(|| format!("no trained warm-start model in {}", cfg.warm_dir().display()))?;
        Some((warm_model(cfg, task.as_ref())?, hp))
    } else {
        None
    };
    Ok((task, ModelBundle::new(warm, generator, params)?))
}
