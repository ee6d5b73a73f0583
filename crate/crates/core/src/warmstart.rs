//! Deterministic warm-start model: Gaussian NLL regression of per-dimension
//! conditional moments, warmth blending, and the per-instance normalisation
//! that turns the informed prior into a standard normal.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::Field;
use crate::nn::{adamw_step, AdamWConfig, Mlp, MlpSpec, TrainState};
use crate::rng::{standard_normal, Rng};
use crate::tasks::Context;

/// Lower clamp on predicted standard deviations.
pub const DEFAULT_SIGMA_MIN: f64 = 0.01;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-dimension conditional mean and marginal standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: Field,
    pub sigma: Field,
}

impl Moments {
    pub fn new(mu: Field, sigma: Field) -> Result<Self> {
        mu.check_same_shape(&sigma)?;
        if sigma.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// Moments with `sigma` clamped below at `sigma_min`.
    pub fn clamped(mu: Field, sigma: Field, sigma_min: f64) -> Result<Self> {
        let sigma = sigma.map(|s| s.max(sigma_min))?;
        Self::new(mu, sigma)
    }
}

/// Normalisation scale after warmth blending.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedSigma {
    pub sigma_norm: Field,
    pub warmth: f64,
}

/// `w * max(sigma, 1 - w) + (1 - w)` for one entry.
#[inline]
pub fn blend_value(sigma: f64, warmth: f64) -> f64 {
    warmth * sigma.max(1.0 - warmth) + (1.0 - warmth)
}

pub fn check_warmth(warmth: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&warmth) {
        return Err(Error::InvalidArgument(format!("warmth {warmth} outside [0, 1]")));
    }
    Ok(())
}

/// Interpolates between the standard task (`warmth = 0`, scale 1) and the
/// full warm start (`warmth = 1`, scale `sigma`). Both endpoints are exact.
pub fn blend_sigma(sigma: &Field, warmth: f64) -> Result<BlendedSigma> {
    check_warmth(warmth)?;
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("sigma must be strictly positive".into()));
    }
    Ok(BlendedSigma {
        sigma_norm: sigma.map(|s| blend_value(s, warmth))?,
        warmth,
    })
}

pub fn normalise(x: &Field, moments: &Moments, sigma_norm: &Field) -> Result<Field> {
    x.check_same_shape(&moments.mu)?;
    x.check_same_shape(sigma_norm)?;
    let data = x
        .data()
        .iter()
        .zip(moments.mu.data())
        .zip(sigma_norm.data())
        .map(|((&x, &m), &s)| (x - m) / s)
        .collect();
    Field::new(data, x.shape().to_vec())
}

pub fn unnormalise(x_norm: &Field, moments: &Moments, sigma_norm: &Field) -> Result<Field> {
    x_norm.check_same_shape(&moments.mu)?;
    x_norm.check_same_shape(sigma_norm)?;
    let data = x_norm
        .data()
        .iter()
        .zip(moments.mu.data())
        .zip(sigma_norm.data())
        .map(|((&x, &m), &s)| x * s + m)
        .collect();
    Field::new(data, x_norm.shape().to_vec())
}

/// Draw `mu + sigma_norm * z` with `z ~ N(0, I)`.
pub fn sample_informed_prior(moments: &Moments, sigma_norm: &Field, rng: &mut Rng) -> Result<Field> {
    let z = Field::new(standard_normal(rng, sigma_norm.len()), sigma_norm.shape().to_vec())?;
    unnormalise(&z, moments, sigma_norm)
}

/// Summed Gaussian negative log-likelihood of `x0` under diagonal `moments`.
pub fn nll_loss(moments: &Moments, x0: &Field) -> Result<f64> {
    x0.check_same_shape(&moments.mu)?;
    Ok(x0
        .data()
        .iter()
        .zip(moments.mu.data())
        .zip(moments.sigma.data())
        .map(|((&x, &m), &s)| {
            let r = (x - m) / s;
            s.ln() + 0.5 * r * r + HALF_LOG_2PI
        })
        .sum())
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps raw network outputs `[mean head | sigma head]` to clamped moments.
pub fn raw_to_moments(raw: &[f64], sigma_min: f64) -> (Vec<f64>, Vec<f64>) {
    let d = raw.len() / 2;
    let mu = raw[..d].to_vec();
    let sigma = raw[d..].iter().map(|&r| softplus(r).max(sigma_min)).collect();
    (mu, sigma)
}

/// Summed NLL and its gradient with respect to the raw outputs
/// `[mean head | sigma head]`. Clamped sigma entries receive zero gradient.
pub fn nll_from_raw(raw: &[f64], x0: &[f64], sigma_min: f64) -> Result<(f64, Vec<f64>)> {
    let d = x0.len();
    if raw.len() != 2 * d {
        return Err(shape_err("raw warm-start output", 2 * d, raw.len()));
    }
    let mut grad = vec![0.0; 2 * d];
    let mut loss = 0.0;
    for i in 0..d {
        let mu = raw[i];
        let r_s = raw[d + i];
        let sp = softplus(r_s);
        let (sigma, active) = if sp > sigma_min { (sp, true) } else { (sigma_min, false) };
        let diff = x0[i] - mu;
        let z = diff / sigma;
        loss += sigma.ln() + 0.5 * z * z + HALF_LOG_2PI;
        grad[i] = -diff / (sigma * sigma);
        if active {
            let dsigma = 1.0 / sigma - diff * diff / (sigma * sigma * sigma);
            grad[d + i] = dsigma * sigmoid(r_s);
        }
    }
    Ok((loss, grad))
}

/// The network `h` mapping flattened context to `(mu, sigma)`.
#[derive(Debug, Clone)]
pub struct WarmStartModel {
    mlp: Mlp,
    sample_shape: Vec<usize>,
    sigma_min: f64,
}

impl WarmStartModel {
    pub fn new(spec: MlpSpec, sample_shape: Vec<usize>, sigma_min: f64) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if spec.output_dim != 2 * d {
            return Err(shape_err("warm-start output dim", 2 * d, spec.output_dim));
        }
        if spec.n_scalars != 0 {
            return Err(Error::InvalidArgument("warm-start model takes no scalar conditioning".into()));
        }
        if !(sigma_min > 0.0) {
            return Err(Error::InvalidArgument("sigma_min must be > 0".into()));
        }
        Ok(Self {
            mlp: Mlp::new(spec)?,
            sample_shape,
            sigma_min,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    /// Batched moments: rows of `contexts` are flattened contexts.
    pub fn predict_batch(&self, params: &[f64], contexts: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let none = Array2::<f64>::zeros((contexts.nrows(), 0));
        let raw = self.mlp.forward_batch(params, contexts, none.view())?;
        let d = self.sample_dim();
        let mu = raw.slice(ndarray::s![.., ..d]).to_owned();
        let sigma = raw
            .slice(ndarray::s![.., d..])
            .mapv(|r| softplus(r).max(self.sigma_min));
        Ok((mu, sigma))
    }

    pub fn predict_moments(&self, params: &[f64], context: &Context) -> Result<Moments> {
        let feats = context.features();
        let x = ArrayView2::from_shape((1, feats.len()), &feats).map_err(|e| Error::Shape(e.to_string()))?;
        let (mu, sigma) = self.predict_batch(params, x)?;
        Moments::new(
            Field::new(mu.into_raw_vec_and_offset().0, self.sample_shape.clone())?,
            Field::new(sigma.into_raw_vec_and_offset().0, self.sample_shape.clone())?,
        )
    }

    /// One optimizer step on the batch-mean NLL. Returns the mean NLL per sample.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        contexts: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        optim: &AdamWConfig,
    ) -> Result<f64> {
        let b = contexts.nrows();
        if targets.nrows() != b || targets.ncols() != self.sample_dim() {
            return Err(shape_err("warm-start targets", b * self.sample_dim(), targets.len()));
        }
        let none = Array2::<f64>::zeros((b, 0));
        let (raw, tape) = self.mlp.forward_train(&state.params, contexts, none.view())?;
        let mut upstream = Array2::zeros(raw.raw_dim());
        let mut total = 0.0;
        for ((r, x), mut g) in raw
            .outer_iter()
            .zip(targets.outer_iter())
            .zip(upstream.outer_iter_mut())
        {
            let (loss, grad) = nll_from_raw(
                r.as_slice().expect("row-major"),
                &x.to_vec(),
                self.sigma_min,
            )?;
            total += loss;
            for (gi, v) in g.iter_mut().zip(grad) {
                *gi = v / b as f64;
            }
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("warm-start NLL".into()));
        }
        let (grads, _) = self.mlp.backward_batch(&state.params, &tape, upstream.view())?;
        adamw_step(state, &grads, optim)?;
        Ok(loss)
    }
}

/// Manifest written next to the cached moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub task: String,
    pub n_samples: usize,
    pub sample_dim: usize,
    pub sigma_min: f64,
    pub h_checkpoint_hash: String,
    pub dataset_seed: u64,
}

/// Frozen warm-start outputs per training sample, keyed by sample index.
#[derive(Debug, Clone)]
pub struct MomentCache {
    manifest: CacheManifest,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    present: Vec<bool>,
}

impl MomentCache {
    pub fn new(manifest: CacheManifest) -> Self {
        let n = manifest.n_samples * manifest.sample_dim;
        Self {
            mu: vec![0.0; n],
            sigma: vec![0.0; n],
            present: vec![false; manifest.n_samples],
            manifest,
        }
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&mut self, index: u64, mu: &[f64], sigma: &[f64]) -> Result<()> {
        let d = self.manifest.sample_dim;
        let i = index as usize;
        if i >= self.manifest.n_samples {
            return Err(Error::InvalidArgument(format!(
                "cache index {index} beyond {} samples",
                self.manifest.n_samples
            )));
        }
        if mu.len() != d || sigma.len() != d {
            return Err(shape_err("cached moments", d, mu.len().max(sigma.len())));
        }
        self.mu[i * d..(i + 1) * d].copy_from_slice(mu);
        self.sigma[i * d..(i + 1) * d].copy_from_slice(sigma);
        self.present[i] = true;
        Ok(())
    }

    pub fn get(&self, index: u64) -> Result<(&[f64], &[f64])> {
        let i = index as usize;
        if !self.present.get(i).copied().unwrap_or(false) {
            return Err(Error::CacheMiss(index));
        }
        let d = self.manifest.sample_dim;
        Ok((&self.mu[i * d..(i + 1) * d], &self.sigma[i * d..(i + 1) * d]))
    }

    /// True if the cache was produced by the warm-start checkpoint with `hash`.
    pub fn matches(&self, hash: &str) -> bool {
        self.manifest.h_checkpoint_hash == hash
    }

    /// Writes `moments.bin` (per record: mu then sigma, little-endian f64) and `moments.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.len() != self.manifest.n_samples {
            return Err(Error::InvalidArgument("refusing to save a partially filled cache".into()));
        }
        fs::create_dir_all(dir)?;
        let d = self.manifest.sample_dim;
        let mut bytes = Vec::with_capacity(16 * self.mu.len());
        for i in 0..self.manifest.n_samples {
            for v in self.mu[i * d..(i + 1) * d].iter().chain(&self.sigma[i * d..(i + 1) * d]) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("moments.bin"), bytes)?;
        fs::write(dir.join("moments.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CacheManifest = serde_json::from_str(&fs::read_to_string(dir.join("moments.json"))?)?;
        let bytes = fs::read(dir.join("moments.bin"))?;
        let d = manifest.sample_dim;
        let expected = 16 * d * manifest.n_samples;
        if bytes.len() != expected {
            return Err(shape_err("moment cache bytes", expected, bytes.len()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut cache = Self::new(manifest);
        for (i, rec) in values.chunks_exact(2 * d).enumerate() {
            cache.insert(i as u64, &rec[..d], &rec[d..])?;
        }
        Ok(cache)
    }
}
