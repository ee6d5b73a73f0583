//! Conditional flow matching in normalised space.
//!
//! Time runs from `s = 0` (data) to `s = 1` (noise) along the linear path
//! `x_s = (1 - s) x0 + s eps`, whose velocity is `eps - x0`.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::field::Field;
use crate::nn::{adamw_step, AdamWConfig, Mlp, MlpSpec, TrainState};
use crate::rng::{standard_normal, Rng};
use crate::warmstart::{blend_value, check_warmth, MomentCache};

/// How the generator uses the warm-start moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Normalise with warmth-blended moments, `w ~ U[0, 1]` during training.
    WarmBlended,
    /// Normalise with the raw moments, always `w = 1`.
    WarmNoBlend,
    /// Subtract the mean only.
    MeanOnly,
    /// No normalisation; moments are extra network inputs.
    FeaturesOnly,
    /// Standard flow matching.
    Baseline,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::WarmBlended,
        TrainMode::WarmNoBlend,
        TrainMode::MeanOnly,
        TrainMode::FeaturesOnly,
        TrainMode::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::WarmBlended => "warm_blended",
            TrainMode::WarmNoBlend => "warm_no_blend",
            TrainMode::MeanOnly => "mean_only",
            TrainMode::FeaturesOnly => "features_only",
            TrainMode::Baseline => "baseline",
        }
    }

    /// Whether a trained warm-start model is required.
    pub fn needs_moments(self) -> bool {
        self != TrainMode::Baseline
    }

    /// Normalisation and extra network inputs for a batch.
    ///
    /// `warmth` has one entry per row and is only honoured by
    /// [`TrainMode::WarmBlended`]; every other mode pins its own value.
    pub fn conditioning(
        self,
        moments: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
        warmth: &[f64],
        dim: usize,
    ) -> Result<Conditioning> {
        let b = warmth.len();
        let ones = Array2::<f64>::ones((b, dim));
        let zeros = Array2::<f64>::zeros((b, dim));
        let (mu, sigma) = match (self, moments) {
            (TrainMode::Baseline, _) => {
                return Ok(Conditioning {
                    shift: zeros.clone(),
                    scale: ones.clone(),
                    mu_in: zeros,
                    sigma_in: ones,
                    warmth: vec![0.0; b],
                })
            }
            (_, None) => {
                return Err(Error::InvalidArgument(format!(
                    "mode {self} needs warm-start moments"
                )))
            }
            (_, Some((mu, sigma))) => (mu, sigma),
        };
        if mu.dim() != (b, dim) || sigma.dim() != (b, dim) {
            return Err(shape_err("moment batch", b * dim, mu.len().min(sigma.len())));
        }
        let mu = mu.to_owned();
        let sigma = sigma.to_owned();
        Ok(match self {
            TrainMode::WarmBlended => {
                for &w in warmth {
                    check_warmth(w)?;
                }
                let mut sigma_norm = sigma;
                for (mut row, &w) in sigma_norm.outer_iter_mut().zip(warmth) {
                    row.mapv_inplace(|s| blend_value(s, w));
                }
                Conditioning {
                    shift: mu.clone(),
                    scale: sigma_norm.clone(),
                    mu_in: mu,
                    sigma_in: sigma_norm,
                    warmth: warmth.to_vec(),
                }
            }
            TrainMode::WarmNoBlend => Conditioning {
                shift: mu.clone(),
                scale: sigma.clone(),
                mu_in: mu,
                sigma_in: sigma,
                warmth: vec![1.0; b],
            },
            TrainMode::MeanOnly => Conditioning {
                shift: mu.clone(),
                scale: ones.clone(),
                mu_in: mu,
                sigma_in: ones,
                warmth: vec![1.0; b],
            },
            TrainMode::FeaturesOnly => Conditioning {
                shift: zeros,
                scale: ones,
                mu_in: mu,
                sigma_in: sigma,
                warmth: vec![1.0; b],
            },
            TrainMode::Baseline => unreachable!("handled above"),
        })
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown train mode {s:?}")))
    }
}

/// Per-row normalisation `(x - shift) / scale` plus the moment channels fed
/// to the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub shift: Array2<f64>,
    pub scale: Array2<f64>,
    pub mu_in: Array2<f64>,
    pub sigma_in: Array2<f64>,
    pub warmth: Vec<f64>,
}

impl Conditioning {
    pub fn normalise(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.shift) / &self.scale
    }

    pub fn unnormalise(&self, x_norm: ArrayView2<f64>) -> Array2<f64> {
        &x_norm * &self.scale + &self.shift
    }

    pub fn batch_size(&self) -> usize {
        self.warmth.len()
    }
}

/// A point on the interpolation path together with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub s: f64,
    pub x_s: Field,
    pub noise: Field,
    pub velocity_target: Field,
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("path time {s} outside [0, 1]")));
    }
    Ok(())
}

pub fn make_path_point(x0_norm: &Field, s: f64, rng: &mut Rng) -> Result<PathPoint> {
    let noise = Field::new(standard_normal(rng, x0_norm.len()), x0_norm.shape().to_vec())?;
    make_path_point_with_noise(x0_norm, s, noise)
}

pub fn make_path_point_with_noise(x0_norm: &Field, s: f64, noise: Field) -> Result<PathPoint> {
    check_s(s)?;
    let x_s = x0_norm.zip_map(&noise, |x, e| (1.0 - s) * x + s * e)?;
    let velocity_target = x0_norm.zip_map(&noise, |x, e| e - x)?;
    Ok(PathPoint {
        s,
        x_s,
        noise,
        velocity_target,
    })
}

/// `eps_hat = x_s + (1 - s) v`.
pub fn velocity_to_noise_pred(v: &Field, x_s: &Field, s: f64) -> Result<Field> {
    check_s(s)?;
    x_s.zip_map(v, |x, v| x + (1.0 - s) * v)
}

/// `x0_hat = x_s - s v`.
pub fn velocity_to_x0_pred(v: &Field, x_s: &Field, s: f64) -> Result<Field> {
    check_s(s)?;
    x_s.zip_map(v, |x, v| x - s * v)
}

/// The velocity network `p` and its input wiring for one training mode.
///
/// Input row: `[x_s | context | mu_in | sigma_in]`; scalars `[s, w]`.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    mlp: Mlp,
    mode: TrainMode,
    sample_shape: Vec<usize>,
    context_dim: usize,
}

impl GenerativeModel {
    /// Network input width for a sample of `dim` entries and a context of `context_dim`.
    pub fn input_dim(dim: usize, context_dim: usize) -> usize {
        3 * dim + context_dim
    }

    pub fn new(spec: MlpSpec, mode: TrainMode, sample_shape: Vec<usize>, context_dim: usize) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if spec.input_dim != Self::input_dim(d, context_dim) {
            return Err(shape_err("generator input dim", Self::input_dim(d, context_dim), spec.input_dim));
        }
        if spec.output_dim != d {
            return Err(shape_err("generator output dim", d, spec.output_dim));
        }
        if spec.n_scalars != 2 {
            return Err(shape_err("generator scalar channels", 2, spec.n_scalars));
        }
        Ok(Self {
            mlp: Mlp::new(spec)?,
            mode,
            sample_shape,
            context_dim,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn assemble(
        &self,
        x: ArrayView2<f64>,
        s: &[f64],
        contexts: ArrayView2<f64>,
        cond: &Conditioning,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let b = x.nrows();
        let d = self.sample_dim();
        if x.ncols() != d {
            return Err(shape_err("generator state", d, x.ncols()));
        }
        if contexts.dim() != (b, self.context_dim) {
            return Err(shape_err("context batch", b * self.context_dim, contexts.len()));
        }
        if cond.batch_size() != b || s.len() != b {
            return Err(shape_err("conditioning batch", b, cond.batch_size()));
        }
        let input = concatenate(
            Axis(1),
            &[x.view(), contexts.view(), cond.mu_in.view(), cond.sigma_in.view()],
        )
        .map_err(|e| Error::Shape(e.to_string()))?;
        let mut scalars = Array2::zeros((b, 2));
        for (i, (&si, &w)) in s.iter().zip(&cond.warmth).enumerate() {
            check_s(si)?;
            scalars[[i, 0]] = si;
            scalars[[i, 1]] = w;
        }
        Ok((input, scalars))
    }

    /// Predicted normalised-space velocity for every row of `x` at time `s`.
    pub fn velocity_batch(
        &self,
        params: &[f64],
        x: ArrayView2<f64>,
        s: f64,
        contexts: ArrayView2<f64>,
        cond: &Conditioning,
    ) -> Result<Array2<f64>> {
        let times = vec![s; x.nrows()];
        let (input, scalars) = self.assemble(x, &times, contexts, cond)?;
        self.mlp.forward_batch(params, input.view(), scalars.view())
    }

    /// One velocity-regression step. `moments` holds the frozen warm-start
    /// `(mu, sigma)` for each row and may be `None` only in baseline mode.
    /// Returns the mean squared error over batch and dimensions.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        contexts: ArrayView2<f64>,
        x0: ArrayView2<f64>,
        moments: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
        rng: &mut Rng,
        optim: &AdamWConfig,
    ) -> Result<f64> {
        let b = x0.nrows();
        let d = self.sample_dim();
        if x0.ncols() != d {
            return Err(shape_err("training targets", d, x0.ncols()));
        }
        let warmth: Vec<f64> = match self.mode {
            TrainMode::WarmBlended => (0..b).map(|_| rng.random::<f64>()).collect(),
            _ => vec![1.0; b],
        };
        let cond = self.mode.conditioning(moments, &warmth, d)?;
        let x0n = cond.normalise(x0);

        let times: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let noise = Array2::from_shape_vec((b, d), standard_normal(rng, b * d)).expect("b * d draws");
        let mut x_s = Array2::zeros((b, d));
        for (i, &si) in times.iter().enumerate() {
            let mut row = x_s.row_mut(i);
            row.assign(&(&x0n.row(i) * (1.0 - si) + &noise.row(i) * si));
        }
        let target = &noise - &x0n;

        let (input, scalars) = self.assemble(x_s.view(), &times, contexts, &cond)?;
        let (pred, tape) = self.mlp.forward_train(&state.params, input.view(), scalars.view())?;
        let resid = pred - target;
        let n = (b * d) as f64;
        let loss = resid.mapv(|r| r * r).sum() / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("flow-matching loss".into()));
        }
        let upstream = resid * (2.0 / n);
        let (grads, _) = self.mlp.backward_batch(&state.params, &tape, upstream.view())?;
        adamw_step(state, &grads, optim)?;
        Ok(loss)
    }

    /// [`GenerativeModel::train_step`] with moments fetched from the frozen
    /// cache by sample index.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step_cached(
        &self,
        state: &mut TrainState,
        indices: &[u64],
        contexts: ArrayView2<f64>,
        x0: ArrayView2<f64>,
        cache: Option<&MomentCache>,
        rng: &mut Rng,
        optim: &AdamWConfig,
    ) -> Result<f64> {
        if !self.mode.needs_moments() {
            return self.train_step(state, contexts, x0, None, rng, optim);
        }
        let cache = cache.ok_or_else(|| {
            Error::InvalidArgument(format!("mode {} needs a moment cache", self.mode))
        })?;
        let d = self.sample_dim();
        let mut mu = Array2::zeros((indices.len(), d));
        let mut sigma = Array2::zeros((indices.len(), d));
        for (i, &idx) in indices.iter().enumerate() {
            let (m, sd) = cache.get(idx)?;
            if m.len() != d {
                return Err(shape_err("cached moments", d, m.len()));
            }
            mu.slice_mut(s![i, ..]).assign(&ndarray::ArrayView1::from(m));
            sigma.slice_mut(s![i, ..]).assign(&ndarray::ArrayView1::from(sd));
        }
        self.train_step(state, contexts, x0, Some((mu.view(), sigma.view())), rng, optim)
    }
}
