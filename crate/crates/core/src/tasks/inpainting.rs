use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ConditionalTask, Context, TaskSample};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::{standard_normal, stream};

const JITTER: f64 = 1e-9;

/// Square Gaussian-random-field images with a random subset of visible pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintingConfig {
    /// Image side length in pixels.
    pub size: usize,
    /// Matérn-3/2 length scale in pixels.
    pub length_scale: f64,
    pub visible_min: f64,
    pub visible_max: f64,
}

impl Default for InpaintingConfig {
    fn default() -> Self {
        Self {
            size: 16,
            length_scale: 4.0,
            visible_min: 0.05,
            visible_max: 0.20,
        }
    }
}

/// Unit-variance Matérn-3/2 covariance.
fn matern32(r: f64, ell: f64) -> f64 {
    let a = 3f64.sqrt() * r / ell;
    (1.0 + a) * (-a).exp()
}

#[derive(Debug, Clone)]
pub struct InpaintingTask {
    config: InpaintingConfig,
    seed: u64,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl InpaintingTask {
    pub fn new(config: InpaintingConfig, seed: u64) -> Result<Self> {
        if config.size == 0 || !(config.length_scale > 0.0) {
            return Err(Error::InvalidArgument("image size and length scale must be positive".into()));
        }
        if !(0.0 <= config.visible_min && config.visible_min <= config.visible_max && config.visible_max <= 1.0) {
            return Err(Error::InvalidArgument("visible fraction range must lie in [0, 1]".into()));
        }
        let n = config.size;
        let d = n * n;
        let cov = DMatrix::from_fn(d, d, |a, b| {
            let (ya, xa) = ((a / n) as f64, (a % n) as f64);
            let (yb, xb) = ((b / n) as f64, (b % n) as f64);
            matern32(((ya - yb).powi(2) + (xa - xb).powi(2)).sqrt(), config.length_scale)
        });
        let chol = (&cov + DMatrix::identity(d, d) * JITTER)
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        Ok(Self { config, seed, cov, chol })
    }

    pub fn config(&self) -> &InpaintingConfig {
        &self.config
    }

    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        self.cov[(a, b)]
    }

    /// Draw a GRF image and a mask with exactly `round(p * d)` visible pixels,
    /// `p ~ U[visible_min, visible_max]`.
    pub fn sample_with_rng(&self, rng: &mut crate::rng::Rng) -> TaskSample {
        let n = self.config.size;
        let d = n * n;
        let z = DVector::from_vec(standard_normal(rng, d));
        let image: Vec<f64> = (&self.chol * z).iter().copied().collect();
        let p = if self.config.visible_max > self.config.visible_min {
            rng.random_range(self.config.visible_min..=self.config.visible_max)
        } else {
            self.config.visible_min
        };
        let k = ((p * d as f64).round() as usize).min(d);
        let mut mask = vec![0.0; d];
        for i in sample_indices(rng, d, k) {
            mask[i] = 1.0;
        }
        self.assemble(image, mask)
    }

    /// Context from a full image and a 0/1 mask.
    pub fn assemble(&self, image: Vec<f64>, mask: Vec<f64>) -> TaskSample {
        let n = self.config.size;
        let masked: Vec<f64> = image.iter().zip(&mask).map(|(x, m)| x * m).collect();
        TaskSample {
            context: Context::Inpainting {
                masked: Field::new(masked, vec![n, n]).expect("finite image"),
                mask: Field::new(mask, vec![n, n]).expect("finite mask"),
            },
            x0: Field::new(image, vec![n, n]).expect("finite image"),
        }
    }

    fn split(context: &Context) -> Result<(&Field, &Field)> {
        match context {
            Context::Inpainting { masked, mask } => Ok((masked, mask)),
            _ => Err(Error::InvalidArgument("inpainting task needs an inpainting context".into())),
        }
    }

    /// Exact Gaussian conditioning on the visible pixels: mean and full
    /// covariance of the image given the context.
    pub fn oracle_conditional(&self, context: &Context) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let (masked, mask) = Self::split(context)?;
        let d = masked.len();
        let vis: Vec<usize> = (0..d).filter(|&i| mask.data()[i] > 0.5).collect();
        if vis.is_empty() {
            return Ok((vec![0.0; d], self.cov.clone()));
        }
        let k_vv = DMatrix::from_fn(vis.len(), vis.len(), |a, b| self.cov[(vis[a], vis[b])])
            + DMatrix::identity(vis.len(), vis.len()) * JITTER;
        let k_av = DMatrix::from_fn(d, vis.len(), |a, b| self.cov[(a, vis[b])]);
        let y = DVector::from_iterator(vis.len(), vis.iter().map(|&i| masked.data()[i]));
        let chol = k_vv.cholesky().ok_or(Error::NotPositiveDefinite)?;
        let mean = &k_av * chol.solve(&y);
        let cov = &self.cov - &k_av * chol.solve(&k_av.transpose());
        let mut mean: Vec<f64> = mean.iter().copied().collect();
        for &i in &vis {
            mean[i] = masked.data()[i];
        }
        Ok((mean, cov))
    }

    /// Conditional mean and marginal standard deviation per pixel.
    pub fn oracle_moments(&self, context: &Context) -> Result<(Field, Field)> {
        let (_, mask) = Self::split(context)?;
        let (mean, cov) = self.oracle_conditional(context)?;
        let n = self.config.size;
        let std: Vec<f64> = (0..mean.len())
            .map(|i| {
                if mask.data()[i] > 0.5 {
                    0.0
                } else {
                    cov[(i, i)].max(0.0).sqrt()
                }
            })
            .collect();
        Ok((Field::new(mean, vec![n, n])?, Field::new(std, vec![n, n])?))
    }
}

impl ConditionalTask for InpaintingTask {
    fn name(&self) -> &'static str {
        "inpainting"
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.config.size, self.config.size]
    }

    fn context_dim(&self) -> usize {
        2 * self.config.size * self.config.size
    }

    fn sample(&self, index: u64) -> TaskSample {
        self.sample_with_rng(&mut stream(self.seed, index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize, vis: f64) -> InpaintingConfig {
        InpaintingConfig {
            size,
            length_scale: 2.0,
            visible_min: vis,
            visible_max: vis,
        }
    }

    #[test]
    fn context_is_consistent_with_target() {
        let task = InpaintingTask::new(InpaintingConfig::default(), 3).unwrap();
        for i in 0..20 {
            let s = task.sample(i);
            let Context::Inpainting { masked, mask } = &s.context else { panic!() };
            let visible = mask.data().iter().sum::<f64>() / 256.0;
            assert!((0.05 - 0.5 / 256.0..=0.20 + 0.5 / 256.0).contains(&visible));
            for j in 0..256 {
                if mask.data()[j] == 1.0 {
                    assert_eq!(masked.data()[j], s.x0.data()[j]);
                } else {
                    assert_eq!(masked.data()[j], 0.0);
                }
            }
        }
        assert_eq!(task.sample(5), task.sample(5));
    }

    #[test]
    fn fully_visible_has_zero_conditional_std() {
        let task = InpaintingTask::new(cfg(4, 1.0), 1).unwrap();
        let s = task.sample(0);
        let (mean, std) = task.oracle_moments(&s.context).unwrap();
        assert!(std.data().iter().all(|&v| v == 0.0));
        assert_eq!(mean.data(), s.x0.data());
    }

    #[test]
    fn nothing_visible_recovers_prior() {
        let task = InpaintingTask::new(cfg(4, 0.0), 1).unwrap();
        let s = task.sample(0);
        let (mean, std) = task.oracle_moments(&s.context).unwrap();
        assert!(mean.data().iter().all(|&v| v == 0.0));
        assert!(std.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
