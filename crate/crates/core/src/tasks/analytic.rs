use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ConditionalTask, Context, TaskSample};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::{standard_normal, stream, Rng};
use crate::warmstart::Moments;

/// One Gaussian over the joint vector `(C, X0)` (context coordinates first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major joint covariance.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticConfig {
    pub context_dim: usize,
    pub target_dim: usize,
    pub components: Vec<GaussianComponent>,
}

impl AnalyticConfig {
    /// `dim` independent pairs `(C_i, X_i)` with unit marginals and correlation `rho`.
    pub fn correlated(dim: usize, rho: f64) -> Self {
        let n = 2 * dim;
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            cov[i * n + i] = 1.0;
        }
        for i in 0..dim {
            cov[i * n + dim + i] = rho;
            cov[(dim + i) * n + i] = rho;
        }
        Self {
            context_dim: dim,
            target_dim: dim,
            components: vec![GaussianComponent {
                weight: 1.0,
                mean: vec![0.0; n],
                cov,
            }],
        }
    }

    /// Context independent of the target; the target has the given marginal moments.
    pub fn independent(context_dim: usize, target_mean: Vec<f64>, target_std: Vec<f64>) -> Self {
        let t = target_mean.len();
        let n = context_dim + t;
        let mut cov = vec![0.0; n * n];
        for i in 0..context_dim {
            cov[i * n + i] = 1.0;
        }
        for (j, s) in target_std.iter().enumerate() {
            let k = context_dim + j;
            cov[k * n + k] = s * s;
        }
        let mut mean = vec![0.0; context_dim];
        mean.extend(target_mean);
        Self {
            context_dim,
            target_dim: t,
            components: vec![GaussianComponent { weight: 1.0, mean, cov }],
        }
    }

    /// Equal-weight mixture of two correlated-pair Gaussians centred at `±offset`
    /// on every coordinate.
    pub fn mixture(dim: usize, rho: f64, offset: f64, spread: f64) -> Self {
        let base = Self::correlated(dim, rho);
        let n = 2 * dim;
        let cov: Vec<f64> = base.components[0].cov.iter().map(|c| c * spread * spread).collect();
        let components = [offset, -offset]
            .iter()
            .map(|&m| GaussianComponent {
                weight: 0.5,
                mean: vec![m; n],
                cov: cov.clone(),
            })
            .collect();
        Self {
            context_dim: dim,
            target_dim: dim,
            components,
        }
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    log_weight: f64,
    mean_c: DVector<f64>,
    mean_x: DVector<f64>,
    joint_chol: DMatrix<f64>,
    cc_chol: DMatrix<f64>,
    cc_log_det: f64,
    gain: DMatrix<f64>,
    cond_chol: DMatrix<f64>,
    cond_var: Vec<f64>,
}

/// Exact law of `X0 | C`: a (possibly single-component) Gaussian mixture.
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    /// Posterior responsibility, mean and covariance factor of each component.
    components: Vec<(f64, Vec<f64>, DMatrix<f64>, Vec<f64>)>,
}

impl ConditionalLaw {
    pub fn responsibilities(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.0).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.components[0].1.len();
        let mut m = vec![0.0; d];
        for (r, mu, _, _) in &self.components {
            for i in 0..d {
                m[i] += r * mu[i];
            }
        }
        m
    }

    /// Per-dimension marginal standard deviation (law of total variance).
    pub fn std(&self) -> Vec<f64> {
        let mean = self.mean();
        let d = mean.len();
        let mut second = vec![0.0; d];
        for (r, mu, _, var) in &self.components {
            for i in 0..d {
                second[i] += r * (var[i] + mu[i] * mu[i]);
            }
        }
        (0..d).map(|i| (second[i] - mean[i] * mean[i]).max(0.0).sqrt()).collect()
    }

    pub fn moments(&self, sigma_min: f64) -> Result<Moments> {
        Moments::clamped(Field::from_vec(self.mean())?, Field::from_vec(self.std())?, sigma_min)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.0;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (_, mu, chol, _) = &self.components[pick];
        let z = DVector::from_vec(standard_normal(rng, mu.len()));
        let x = chol * z;
        mu.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
    }
}

fn cholesky(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.cholesky().map(|c| c.l()).ok_or(Error::NotPositiveDefinite)
}

/// Joint Gaussian (or two-component mixture) over `(C, X0)` with closed-form conditionals.
#[derive(Debug, Clone)]
pub struct AnalyticTask {
    config: AnalyticConfig,
    seed: u64,
    comps: Vec<Prepared>,
}

impl AnalyticTask {
    pub fn new(config: AnalyticConfig, seed: u64) -> Result<Self> {
        let (c, t) = (config.context_dim, config.target_dim);
        let n = c + t;
        if c == 0 || t == 0 || n > 16 || config.components.is_empty() {
            return Err(Error::InvalidArgument("analytic task needs 1..=8 context and target dims".into()));
        }
        let total_w: f64 = config.components.iter().map(|g| g.weight).sum();
        let mut comps = Vec::new();
        for g in &config.components {
            if g.mean.len() != n || g.cov.len() != n * n || !(g.weight > 0.0) {
                return Err(Error::InvalidArgument("malformed mixture component".into()));
            }
            let cov = DMatrix::from_row_slice(n, n, &g.cov);
            if (&cov - cov.transpose()).abs().max() > 1e-12 {
                return Err(Error::InvalidArgument("covariance must be symmetric".into()));
            }
            let joint_chol = cholesky(cov.clone())?;
            let s_cc = cov.view((0, 0), (c, c)).into_owned();
            let s_xc = cov.view((c, 0), (t, c)).into_owned();
            let s_xx = cov.view((c, c), (t, t)).into_owned();
            let cc = s_cc.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
            let cc_chol = cc.l();
            let cc_log_det = 2.0 * cc_chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            // gain = S_xc S_cc^-1
            let gain = cc.solve(&s_xc.transpose()).transpose();
            let cond = &s_xx - &gain * s_xc.transpose();
            let cond = (&cond + cond.transpose()) * 0.5;
            let cond_var = cond.diagonal().iter().map(|v| v.max(0.0)).collect();
            let cond_chol = cholesky(cond + DMatrix::identity(t, t) * 1e-14)?;
            comps.push(Prepared {
                log_weight: (g.weight / total_w).ln(),
                mean_c: DVector::from_column_slice(&g.mean[..c]),
                mean_x: DVector::from_column_slice(&g.mean[c..]),
                joint_chol,
                cc_chol,
                cc_log_det,
                gain,
                cond_chol,
                cond_var,
            });
        }
        Ok(Self { config, seed, comps })
    }

    pub fn config(&self) -> &AnalyticConfig {
        &self.config
    }

    /// Closed-form law of `X0 | C = context`.
    pub fn conditional(&self, context: &[f64]) -> ConditionalLaw {
        let c = DVector::from_column_slice(context);
        let mut logs = Vec::with_capacity(self.comps.len());
        let mut parts = Vec::with_capacity(self.comps.len());
        for p in &self.comps {
            let diff = &c - &p.mean_c;
            let w = p
                .cc_chol
                .solve_lower_triangular(&diff)
                .expect("cholesky factor is invertible");
            logs.push(p.log_weight - 0.5 * p.cc_log_det - 0.5 * w.norm_squared());
            let mu = &p.mean_x + &p.gain * diff;
            parts.push((mu.iter().copied().collect::<Vec<_>>(), p.cond_chol.clone(), p.cond_var.clone()));
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        let components = logs
            .iter()
            .zip(parts)
            .map(|(l, (mu, chol, var))| ((l - top).exp() / z, mu, chol, var))
            .collect();
        ConditionalLaw { components }
    }

    /// Draws `(C, X0)` from the joint and returns it with the exact conditional law.
    pub fn draw(&self, rng: &mut Rng) -> (TaskSample, ConditionalLaw) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.comps.len() - 1;
        for (k, p) in self.comps.iter().enumerate() {
            acc += p.log_weight.exp();
            if u < acc {
                pick = k;
                break;
            }
        }
        let p = &self.comps[pick];
        let n = self.config.context_dim + self.config.target_dim;
        let z = DVector::from_vec(standard_normal(rng, n));
        let joint = &p.joint_chol * z;
        let cdim = self.config.context_dim;
        let ctx: Vec<f64> = (0..cdim).map(|i| joint[i] + p.mean_c[i]).collect();
        let x0: Vec<f64> = (0..self.config.target_dim)
            .map(|i| joint[cdim + i] + p.mean_x[i])
            .collect();
        let law = self.conditional(&ctx);
        (
            TaskSample {
                context: Context::Analytic(ctx),
                x0: Field::from_vec(x0).expect("finite draw"),
            },
            law,
        )
    }
}

impl ConditionalTask for AnalyticTask {
    fn name(&self) -> &'static str {
        "analytic"
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.config.target_dim]
    }

    fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    fn sample(&self, index: u64) -> TaskSample {
        self.draw(&mut stream(self.seed, index)).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_context_gives_marginal_moments() {
        let task = AnalyticTask::new(AnalyticConfig::independent(2, vec![0.5, -1.0], vec![2.0, 0.3]), 1).unwrap();
        for ctx in [[0.0, 0.0], [3.0, -2.0]] {
            let law = task.conditional(&ctx);
            let m = law.mean();
            let s = law.std();
            assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] + 1.0).abs() < 1e-12);
            assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn correlated_pair_conditional_std() {
        let task = AnalyticTask::new(AnalyticConfig::correlated(1, 0.8), 1).unwrap();
        let law = task.conditional(&[1.5]);
        assert!((law.std()[0] - 0.6).abs() < 1e-12);
        assert!((law.mean()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn separated_mixture_is_effectively_unimodal() {
        let task = AnalyticTask::new(AnalyticConfig::mixture(2, 0.9, 3.0, 0.5), 1).unwrap();
        let law = task.conditional(&[3.1, 2.8]);
        // direct responsibility: ratio of the two context likelihoods
        let r = law.responsibilities();
        assert!(r[0] > 0.99, "{r:?}");
        let law = task.conditional(&[-2.9, -3.2]);
        assert!(law.responsibilities()[1] > 0.99);
    }

    #[test]
    fn non_psd_covariance_is_rejected() {
        let mut cfg = AnalyticConfig::correlated(1, 0.5);
        cfg.components[0].cov = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(AnalyticTask::new(cfg, 0), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn samples_are_deterministic_in_index() {
        let task = AnalyticTask::new(AnalyticConfig::correlated(2, 0.5), 4).unwrap();
        assert_eq!(task.sample(7), task.sample(7));
        assert_ne!(task.sample(7), task.sample(8));
    }
}
