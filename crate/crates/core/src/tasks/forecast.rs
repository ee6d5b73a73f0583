use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{ConditionalTask, Context, TaskSample};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::{standard_normal, stream, Rng};

/// Periodic 1D dynamics: advection, linear damping and power-law spectral forcing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    /// Number of grid cells (periodic).
    pub length: usize,
    /// Advection distance per step, in grid cells.
    pub advection: f64,
    /// Fraction of the state removed per step.
    pub damping: f64,
    /// Power-law exponent of the forcing (and stationary) spectrum.
    pub exponent: f64,
    pub forcing: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            length: 64,
            advection: 1.5,
            damping: 0.05,
            exponent: -3.0,
            forcing: true,
        }
    }
}

#[derive(Clone)]
pub struct ForecastTask {
    config: ForecastConfig,
    seed: u64,
    /// Spectral amplitude per FFT bin, normalised to unit per-cell variance.
    amplitude: Vec<f64>,
    forcing_std: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ForecastTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForecastTask")
            .field("config", &self.config)
            .field("seed", &self.seed)
            .finish()
    }
}

impl ForecastTask {
    pub fn new(config: ForecastConfig, seed: u64) -> Result<Self> {
        let n = config.length;
        if n < 4 {
            return Err(Error::InvalidArgument("forecast state needs at least 4 cells".into()));
        }
        if !(0.0..1.0).contains(&config.damping) || !config.advection.is_finite() {
            return Err(Error::InvalidArgument("damping must lie in [0, 1)".into()));
        }
        let mut amplitude: Vec<f64> = (0..n)
            .map(|j| {
                let k = j.min(n - j);
                if k == 0 {
                    0.0
                } else {
                    (k as f64).powf(config.exponent / 2.0)
                }
            })
            .collect();
        let var: f64 = amplitude.iter().map(|a| a * a).sum::<f64>() / n as f64;
        amplitude.iter_mut().for_each(|a| *a /= var.sqrt());
        let keep = 1.0 - config.damping;
        let forcing_std = if config.forcing {
            (1.0 - keep * keep).sqrt()
        } else {
            0.0
        };
        let mut planner = FftPlanner::new();
        Ok(Self {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            config,
            seed,
            amplitude,
            forcing_std,
        })
    }

    pub fn config(&self) -> &ForecastConfig {
        &self.config
    }

    /// Per-cell standard deviation of the forcing, i.e. of `next | current`.
    pub fn forcing_std(&self) -> f64 {
        self.forcing_std
    }

    /// Expected power of the stationary state at integer wavenumber `k >= 1`.
    pub fn stationary_power(&self, k: usize) -> f64 {
        let n = self.config.length as f64;
        let a = self.amplitude[k];
        a * a * n
    }

    fn spectral_filter(&self, mut buf: Vec<Complex<f64>>, gain: impl Fn(usize) -> Complex<f64>) -> Vec<f64> {
        let n = buf.len();
        self.fwd.process(&mut buf);
        for (j, c) in buf.iter_mut().enumerate() {
            *c *= gain(j);
        }
        self.inv.process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }

    /// Unit-variance field with the stationary power-law spectrum.
    fn coloured_noise(&self, rng: &mut Rng) -> Vec<f64> {
        let z: Vec<Complex<f64>> = standard_normal(rng, self.config.length)
            .into_iter()
            .map(|v| Complex::new(v, 0.0))
            .collect();
        self.spectral_filter(z, |j| Complex::new(self.amplitude[j], 0.0))
    }

    /// Shift a periodic field by `advection` cells; integer shifts are exact rotations.
    pub fn advect(&self, state: &[f64]) -> Vec<f64> {
        let n = state.len();
        let c = self.config.advection;
        if c.fract() == 0.0 {
            let shift = (c as i64).rem_euclid(n as i64) as usize;
            let mut out = state.to_vec();
            out.rotate_right(shift);
            return out;
        }
        let buf = state.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.spectral_filter(buf, |j| {
            let k = if 2 * j < n {
                j as f64
            } else if 2 * j == n {
                // Nyquist: keep the real part of the phase so the field stays real
                return Complex::new((std::f64::consts::PI * c).cos(), 0.0);
            } else {
                j as f64 - n as f64
            };
            Complex::from_polar(1.0, -2.0 * std::f64::consts::PI * k * c / n as f64)
        })
    }

    /// Conditional mean of the next state.
    pub fn conditional_mean(&self, current: &[f64]) -> Vec<f64> {
        let keep = 1.0 - self.config.damping;
        self.advect(current).into_iter().map(|v| keep * v).collect()
    }

    /// One step of the true dynamics. The stand-in dynamics are first order,
    /// so `_previous` only completes the two-state context signature.
    pub fn step(&self, _previous: &[f64], current: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut next = self.conditional_mean(current);
        if self.forcing_std > 0.0 {
            let f = self.coloured_noise(rng);
            for (x, fi) in next.iter_mut().zip(f) {
                *x += self.forcing_std * fi;
            }
        }
        next
    }

    /// A draw from the stationary distribution of the dynamics.
    pub fn stationary_state(&self, rng: &mut Rng) -> Vec<f64> {
        self.coloured_noise(rng)
    }

    /// `n_steps` further states of the true dynamics, starting from `(previous, current)`.
    pub fn trajectory(&self, previous: &[f64], current: &[f64], n_steps: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(n_steps);
        let mut prev = previous.to_vec();
        let mut now = current.to_vec();
        for _ in 0..n_steps {
            let next = self.step(&prev, &now, rng);
            prev = std::mem::replace(&mut now, next.clone());
            out.push(next);
        }
        out
    }

    pub fn context(&self, previous: Vec<f64>, current: Vec<f64>) -> Context {
        Context::Forecast {
            previous: Field::from_vec(previous).expect("finite state"),
            current: Field::from_vec(current).expect("finite state"),
        }
    }

    /// Initial condition `(previous, current)` drawn from the stationary law.
    pub fn initial_condition(&self, index: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(self.seed, index);
        let prev = self.stationary_state(&mut rng);
        let now = self.step(&prev, &prev, &mut rng);
        (prev, now)
    }
}

impl ConditionalTask for ForecastTask {
    fn name(&self) -> &'static str {
        "forecast"
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![self.config.length]
    }

    fn context_dim(&self) -> usize {
        2 * self.config.length
    }

    fn sample(&self, index: u64) -> TaskSample {
        let mut rng = stream(self.seed, index);
        let prev = self.stationary_state(&mut rng);
        let now = self.step(&prev, &prev, &mut rng);
        let next = self.step(&prev, &now, &mut rng);
        TaskSample {
            context: self.context(prev, now),
            x0: Field::from_vec(next).expect("finite state"),
        }
    }
}
