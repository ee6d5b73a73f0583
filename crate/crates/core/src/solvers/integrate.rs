use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::grid::{build_grid, lambda, s_of_lambda, GridKind, TimeGrid};
use crate::error::{Error, Result};

/// Clamp applied to `s` wherever log-SNR coefficients are formed. Grids
/// inside `[S_MIN, S_MAX]` never reach it.
const LAMBDA_CLAMP: f64 = super::grid::S_MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
    Dpm1,
    Dpm2,
    Dpm3,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Euler,
        Method::Midpoint,
        Method::Rk4,
        Method::Dpm1,
        Method::Dpm2,
        Method::Dpm3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
            Method::Dpm1 => "dpm1",
            Method::Dpm2 => "dpm2",
            Method::Dpm3 => "dpm3",
        }
    }

    /// Model evaluations consumed by one step.
    pub fn evals_per_step(self) -> usize {
        match self {
            Method::Euler | Method::Dpm1 => 1,
            Method::Midpoint | Method::Dpm2 => 2,
            Method::Dpm3 => 3,
            Method::Rk4 => 4,
        }
    }

    /// Number of steps that spends exactly `nfe` evaluations.
    pub fn steps_for(self, nfe: usize) -> Result<usize> {
        let k = self.evals_per_step();
        if nfe == 0 || nfe % k != 0 {
            return Err(Error::IncompatibleSolver {
                method: self.name().into(),
                nfe,
            });
        }
        Ok(nfe / k)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown solver {s:?}")))
    }
}

fn default_warmth() -> f64 {
    1.0
}

/// Solver configuration, serialised as
/// `{"method": "dpm3", "grid": "log_snr", "nfe": 12, "warmth": 1.0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    pub grid: GridKind,
    pub nfe: usize,
    #[serde(default = "default_warmth")]
    pub warmth: f64,
}

impl SolverSpec {
    pub fn new(method: Method, grid: GridKind, nfe: usize) -> Self {
        Self {
            method,
            grid,
            nfe,
            warmth: 1.0,
        }
    }

    pub fn time_grid(&self, s_min: f64, s_max: f64) -> Result<TimeGrid> {
        build_grid(self.grid, self.method.steps_for(self.nfe)?, s_min, s_max)
    }
}

/// Noise and data predictions at one state.
#[derive(Debug, Clone)]
pub struct Denoised {
    pub eps: Array2<f64>,
    pub x0: Array2<f64>,
}

impl Denoised {
    /// From a velocity under the linear path.
    pub fn from_velocity(x: ArrayView2<f64>, v: &Array2<f64>, s: f64) -> Self {
        Self {
            eps: &x + &(v * (1.0 - s)),
            x0: &x - &(v * s),
        }
    }

    /// From a noise prediction; needs `s < 1`.
    pub fn from_noise(x: ArrayView2<f64>, eps: Array2<f64>, s: f64) -> Self {
        let x0 = (&x - &(&eps * s)) / (1.0 - s);
        Self { eps, x0 }
    }
}

/// Output of [`integrate`]: the state at the last grid node, the number of
/// model evaluations spent, and the most recent velocity.
#[derive(Debug, Clone)]
pub struct Integration {
    pub x: Array2<f64>,
    pub evals: usize,
    pub last_velocity: Array2<f64>,
    pub s_end: f64,
}

impl Integration {
    /// Jump from the last node to `s = 0` reusing the last velocity, so the
    /// evaluation count stays at the budget.
    pub fn to_data(&self) -> Array2<f64> {
        &self.x - &(&self.last_velocity * self.s_end)
    }
}

fn alpha(s: f64) -> f64 {
    1.0 - s
}

fn clamp_s(s: f64) -> f64 {
    s.clamp(LAMBDA_CLAMP, 1.0 - LAMBDA_CLAMP)
}

/// `alpha_t x0_hat + sigma_t eps_hat`.
fn ddim(d: &Denoised, t: f64) -> Array2<f64> {
    &d.x0 * alpha(t) + &d.eps * t
}

/// Single-step DPM-Solver update of order 1, 2 or 3 in noise-prediction form.
/// Order 1 is the DDIM update `alpha_t x0_hat + sigma_t eps_hat`.
pub fn dpm_step<F>(denoise: &mut F, x: ArrayView2<f64>, s_from: f64, s_to: f64, order: usize) -> Result<Array2<f64>>
where
    F: FnMut(ArrayView2<f64>, f64) -> Result<Denoised>,
{
    if s_to >= s_from {
        return Err(Error::InvalidArgument(format!(
            "dpm step must decrease s, got {s_from} -> {s_to}"
        )));
    }
    if !(1..=3).contains(&order) {
        return Err(Error::InvalidArgument(format!("dpm order {order} not in 1..=3")));
    }
    let d0 = denoise(x, s_from)?;
    if order == 1 {
        return Ok(ddim(&d0, s_to));
    }
    let (lam_s, lam_t) = (lambda(clamp_s(s_from)), lambda(clamp_s(s_to)));
    let h = lam_t - lam_s;
    let sig_t = clamp_s(s_to);
    let node = |r: f64| s_of_lambda(lam_s + r * h);
    if order == 2 {
        let r1 = 0.5;
        let s1 = node(r1);
        let u = ddim(&d0, s1);
        let diff = denoise(u.view(), s1)?.eps - &d0.eps;
        let phi1 = sig_t * h.exp_m1();
        return Ok(ddim(&d0, s_to) - diff * (phi1 / (2.0 * r1)));
    }
    let (r1, r2) = (1.0 / 3.0, 2.0 / 3.0);
    let (s1, s2) = (node(r1), node(r2));
    let u1 = ddim(&d0, s1);
    let d1 = denoise(u1.view(), s1)?.eps - &d0.eps;
    let c2 = clamp_s(s2) * (r2 / r1) * ((r2 * h).exp_m1() / (r2 * h) - 1.0);
    let u2 = ddim(&d0, s2) - d1 * c2;
    let d2 = denoise(u2.view(), s2)?.eps - &d0.eps;
    let c3 = sig_t / r2 * (h.exp_m1() / h - 1.0);
    Ok(ddim(&d0, s_to) - d2 * c3)
}

fn check_finite(x: &Array2<f64>, step: usize, s: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, s })
    }
}

/// Integrate `dx/ds = v(x, s)` from `grid.s_max()` down to `grid.s_min()`.
/// Rows of `x_start` are independent samples evaluated in one batch per call.
pub fn integrate<V>(mut velocity: V, x_start: Array2<f64>, method: Method, grid: &TimeGrid) -> Result<Integration>
where
    V: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    let mut evals = 0usize;
    let mut last_velocity = Array2::zeros(x_start.raw_dim());
    let mut x = x_start;
    check_finite(&x, 0, grid.s_max())?;
    for (step, w) in grid.nodes.windows(2).enumerate() {
        let (s, t) = (w[0], w[1]);
        let h = t - s;
        let mut eval = |x: ArrayView2<f64>, s: f64| -> Result<Array2<f64>> {
            evals += 1;
            let v = velocity(x, s)?;
            check_finite(&v, step, s)?;
            last_velocity = v.clone();
            Ok(v)
        };
        x = match method {
            Method::Euler => {
                let k1 = eval(x.view(), s)?;
                &x + &(k1 * h)
            }
            Method::Midpoint => {
                let k1 = eval(x.view(), s)?;
                let xm = &x + &(k1 * (0.5 * h));
                let k2 = eval(xm.view(), s + 0.5 * h)?;
                &x + &(k2 * h)
            }
            Method::Rk4 => {
                let k1 = eval(x.view(), s)?;
                let k2 = eval((&x + &(&k1 * (0.5 * h))).view(), s + 0.5 * h)?;
                let k3 = eval((&x + &(&k2 * (0.5 * h))).view(), s + 0.5 * h)?;
                let k4 = eval((&x + &(&k3 * h)).view(), t)?;
                &x + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
            }
            Method::Dpm1 | Method::Dpm2 | Method::Dpm3 => {
                let mut denoise = |x: ArrayView2<f64>, s: f64| -> Result<Denoised> {
                    let v = eval(x, s)?;
                    Ok(Denoised::from_velocity(x, &v, s))
                };
                dpm_step(&mut denoise, x.view(), s, t, method.evals_per_step())?
            }
        };
        check_finite(&x, step, t)?;
    }
    Ok(Integration {
        x,
        evals,
        last_velocity,
        s_end: grid.s_min(),
    })
}
