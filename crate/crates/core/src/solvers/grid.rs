use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default integration bounds; the log-SNR grid diverges at both ends of `[0, 1]`.
pub const S_MIN: f64 = 1e-4;
pub const S_MAX: f64 = 1.0 - 1e-4;

const EDM_SIGMA_MIN: f64 = 0.002;
const EDM_SIGMA_MAX: f64 = 80.0;
const EDM_RHO: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    Quadratic,
    LogSnr,
    Edm,
}

impl GridKind {
    pub const ALL: [GridKind; 4] = [GridKind::Uniform, GridKind::Quadratic, GridKind::LogSnr, GridKind::Edm];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Uniform => "uniform",
            GridKind::Quadratic => "quadratic",
            GridKind::LogSnr => "log_snr",
            GridKind::Edm => "edm",
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GridKind::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown grid {s:?}")))
    }
}

/// Strictly decreasing integration nodes from `s_max` to `s_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub kind: GridKind,
    pub nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn s_max(&self) -> f64 {
        self.nodes[0]
    }

    pub fn s_min(&self) -> f64 {
        *self.nodes.last().expect("grid has at least two nodes")
    }
}

/// log((1 - s) / s), the log signal-to-noise ratio of the linear path.
pub fn lambda(s: f64) -> f64 {
    ((1.0 - s) / s).ln()
}

/// Inverse of [`lambda`].
pub fn s_of_lambda(lambda: f64) -> f64 {
    1.0 / (1.0 + lambda.exp())
}

/// Grid with `steps + 1` nodes.
pub fn build_grid(kind: GridKind, steps: usize, s_min: f64, s_max: f64) -> Result<TimeGrid> {
    if steps == 0 {
        return Err(Error::InvalidArgument("a grid needs at least one step".into()));
    }
    if !(0.0 <= s_min && s_min < s_max && s_max <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid bounds must satisfy 0 <= s_min < s_max <= 1, got [{s_min}, {s_max}]"
        )));
    }
    let n = steps as f64;
    let lerp = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / n;
    let mut nodes: Vec<f64> = match kind {
        GridKind::Uniform => (0..=steps).map(|i| lerp(s_max, s_min, i)).collect(),
        GridKind::Quadratic => (0..=steps)
            .map(|i| lerp(s_max.sqrt(), s_min.sqrt(), i).powi(2))
            .collect(),
        GridKind::LogSnr => {
            if s_min == 0.0 || s_max == 1.0 {
                return Err(Error::InvalidArgument(
                    "log_snr grid needs bounds strictly inside (0, 1)".into(),
                ));
            }
            let (hi, lo) = (lambda(s_max), lambda(s_min));
            (0..=steps).map(|i| s_of_lambda(lerp(hi, lo, i))).collect()
        }
        GridKind::Edm => {
            let to_sigma = |s: f64| if s >= 1.0 { f64::INFINITY } else { s / (1.0 - s) };
            let smax = to_sigma(s_max).clamp(EDM_SIGMA_MIN, EDM_SIGMA_MAX).powf(1.0 / EDM_RHO);
            let smin = to_sigma(s_min).clamp(EDM_SIGMA_MIN, EDM_SIGMA_MAX).powf(1.0 / EDM_RHO);
            (0..=steps)
                .map(|i| {
                    let sigma = lerp(smax, smin, i).powf(EDM_RHO);
                    sigma / (1.0 + sigma)
                })
                .collect()
        }
    };
    nodes[0] = s_max;
    nodes[steps] = s_min;
    if nodes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "{kind} grid with {steps} steps is not strictly decreasing on [{s_min}, {s_max}]"
        )));
    }
    Ok(TimeGrid { kind, nodes })
}
