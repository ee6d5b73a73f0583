//! Solver sweeps over (NFE, method, grid, warmth) cells.

use std::collections::BTreeMap;

use anyhow::{Context as _, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wsd_core::metrics::{crps_ensemble, energy_distance, power_spectrum_ratio, rmse, MetricRow};
use wsd_core::rng::{derive_seed, stream};
use wsd_core::solvers::{GridKind, Method, ModelBundle, SolverSpec};
use wsd_core::tasks::{rollout, ConditionalTask, ForecastTask};
use wsd_core::Field;

use crate::config::ExperimentConfig;

pub const TAG_EVAL_NOISE: u64 = 11;
const TAG_ROLLOUT: u64 = 12;
const TAG_TRUTH: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub grid: GridKind,
    pub nfe: usize,
    pub warmth: f64,
}

impl Cell {
    pub fn spec(&self) -> SolverSpec {
        SolverSpec {
            warmth: self.warmth,
            ..SolverSpec::new(self.method, self.grid, self.nfe)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub method: Method,
    pub nfe: usize,
    pub reason: String,
}

/// Compatible cells in config order, plus the skipped (method, NFE) pairs.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> (Vec<Cell>, Vec<SkippedCell>) {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &nfe in &cfg.sweep.nfe {
        for &method in &cfg.sweep.methods {
            if let Err(e) = method.steps_for(nfe) {
                skipped.push(SkippedCell { method, nfe, reason: e.to_string() });
                continue;
            }
            for &grid in &cfg.sweep.grids {
                for &warmth in &cfg.sweep.warmth {
                    cells.push(Cell { method, grid, nfe, warmth });
                }
            }
        }
    }
    (cells, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<MetricRow>,
    pub skipped: Vec<SkippedCell>,
    /// Per-sample generator evaluations spent across all cells.
    pub velocity_evals: u64,
}

impl SweepResult {
    pub fn best_per_nfe(&self) -> Vec<MetricRow> {
        best_per_nfe(&self.rows)
    }
}

/// Lowest value per (task, mode, metric, NFE); ties keep the first row.
pub fn best_per_nfe(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut best: BTreeMap<(String, String, String, usize), MetricRow> = BTreeMap::new();
    for r in rows {
        let key = (r.task.clone(), r.mode.clone(), r.metric_name.clone(), r.nfe);
        match best.get(&key) {
            Some(b) if b.value <= r.value => {}
            _ => {
                best.insert(key, r.clone());
            }
        }
    }
    best.into_values().collect()
}

fn row(cfg: &ExperimentConfig, cell: &Cell, metric: &str, value: f64, n: usize) -> MetricRow {
    MetricRow {
        run_id: cfg.run_id.clone(),
        task: cfg.task.name().into(),
        mode: cfg.mode.name().into(),
        method: cell.method.name().into(),
        grid: cell.grid.name().into(),
        nfe: cell.nfe,
        warmth: cell.warmth,
        metric_name: metric.into(),
        value,
        n_samples: n,
        seed: cfg.seed,
    }
}

/// Energy distance between one sample per held-out context and the true
/// targets. Every cell uses the same starting noise for sample `i`.
pub fn run_sweep(cfg: &ExperimentConfig, task: &dyn ConditionalTask, bundle: &ModelBundle) -> Result<SweepResult> {
    let (cells, skipped) = enumerate_cells(cfg);
    let n = cfg.sweep.n_eval;
    let held_out: Vec<_> = (0..n as u64).map(|i| task.sample(cfg.n_train as u64 + i)).collect();
    let contexts: Vec<_> = held_out.iter().map(|s| s.context.clone()).collect();
    let truth: Vec<Field> = held_out.into_iter().map(|s| s.x0).collect();
    let noise_seed = derive_seed(cfg.seed, TAG_EVAL_NOISE);
    let before = bundle.velocity_evals();
    let rows = cells
        .par_iter()
        .map(|cell| {
            let samples = bundle
                .sample_contexts(&contexts, &cell.spec(), noise_seed, 0)
                .with_context(|| format!("sampling cell {cell:?}"))?;
            let ed = energy_distance(&samples, &truth)?;
            Ok(row(cfg, cell, "energy_distance", ed, n))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        rows,
        skipped,
        velocity_evals: bundle.velocity_evals() - before,
    })
}

/// Ensemble forecasts from held-out initial conditions.
///
/// Rows per cell: `crps_lead_<t>` for every lead time, their average
/// `crps_mean`, the ensemble-mean RMSE averaged over leads, the spectrum
/// summary, and `eta_<k>` for each retained wavenumber `k`. The reference
/// spectrum comes from an equally sized ensemble of the true dynamics.
pub fn run_forecast_sweep(cfg: &ExperimentConfig, task: &ForecastTask, bundle: &ModelBundle) -> Result<SweepResult> {
    let (cells, skipped) = enumerate_cells(cfg);
    let r = &cfg.rollout;
    let ics: Vec<(Field, Field)> = (0..r.n_initial as u64)
        .map(|i| {
            let (p, c) = task.initial_condition(cfg.n_train as u64 + i);
            Ok((Field::from_vec(p)?, Field::from_vec(c)?))
        })
        .collect::<Result<_>>()?;
    let truth_seed = derive_seed(cfg.seed, TAG_TRUTH);
    // truth[ic][member][lead], lead 0 is the initial state
    let truth: Vec<Vec<Vec<Field>>> = ics
        .iter()
        .enumerate()
        .map(|(i, (p, c))| {
            (0..r.n_ensemble as u64)
                .map(|m| {
                    let mut rng = stream(derive_seed(truth_seed, i as u64), m);
                    let mut states = vec![c.clone()];
                    for s in task.trajectory(p.data(), c.data(), r.n_steps, &mut rng) {
                        states.push(Field::from_vec(s)?);
                    }
                    Ok(states)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let truth_pool: Vec<Field> = truth
        .iter()
        .flat_map(|ic| ic.iter().flat_map(|m| m[1..].iter().cloned()))
        .collect();

    let rollout_seed = derive_seed(cfg.seed, TAG_ROLLOUT);
    let before = bundle.velocity_evals();
    let rows = cells
        .par_iter()
        .map(|cell| -> Result<Vec<MetricRow>> {
            let spec = cell.spec();
            let mut crps = vec![0.0; r.n_steps];
            let mut err = 0.0;
            let mut pool = Vec::new();
            for (i, (p, c)) in ics.iter().enumerate() {
                let ens = rollout(bundle, p, c, r.n_steps, r.n_ensemble, &spec, derive_seed(rollout_seed, i as u64))
                    .with_context(|| format!("rollout for cell {cell:?}"))?;
                let reference = &truth[i][0];
                for (t, acc) in crps.iter_mut().enumerate() {
                    let lead = t + 1;
                    let members: Vec<Field> = ens.at_step(lead).into_iter().cloned().collect();
                    *acc += crps_ensemble(&members, &reference[lead])?;
                    let mut mean = vec![0.0; reference[lead].len()];
                    for m in &members {
                        for (a, v) in mean.iter_mut().zip(m.data()) {
                            *a += v / members.len() as f64;
                        }
                    }
                    err += rmse(&Field::from_vec(mean)?, &reference[lead])?;
                    pool.extend(members);
                }
            }
            let n_ic = ics.len() as f64;
            let spectrum = power_spectrum_ratio(&pool, &truth_pool)?;
            let n = r.n_initial * r.n_ensemble;
            let mut out: Vec<MetricRow> = crps
                .iter()
                .enumerate()
                .map(|(t, v)| row(cfg, cell, &format!("crps_lead_{}", t + 1), v / n_ic, n))
                .collect();
            out.push(row(cfg, cell, "crps_mean", crps.iter().sum::<f64>() / (n_ic * r.n_steps.max(1) as f64), n));
            out.push(row(cfg, cell, "ensemble_mean_rmse", err / (n_ic * r.n_steps.max(1) as f64), n));
            out.push(row(cfg, cell, "spectrum_summary", spectrum.summary, n));
            let len = task.config().length as f64;
            for (wl, eta) in spectrum.wavelengths.iter().zip(&spectrum.eta) {
                out.push(row(cfg, cell, &format!("eta_{}", (len / wl).round() as usize), *eta, n));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(SweepResult {
        rows,
        skipped,
        velocity_evals: bundle.velocity_evals() - before,
    })
}

/// For each NFE in the best-per-NFE table of `metric`, the winning method;
/// the entries where the winner changes mark the empirical switchover points.
pub fn switchover(rows: &[MetricRow], metric: &str) -> Vec<(usize, String)> {
    let mut out: Vec<(usize, String)> = Vec::new();
    for r in best_per_nfe(rows).into_iter().filter(|r| r.metric_name == metric) {
        if out.last().is_none_or(|(_, m)| *m != r.method) {
            out.push((r.nfe, r.method));
        }
    }
    out
}
