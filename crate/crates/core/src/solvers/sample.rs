use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};

use super::grid::{S_MAX, S_MIN};
use super::integrate::{integrate, SolverSpec};
use crate::error::{shape_err, Error, Result};
use crate::field::Field;
use crate::flowmatch::{Conditioning, GenerativeModel};
use crate::rng::{standard_normal, stream, Rng};
use crate::tasks::Context;
use crate::warmstart::{check_warmth, WarmStartModel};

/// Integrates a batch of starting noise in normalised space, jumps to `s = 0`
/// and maps back through `cond`. Returns the samples and the number of
/// batched model calls.
pub fn sample_normalised<V>(
    velocity: V,
    cond: &Conditioning,
    noise: Array2<f64>,
    spec: &SolverSpec,
) -> Result<(Array2<f64>, usize)>
where
    V: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    if noise.dim() != cond.shift.dim() {
        return Err(shape_err("starting noise", cond.shift.len(), noise.len()));
    }
    let grid = spec.time_grid(S_MIN, S_MAX)?;
    let out = integrate(velocity, noise, spec.method, &grid)?;
    let x = cond.unnormalise(out.to_data().view());
    Ok((x, out.evals))
}

/// Frozen warm-start and generator weights used for sampling.
#[derive(Debug)]
pub struct ModelBundle {
    warm: Option<(WarmStartModel, Vec<f64>)>,
    generator: GenerativeModel,
    params: Vec<f64>,
    velocity_evals: AtomicU64,
    warm_evals: AtomicU64,
}

impl ModelBundle {
    pub fn new(warm: Option<(WarmStartModel, Vec<f64>)>, generator: GenerativeModel, params: Vec<f64>) -> Result<Self> {
        if generator.mode().needs_moments() && warm.is_none() {
            return Err(Error::InvalidArgument(format!(
                "mode {} needs a warm-start model",
                generator.mode()
            )));
        }
        if params.len() != generator.mlp().n_params() {
            return Err(shape_err("generator parameters", generator.mlp().n_params(), params.len()));
        }
        if let Some((h, hp)) = &warm {
            if hp.len() != h.mlp().n_params() {
                return Err(shape_err("warm-start parameters", h.mlp().n_params(), hp.len()));
            }
            if h.sample_dim() != generator.sample_dim() {
                return Err(shape_err("warm-start sample dim", generator.sample_dim(), h.sample_dim()));
            }
        }
        Ok(Self {
            warm,
            generator,
            params,
            velocity_evals: AtomicU64::new(0),
            warm_evals: AtomicU64::new(0),
        })
    }

    pub fn generator(&self) -> &GenerativeModel {
        &self.generator
    }

    /// Per-sample generator forward passes since construction.
    pub fn velocity_evals(&self) -> u64 {
        self.velocity_evals.load(Ordering::Relaxed)
    }

    /// Per-sample warm-start forward passes since construction.
    pub fn warm_evals(&self) -> u64 {
        self.warm_evals.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.velocity_evals.store(0, Ordering::Relaxed);
        self.warm_evals.store(0, Ordering::Relaxed);
    }

    /// Moments and normalisation for a batch of flattened contexts.
    pub fn conditioning(&self, contexts: ArrayView2<f64>, warmth: f64) -> Result<Conditioning> {
        check_warmth(warmth)?;
        let b = contexts.nrows();
        let d = self.generator.sample_dim();
        let moments = match &self.warm {
            Some((h, hp)) if self.generator.mode().needs_moments() => {
                self.warm_evals.fetch_add(b as u64, Ordering::Relaxed);
                Some(h.predict_batch(hp, contexts)?)
            }
            _ => None,
        };
        self.generator.mode().conditioning(
            moments.as_ref().map(|(m, s)| (m.view(), s.view())),
            &vec![warmth; b],
            d,
        )
    }

    /// One sample per context row; row `i` draws its starting noise from `rngs[i]`.
    pub fn sample_batch(&self, contexts: ArrayView2<f64>, spec: &SolverSpec, rngs: &mut [Rng]) -> Result<Array2<f64>> {
        let b = contexts.nrows();
        if rngs.len() != b {
            return Err(shape_err("noise streams", b, rngs.len()));
        }
        let d = self.generator.sample_dim();
        let cond = self.conditioning(contexts, spec.warmth)?;
        let mut noise = Array2::zeros((b, d));
        for (mut row, rng) in noise.outer_iter_mut().zip(rngs.iter_mut()) {
            row.assign(&ndarray::Array1::from(standard_normal(rng, d)));
        }
        let velocity = |x: ArrayView2<f64>, s: f64| {
            self.velocity_evals.fetch_add(b as u64, Ordering::Relaxed);
            self.generator.velocity_batch(&self.params, x, s, contexts, &cond)
        };
        Ok(sample_normalised(velocity, &cond, noise, spec)?.0)
    }

    /// Samples for `contexts` with row `i` seeded by `stream(seed, first_index + i)`.
    pub fn sample_contexts(&self, contexts: &[Context], spec: &SolverSpec, seed: u64, first_index: u64) -> Result<Vec<Field>> {
        let feats = context_matrix(contexts, self.generator.context_dim())?;
        let mut rngs: Vec<Rng> = (0..contexts.len() as u64).map(|i| stream(seed, first_index + i)).collect();
        let x = self.sample_batch(feats.view(), spec, &mut rngs)?;
        let shape = self.generator.sample_shape().to_vec();
        x.outer_iter()
            .map(|r| Field::new(r.to_vec(), shape.clone()))
            .collect()
    }
}

/// Stack flattened context features into rows.
pub fn context_matrix(contexts: &[Context], context_dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((contexts.len(), context_dim));
    for (mut row, c) in m.outer_iter_mut().zip(contexts) {
        let f = c.features();
        if f.len() != context_dim {
            return Err(shape_err("context features", context_dim, f.len()));
        }
        row.assign(&ndarray::Array1::from(f));
    }
    Ok(m)
}

/// Warm-start sampling for a single context.
pub fn sample_warm_start(bundle: &ModelBundle, context: &Context, spec: &SolverSpec, rng: &mut Rng) -> Result<Field> {
    let feats = context_matrix(std::slice::from_ref(context), bundle.generator().context_dim())?;
    let x = bundle.sample_batch(feats.view(), spec, std::slice::from_mut(rng))?;
    Field::new(x.into_raw_vec_and_offset().0, bundle.generator().sample_shape().to_vec())
}
