use super::Context;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::{derive_seed, stream, Rng};
use crate::solvers::{context_matrix, ModelBundle, SolverSpec};

/// Autoregressive forecast ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `members[i][0]` is the initial state; entry `k` is the state after `k` steps.
    pub members: Vec<Vec<Field>>,
    /// Step at which a member produced a non-finite state and was stopped.
    pub truncated: Vec<Option<usize>>,
}

impl Ensemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// States of every member that reached lead time `step`.
    pub fn at_step(&self, step: usize) -> Vec<&Field> {
        self.members.iter().filter_map(|m| m.get(step)).collect()
    }
}

fn member_rngs(seed: u64, step: usize, members: &[usize]) -> Vec<Rng> {
    let step_seed = derive_seed(seed, step as u64);
    members.iter().map(|&m| stream(step_seed, m as u64)).collect()
}

/// Runs `n_ensemble` independent chains, each feeding its own previous two
/// states back as context. Members differ only in their noise streams.
pub fn rollout(
    bundle: &ModelBundle,
    previous: &Field,
    current: &Field,
    n_steps: usize,
    n_ensemble: usize,
    spec: &SolverSpec,
    seed: u64,
) -> Result<Ensemble> {
    if n_ensemble == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one member".into()));
    }
    let shape = bundle.generator().sample_shape().to_vec();
    let ctx_dim = bundle.generator().context_dim();
    let mut prev: Vec<Field> = vec![previous.clone(); n_ensemble];
    let mut members: Vec<Vec<Field>> = vec![vec![current.clone()]; n_ensemble];
    let mut truncated = vec![None; n_ensemble];

    for step in 1..=n_steps {
        let active: Vec<usize> = (0..n_ensemble).filter(|&i| truncated[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let contexts: Vec<Context> = active
            .iter()
            .map(|&i| Context::Forecast {
                previous: prev[i].clone(),
                current: members[i].last().expect("non-empty chain").clone(),
            })
            .collect();
        let feats = context_matrix(&contexts, ctx_dim)?;
        let mut rngs = member_rngs(seed, step, &active);
        let rows: Vec<Option<Vec<f64>>> = match bundle.sample_batch(feats.view(), spec, &mut rngs) {
            Ok(x) => x.outer_iter().map(|r| Some(r.to_vec())).collect(),
            Err(Error::Diverged { .. }) => {
                // isolate the failing members by resampling one at a time
                let mut rngs = member_rngs(seed, step, &active);
                (0..active.len())
                    .map(|j| {
                        let row = feats.slice(ndarray::s![j..j + 1, ..]);
                        match bundle.sample_batch(row, spec, &mut rngs[j..j + 1]) {
                            Ok(x) => Ok(Some(x.row(0).to_vec())),
                            Err(Error::Diverged { .. }) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect::<Result<_>>()?
            }
            Err(e) => return Err(e),
        };
        for (&i, row) in active.iter().zip(rows) {
            match row.filter(|r| r.iter().all(|v| v.is_finite())) {
                Some(r) => {
                    let next = Field::new(r, shape.clone())?;
                    let last = members[i].last().expect("non-empty chain").clone();
                    prev[i] = last;
                    members[i].push(next);
                }
                None => truncated[i] = Some(step),
            }
        }
    }
    Ok(Ensemble { members, truncated })
}
