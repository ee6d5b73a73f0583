use anyhow::{anyhow, Result};

/// Generator forward passes for an ensemble forecast:
/// members x days x steps per day x evaluations per step.
pub fn compute_rollout_cost(n_ensemble: u64, horizon_days: u64, steps_per_day: u64, nfe: u64) -> Result<u64> {
    [horizon_days, steps_per_day, nfe]
        .iter()
        .try_fold(n_ensemble, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| anyhow!("rollout cost overflows u64"))
}
