//! Synthetic conditional-generation tasks with known ground truth.
//!
//! Every generator is a pure function of `(seed, index)` so datasets are
//! regenerated on demand instead of stored.

mod analytic;
mod forecast;
mod inpainting;
mod rollout;

use serde::{Deserialize, Serialize};

use crate::field::Field;

pub use analytic::{AnalyticConfig, AnalyticTask, ConditionalLaw, GaussianComponent};
pub use forecast::{ForecastConfig, ForecastTask};
pub use inpainting::{InpaintingConfig, InpaintingTask};
pub use rollout::{rollout, Ensemble};

/// Conditioning information for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    /// Observed coordinates of a jointly distributed vector.
    Analytic(Vec<f64>),
    /// Image with hidden pixels zeroed, and the binary visibility mask.
    Inpainting { masked: Field, mask: Field },
    /// The current state and the state one step earlier.
    Forecast { previous: Field, current: Field },
}

impl Context {
    /// Flattened network input.
    pub fn features(&self) -> Vec<f64> {
        match self {
            Context::Analytic(c) => c.clone(),
            Context::Inpainting { masked, mask } => {
                masked.data().iter().chain(mask.data()).copied().collect()
            }
            Context::Forecast { previous, current } => {
                previous.data().iter().chain(current.data()).copied().collect()
            }
        }
    }
}

/// A context paired with its ground-truth completion.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub context: Context,
    pub x0: Field,
}

/// Common interface the training pipeline uses for every task.
pub trait ConditionalTask: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample_shape(&self) -> Vec<usize>;
    fn context_dim(&self) -> usize;
    /// Deterministic in `(dataset seed, index)`.
    fn sample(&self, index: u64) -> TaskSample;

    fn sample_dim(&self) -> usize {
        self.sample_shape().iter().product()
    }
}
