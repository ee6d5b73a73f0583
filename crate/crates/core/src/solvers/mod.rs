//! Time grids, fixed-step ODE integrators, single-step DPM-Solver, and
//! end-to-end warm-start sampling.

mod grid;
mod integrate;
mod sample;

pub use grid::{build_grid, lambda, s_of_lambda, GridKind, TimeGrid, S_MAX, S_MIN};
pub use integrate::{dpm_step, integrate, Denoised, Integration, Method, SolverSpec};
pub use sample::{context_matrix, sample_normalised, sample_warm_start, ModelBundle};
