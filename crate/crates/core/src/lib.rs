//! Discrete weak KAM theory on a staggered space-time grid.
//!
//! Hamilton-Jacobi equations with a time-periodic Tonelli Hamiltonian are
//! discretized by an explicit Lax-Friedrichs type scheme whose value function
//! is the minimal expected action of a controlled random walk. On top of the
//! scheme sit effective Hamiltonians, time-periodic solutions, occupation and
//! minimizing measures, rotation vectors and Aubry sets.
//!
//! ```
//! use gridkam::grid::build_grid;
//! use gridkam::models::builtin_model;
//! use gridkam::weakkam::{find_periodic_solution, FixedPointOptions};
//!
//! let grid = build_grid(1, 8, 32).unwrap();
//! let model = builtin_model("free").unwrap();
//! let sol = find_periodic_solution(&grid, &model, &[0.5], None, &FixedPointOptions::default()).unwrap();
//! assert!((sol.hbar - 0.125).abs() < 1e-14);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod error;
pub mod grid;
pub mod hj;
pub mod io;
pub mod mather;
pub mod models;
pub mod oracle;
pub mod walk;
pub mod weakkam;

pub use error::{Error, Result};
pub use grid::{build_grid, GridSpec, Parity, ScalarField, VectorField};
pub use models::{builtin_model, compute_bounds, HamiltonianModel, ParamBox, SchemeBounds};
pub use walk::{ControlPolicy, Direction};
pub use weakkam::PeriodicSolution;
