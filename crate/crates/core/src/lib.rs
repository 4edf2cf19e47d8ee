//! Safe local trajectory planning from local observations.
//!
//! The crate is organized as a pipeline:
//!
//! * [`geom`] — occupancy grids, exact signed distance fields, random
//!   environment generation, dataset augmentation, local windows.
//! * [`dynamics`] — robot models (Dubins car, dynamic unicycle) with
//!   analytic Hamiltonians for the reachability solver.
//! * [`reach`] — grid-based solution of the final-value variational
//!   inequality whose zero-sublevel set is the backward reachable tube;
//!   the complement is the maximal safe set.
//! * [`nn`] — a small reverse-mode autodiff engine (dense, conv, the
//!   activations used here) plus Adam.
//! * [`hyper`] — the hypernetwork that maps a local SDF to the weights of
//!   a small value network, the radially-weighted loss, and training.
//! * [`mpc`] — a single-shooting nonlinear MPC with pluggable safety
//!   constraints (SDF stage, discrete CBF, neural/oracle terminal).
//! * [`sim`] — closed-loop episodes, Monte Carlo batches, and the
//!   canonical short-horizon wall scenario.
//! * [`io`] — dataset containers, checkpoints, run configuration, and the
//!   binary artifact format shared by the CLI.

pub mod dynamics;
pub mod geom;
pub mod hyper;
pub mod io;
pub mod mpc;
pub mod nn;
pub mod reach;
pub mod sim;

pub use dynamics::DynamicsModel;
pub use geom::{EnvSpec, OccupancyGrid, SdfGrid};
pub use hyper::{Checkpoint, MainNetSpec, ParamVector};
pub use mpc::{ConstraintMode, MpcProblem, SolveResult};
pub use reach::{FailureField, StateGrid, ValueFunction};
pub use sim::{EpisodeResult, World};
