//! Closed-loop waypoint navigation with local observations.
//!
//! Per control step the robot extracts a square window around its
//! position, turns it into an SDF, plans with the configured constraint
//! mode (warm-started), and applies the first control through RK4
//! sub-steps. Ground-truth collision checking uses the *global* SDF at
//! every sub-step, independent of the planner's perception.

use crate::dynamics::DynamicsModel;
use crate::geom::{extract_window, gen_random_env, occupancy_to_sdf, sample_sdf, EnvSpec, OccupancyGrid, SdfGrid};
use crate::hyper::{hyper_forward, Checkpoint};
use crate::mpc::{
    rollout, solve, ConstraintContext, ConstraintMode, MpcProblem, SolveStatus,
};
use crate::reach::{build_failure_field, solve_vi, SolveOpts, StateGrid, ValueFunction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Reach(#[from] crate::reach::ReachError),
}

/// A navigation task: global map, start state, goal position.
#[derive(Debug, Clone)]
pub struct World {
    pub grid: OccupancyGrid,
    /// Global SDF derived from `grid`, used for ground-truth collision
    /// checks.
    pub sdf: SdfGrid,
    pub start: Vec<f64>,
    pub goal: (f64, f64),
    pub window_side: f64,
}

impl World {
    pub fn new(
        grid: OccupancyGrid,
        start: Vec<f64>,
        goal: (f64, f64),
        window_side: f64,
    ) -> Self {
        let sdf = occupancy_to_sdf(&grid);
        Self { grid, sdf, start, goal, window_side }
    }

    /// Start and goal must be free with clearance beyond the robot radius.
    pub fn validate(&self, r_robot: f64) -> Result<(), SimError> {
        let s = sample_sdf(&self.sdf, self.start[0], self.start[1]);
        if s <= r_robot {
            return Err(SimError::InvalidWorld(format!("start clearance {s} <= {r_robot}")));
        }
        let g = sample_sdf(&self.sdf, self.goal.0, self.goal.1);
        if g <= r_robot {
            return Err(SimError::InvalidWorld(format!("goal clearance {g} <= {r_robot}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Collision,
    Stuck,
    Timeout,
    SolverError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Success when within this distance of the goal (position only).
    pub goal_tol: f64,
    /// Stuck when net displacement over `stuck_window` steps is below
    /// `stuck_disp`.
    pub stuck_window: usize,
    pub stuck_disp: f64,
    pub max_steps: usize,
    /// RK4 sub-steps per control step.
    pub substeps: usize,
    pub r_robot: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            goal_tol: 0.3,
            stuck_window: 50,
            stuck_disp: 0.05,
            max_steps: 2000,
            substeps: 10,
            r_robot: 0.15,
        }
    }
}

/// What supplies the safety constraint.
#[derive(Clone, Copy)]
pub enum PlannerKind<'a> {
    Sdf,
    Dcbf { gamma: f64 },
    Ntc(&'a Checkpoint),
    NtcOracle(&'a ValueFunction),
}

impl PlannerKind<'_> {
    pub fn constraint_mode(&self) -> ConstraintMode {
        match self {
            PlannerKind::Sdf => ConstraintMode::Sdf,
            PlannerKind::Dcbf { gamma } => ConstraintMode::Dcbf { gamma: *gamma },
            PlannerKind::Ntc(_) => ConstraintMode::Ntc,
            PlannerKind::NtcOracle(_) => ConstraintMode::NtcOracle,
        }
    }

    pub fn name(&self) -> &'static str {
        self.constraint_mode().name()
    }
}

/// Per-step closed-loop record for plotting and the trace properties.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trace {
    /// One pose per executed step plus the initial one.
    pub poses: Vec<Vec<f64>>,
    /// Planned terminal value per step (NaN when the mode has none).
    pub terminal_values: Vec<f64>,
    /// Observed SDF at the robot position per step.
    pub sdf_at_pose: Vec<f64>,
    pub statuses: Vec<SolveStatus>,
    pub solve_ms: Vec<f64>,
    pub hyper_ms: Vec<f64>,
}

/// Solver-contract bookkeeping aggregated over an episode.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ContractStats {
    pub solves: usize,
    pub bounds_violations: usize,
    pub rollout_mismatches: usize,
    pub merit_increases: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub steps: usize,
    pub path_length: f64,
    pub trace: Trace,
    pub contract: ContractStats,
    pub seed: u64,
}

/// Reference state: goal position, heading toward the goal, zero rates.
pub fn goal_reference(model: &DynamicsModel, x: &[f64], goal: (f64, f64)) -> Vec<f64> {
    let mut x_ref = vec![0.0; model.state_dim()];
    x_ref[0] = goal.0;
    x_ref[1] = goal.1;
    x_ref[2] = (goal.1 - x[1]).atan2(goal.0 - x[0]);
    x_ref
}

/// Run one closed-loop episode. Solver failures become
/// `Outcome::SolverError`; this function does not error.
pub fn run_episode(
    world: &World,
    planner: PlannerKind<'_>,
    problem: &MpcProblem,
    params: &SimParams,
    seed: u64,
) -> EpisodeResult {
    let model = &problem.model;
    let n = model.state_dim();
    let m = model.control_dim();
    let sub_dt = problem.dt / params.substeps as f64;

    let mut x = world.start.clone();
    let mut warm: Option<Vec<f64>> = None;
    let mut trace = Trace::default();
    let mut contract = ContractStats::default();
    let mut path_length = 0.0f64;
    trace.poses.push(x.clone());

    let mut outcome = Outcome::Timeout;
    let mut steps = 0usize;

    let dist_to_goal = |x: &[f64]| -> f64 {
        ((x[0] - world.goal.0).powi(2) + (x[1] - world.goal.1).powi(2)).sqrt()
    };

    if dist_to_goal(&x) <= params.goal_tol {
        return EpisodeResult {
            outcome: Outcome::Success,
            steps: 0,
            path_length: 0.0,
            trace,
            contract,
            seed,
        };
    }

    'episode: for _step in 0..params.max_steps {
        let window = extract_window(&world.grid, (x[0], x[1]), world.window_side);
        let local_sdf = occupancy_to_sdf(&window);
        trace.sdf_at_pose.push(sample_sdf(&local_sdf, x[0], x[1]));

        // Hypernetwork inference once per step in ntc mode.
        let mut hyper_ms = 0.0;
        let net_params = match planner {
            PlannerKind::Ntc(ckpt) => {
                let t = Instant::now();
                match hyper_forward(ckpt, &local_sdf) {
                    Ok(p) => {
                        hyper_ms = t.elapsed().as_secs_f64() * 1e3;
                        Some(p)
                    }
                    Err(_) => {
                        outcome = Outcome::SolverError;
                        break 'episode;
                    }
                }
            }
            _ => None,
        };
        trace.hyper_ms.push(hyper_ms);

        let net_ref = match (&planner, &net_params) {
            (PlannerKind::Ntc(ckpt), Some(p)) => Some((&ckpt.main, p)),
            _ => None,
        };
        let ctx = ConstraintContext {
            sdf: &local_sdf,
            net: net_ref,
            oracle: match planner {
                PlannerKind::NtcOracle(vf) => Some(vf),
                _ => None,
            },
            r_robot: params.r_robot,
        };
        let x_ref = goal_reference(model, &x, world.goal);
        let res = match solve(problem, ctx, &x, &x_ref, warm.as_deref()) {
            Ok(r) => r,
            Err(_) => {
                outcome = Outcome::SolverError;
                break 'episode;
            }
        };

        // Contract accounting.
        contract.solves += 1;
        let (lo, hi) = model.control_bounds();
        if res
            .controls
            .iter()
            .enumerate()
            .any(|(i, &u)| u < lo[i % m] || u > hi[i % m])
        {
            contract.bounds_violations += 1;
        }
        let mut check = vec![0.0; (problem.horizon + 1) * n];
        rollout(model, &x, &res.controls, problem.dt, &mut check);
        if check != res.states {
            contract.rollout_mismatches += 1;
        }
        contract.merit_increases += res.merit_increases;

        trace.statuses.push(res.status);
        trace.solve_ms.push(res.wall_time_ms);
        trace.terminal_values.push(res.terminal_value.unwrap_or(f64::NAN));

        // Apply the first control through RK4 sub-steps; adjudicate on the
        // global SDF at every sub-step.
        let u0 = &res.controls[..m];
        let mut next = vec![0.0; n];
        for _ in 0..params.substeps {
            model.step_rk4(&x, u0, sub_dt, &mut next);
            path_length += ((next[0] - x[0]).powi(2) + (next[1] - x[1]).powi(2)).sqrt();
            x.copy_from_slice(&next);
            if sample_sdf(&world.sdf, x[0], x[1]) < params.r_robot {
                steps += 1;
                trace.poses.push(x.clone());
                outcome = Outcome::Collision;
                break 'episode;
            }
            if dist_to_goal(&x) <= params.goal_tol {
                steps += 1;
                trace.poses.push(x.clone());
                outcome = Outcome::Success;
                break 'episode;
            }
        }
        steps += 1;
        trace.poses.push(x.clone());
        warm = Some(res.controls);

        // Net displacement over the stuck window.
        if steps >= params.stuck_window {
            let old = &trace.poses[steps - params.stuck_window];
            let disp = ((x[0] - old[0]).powi(2) + (x[1] - old[1]).powi(2)).sqrt();
            if disp < params.stuck_disp {
                outcome = Outcome::Stuck;
                break 'episode;
            }
        }
    }

    EpisodeResult { outcome, steps, path_length, trace, contract, seed }
}

/// Converged value function over the whole world map, used as the oracle
/// terminal set.
pub fn oracle_vf(
    world: &World,
    model: &DynamicsModel,
    counts: &[usize],
    opts: &SolveOpts,
    r_robot: f64,
) -> Result<ValueFunction, SimError> {
    let (min_x, min_y, max_x, max_y) = world.sdf.extent();
    let grid = StateGrid::for_model(model, (min_x, max_x), (min_y, max_y), counts)?;
    let l = build_failure_field(&world.sdf, &grid, r_robot)?;
    Ok(solve_vi(model, &l, opts)?)
}

/// Deterministic short-horizon wall scenario: a Dubins robot 2.5 m from
/// a wall spanning the full corridor width, moving toward it; the goal
/// sits beyond the wall, reachable around its upper end. The straight
/// 0.5 s rollout never sees negative clearance, yet the straight path
/// enters the wall's backward reachable tube.
pub fn fig1_scenario() -> World {
    let res = 0.06;
    let (w_cells, h_cells) = (200, 167); // 12.0 m x 10.02 m
    let mut grid = OccupancyGrid::free(w_cells, h_cells, res, (0.0, 0.0));
    for iy in 0..h_cells {
        for ix in 0..w_cells {
            let (x, y) = grid.cell_center(ix, iy);
            if (3.5..=3.8).contains(&x) && (2.75..=7.25).contains(&y) {
                grid.cells[iy * w_cells + ix] = 1;
            }
        }
    }
    World::new(grid, vec![1.0, 5.0, 0.0], (8.0, 8.6), 6.0)
}

/// One planner variant of a Monte Carlo study.
#[derive(Clone, Copy)]
pub enum McMode<'a> {
    Sdf,
    Dcbf { gamma: f64 },
    Ntc(&'a Checkpoint),
    /// Oracle value function computed per environment on the global map.
    NtcOracle,
}

impl McMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            McMode::Sdf => "sdf",
            McMode::Dcbf { .. } => "dcbf",
            McMode::Ntc(_) => "ntc",
            McMode::NtcOracle => "ntc-oracle",
        }
    }
}

#[derive(Clone)]
pub struct McConfig<'a> {
    /// Environment template; episode `e` uses `seed = base_seed + e`.
    pub env: EnvSpec,
    pub start: Vec<f64>,
    pub goal: (f64, f64),
    pub window_side: f64,
    pub modes: Vec<McMode<'a>>,
    pub horizons: Vec<usize>,
    pub episodes: usize,
    pub base_seed: u64,
    /// Template problem; horizon and mode are overwritten per run.
    pub problem: MpcProblem,
    pub sim: SimParams,
    /// State-grid sizes for the per-environment oracle value function.
    pub oracle_counts: Vec<usize>,
    pub oracle_opts: SolveOpts,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub mode: String,
    pub horizon: usize,
    pub episode: usize,
    pub seed: u64,
    pub env_hash: String,
    pub outcome: Outcome,
    pub steps: usize,
    pub path_m: f64,
    pub mean_solve_ms: f64,
    pub p95_solve_ms: f64,
    pub mean_hyper_ms: f64,
    pub min_terminal_value: f64,
    pub solves: usize,
    pub bounds_violations: usize,
    pub rollout_mismatches: usize,
    pub merit_increases: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummaryRow {
    pub mode: String,
    pub horizon: usize,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_solve_ms: f64,
    pub p95_solve_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<McSummaryRow>,
    pub config_hash: String,
    pub base_seed: u64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

fn hash_grid(grid: &OccupancyGrid) -> String {
    let mut hasher = Sha256::new();
    hasher.update(&grid.cells);
    let out = hasher.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Paired Monte Carlo: every mode and horizon sees byte-identical
/// environments per episode index.
pub fn monte_carlo(cfg: &McConfig<'_>) -> Result<McReport, SimError> {
    let mut rows = Vec::new();
    for episode in 0..cfg.episodes {
        let mut env_spec = cfg.env.clone();
        env_spec.seed = cfg.base_seed.wrapping_add(episode as u64);
        let grid = gen_random_env(&env_spec)?;
        let world = World::new(grid, cfg.start.clone(), cfg.goal, cfg.window_side);
        let env_hash = hash_grid(&world.grid);

        // Oracle value function shared across horizons of this episode.
        let needs_oracle = cfg.modes.iter().any(|mode| matches!(mode, McMode::NtcOracle));
        let oracle = if needs_oracle {
            Some(oracle_vf(
                &world,
                &cfg.problem.model,
                &cfg.oracle_counts,
                &cfg.oracle_opts,
                cfg.sim.r_robot,
            )?)
        } else {
            None
        };

        for mode in &cfg.modes {
            for &horizon in &cfg.horizons {
                let mut problem = cfg.problem.clone();
                problem.horizon = horizon;
                let kind = match mode {
                    McMode::Sdf => {
                        problem.mode = ConstraintMode::Sdf;
                        PlannerKind::Sdf
                    }
                    McMode::Dcbf { gamma } => {
                        problem.mode = ConstraintMode::Dcbf { gamma: *gamma };
                        PlannerKind::Dcbf { gamma: *gamma }
                    }
                    McMode::Ntc(ckpt) => {
                        problem.mode = ConstraintMode::Ntc;
                        PlannerKind::Ntc(ckpt)
                    }
                    McMode::NtcOracle => {
                        problem.mode = ConstraintMode::NtcOracle;
                        PlannerKind::NtcOracle(oracle.as_ref().expect("oracle built above"))
                    }
                };
                let res = run_episode(&world, kind, &problem, &cfg.sim, env_spec.seed);
                let mut solve_ms = res.trace.solve_ms.clone();
                solve_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mean_solve = if solve_ms.is_empty() {
                    f64::NAN
                } else {
                    solve_ms.iter().sum::<f64>() / solve_ms.len() as f64
                };
                let hyper_mean = if res.trace.hyper_ms.is_empty() {
                    0.0
                } else {
                    res.trace.hyper_ms.iter().sum::<f64>() / res.trace.hyper_ms.len() as f64
                };
                let min_tv = res
                    .trace
                    .terminal_values
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                rows.push(EpisodeRow {
                    mode: mode.name().to_string(),
                    horizon,
                    episode,
                    seed: env_spec.seed,
                    env_hash: env_hash.clone(),
                    outcome: res.outcome,
                    steps: res.steps,
                    path_m: res.path_length,
                    mean_solve_ms: mean_solve,
                    p95_solve_ms: percentile(&solve_ms, 0.95),
                    mean_hyper_ms: hyper_mean,
                    min_terminal_value: min_tv,
                    solves: res.contract.solves,
                    bounds_violations: res.contract.bounds_violations,
                    rollout_mismatches: res.contract.rollout_mismatches,
                    merit_increases: res.contract.merit_increases,
                });
            }
        }
    }

    // Aggregate.
    let mut summary = Vec::new();
    for mode in &cfg.modes {
        for &horizon in &cfg.horizons {
            let sel: Vec<&EpisodeRow> = rows
                .iter()
                .filter(|r| r.mode == mode.name() && r.horizon == horizon)
                .collect();
            let successes = sel.iter().filter(|r| r.outcome == Outcome::Success).count();
            let mut times: Vec<f64> = sel
                .iter()
                .filter(|r| r.mean_solve_ms.is_finite())
                .map(|r| r.mean_solve_ms)
                .collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            summary.push(McSummaryRow {
                mode: mode.name().to_string(),
                horizon,
                episodes: sel.len(),
                successes,
                success_rate: successes as f64 / sel.len().max(1) as f64,
                mean_solve_ms: if times.is_empty() {
                    f64::NAN
                } else {
                    times.iter().sum::<f64>() / times.len() as f64
                },
                p95_solve_ms: percentile(&times, 0.95),
            });
        }
    }

    Ok(McReport { rows, summary, config_hash: cfg.config_hash.clone(), base_seed: cfg.base_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::ObstacleShape;

    fn empty_world(goal_dist: f64) -> World {
        let grid = OccupancyGrid::free(200, 120, 0.06, (0.0, 0.0));
        World::new(grid, vec![1.0, 3.6, 0.0], (1.0 + goal_dist, 3.6), 6.0)
    }

    #[test]
    fn empty_world_straight_run_succeeds() {
        let world = empty_world(3.0);
        let problem = MpcProblem::new(DynamicsModel::dubins_default(), 5, ConstraintMode::Sdf);
        let params = SimParams::default();
        let res = run_episode(&world, PlannerKind::Sdf, &problem, &params, 0);
        assert_eq!(res.outcome, Outcome::Success);
        // Straight-line distance minus the goal tolerance, with slack for
        // the approach arc; the lower bound reflects first-entry success
        // at the 0.3 m goal disc.
        assert!(
            res.path_length >= 3.0 - params.goal_tol - 0.05 && res.path_length <= 3.6,
            "path {}",
            res.path_length
        );
        assert_eq!(res.trace.poses.len(), res.steps + 1);
        assert_eq!(res.contract.bounds_violations, 0);
        assert_eq!(res.contract.rollout_mismatches, 0);
        assert_eq!(res.contract.merit_increases, 0);
    }

    #[test]
    fn identical_seed_and_config_give_identical_traces() {
        let world = empty_world(2.0);
        let problem = MpcProblem::new(DynamicsModel::dubins_default(), 5, ConstraintMode::Sdf);
        let params = SimParams::default();
        let a = run_episode(&world, PlannerKind::Sdf, &problem, &params, 7);
        let b = run_episode(&world, PlannerKind::Sdf, &problem, &params, 7);
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.trace.poses, b.trace.poses);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace.terminal_values), bits(&b.trace.terminal_values));
        assert_eq!(bits(&a.trace.sdf_at_pose), bits(&b.trace.sdf_at_pose));
    }

    #[test]
    fn fig1_world_geometry() {
        let world = fig1_scenario();
        world.validate(SimParams::default().r_robot).unwrap();
        // Start free, wall occupied.
        assert!(sample_sdf(&world.sdf, 1.0, 5.0) > 0.5);
        assert!(sample_sdf(&world.sdf, 3.65, 5.0) < 0.0);
        // Straight-ahead 0.5 s rollout never sees negative clearance:
        // 2.5 m to the wall, 0.25 m traveled.
        for k in 0..=10 {
            let x = 1.0 + 0.025 * k as f64;
            assert!(sample_sdf(&world.sdf, x, 5.0) > 2.0, "x = {x}");
        }
    }

    #[test]
    fn monte_carlo_report_shape_and_pairing() {
        let env = EnvSpec {
            width_m: 7.0,
            height_m: 7.0,
            resolution: 0.12,
            count_min: 1,
            count_max: 2,
            shapes: vec![ObstacleShape::Disc],
            size_min: 0.5,
            size_max: 0.9,
            corridor: Some(crate::geom::CorridorSpec {
                start: (1.0, 3.5),
                goal: (6.0, 3.5),
                clearance: 1.2,
            }),
            seed: 0,
        };
        let problem = MpcProblem::new(DynamicsModel::dubins_default(), 5, ConstraintMode::Sdf);
        let cfg = McConfig {
            env,
            start: vec![1.0, 3.5, 0.0],
            goal: (6.0, 3.5),
            window_side: 6.0,
            modes: vec![McMode::Sdf, McMode::Dcbf { gamma: 0.3 }],
            horizons: vec![5],
            episodes: 2,
            base_seed: 100,
            problem,
            sim: SimParams { max_steps: 400, ..Default::default() },
            oracle_counts: vec![20, 20, 9],
            oracle_opts: SolveOpts::default(),
            config_hash: "test".into(),
        };
        let report = monte_carlo(&cfg).unwrap();
        assert_eq!(report.rows.len(), 4);
        // Paired design: same episode index, same environment bytes.
        for e in 0..2 {
            let hashes: Vec<&String> = report
                .rows
                .iter()
                .filter(|r| r.episode == e)
                .map(|r| &r.env_hash)
                .collect();
            assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        }
        assert_eq!(report.summary.len(), 2);
        for s in &report.summary {
            assert_eq!(s.episodes, 2);
        }
    }
}
