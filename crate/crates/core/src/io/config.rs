use crate::dynamics::{DubinsParams, DynamicsModel, Unicycle2Params};
use crate::geom::{CorridorSpec, EnvSpec, ObstacleShape};
use crate::hyper::{HyperNetSpec, MainNetSpec, TrainConfig};
use crate::mpc::{ConstraintMode, MpcProblem, SolverOpts};
use crate::reach::{SolveOpts, StateGrid};
use crate::sim::SimParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

/// Random local environments used to build the training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub width_m: f64,
    pub height_m: f64,
    pub resolution: f64,
    pub count_min: usize,
    pub count_max: usize,
    pub shapes: Vec<ObstacleShape>,
    pub size_min: f64,
    pub size_max: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            width_m: 6.0,
            height_m: 6.0,
            resolution: 0.06,
            count_min: 0,
            count_max: 4,
            shapes: vec![ObstacleShape::Disc, ObstacleShape::Rect],
            size_min: 0.3,
            size_max: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub id: String,
    pub dubins: DubinsParams,
    pub unicycle2: Unicycle2Params,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            id: "dubins".into(),
            dubins: DubinsParams::default(),
            unicycle2: Unicycle2Params::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachSection {
    /// State-grid point counts; empty means the per-model desk default
    /// (Dubins 50x50x21, unicycle 40x40x7x7x7).
    pub counts: Vec<usize>,
    pub cfl: f64,
    pub conv_tol: f64,
    pub max_sweeps: usize,
    pub r_robot: f64,
}

impl Default for ReachSection {
    fn default() -> Self {
        Self { counts: vec![], cfl: 0.9, conv_tol: 1e-3, max_sweeps: 2000, r_robot: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of Q; empty means diag(1, 1, 0.1, ...).
    pub q: Vec<f64>,
    /// Diagonal of R; empty means 0.1 per control.
    pub r: Vec<f64>,
    pub q_n_scale: f64,
    pub gamma: f64,
    pub margin: f64,
    pub solver: SolverOpts,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 0.1,
            q: vec![],
            r: vec![],
            q_n_scale: 10.0,
            gamma: 0.3,
            margin: 0.02,
            solver: SolverOpts::default(),
        }
    }
}

/// Monte Carlo world generation and study layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub map_width_m: f64,
    pub map_height_m: f64,
    pub count_min: usize,
    pub count_max: usize,
    pub shapes: Vec<ObstacleShape>,
    pub size_min: f64,
    pub size_max: f64,
    pub start: Vec<f64>,
    pub goal: (f64, f64),
    pub clearance: f64,
    pub episodes: usize,
    pub horizons: Vec<usize>,
    pub modes: Vec<String>,
    /// State-grid counts for the per-environment oracle value function;
    /// empty means the reach section counts.
    pub oracle_counts: Vec<usize>,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            map_width_m: 9.0,
            map_height_m: 9.0,
            count_min: 4,
            count_max: 7,
            shapes: vec![ObstacleShape::Disc, ObstacleShape::Rect],
            size_min: 0.4,
            size_max: 1.1,
            start: vec![1.2, 4.5, 0.0],
            goal: (7.8, 4.5),
            clearance: 1.5,
            episodes: 50,
            horizons: vec![5],
            modes: vec!["sdf".into(), "ntc-oracle".into()],
            oracle_counts: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub window_side: f64,
    pub goal_tol: f64,
    pub stuck_window: usize,
    pub stuck_disp: f64,
    pub max_steps: usize,
    pub substeps: usize,
    pub mc: McSection,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            window_side: 6.0,
            goal_tol: 0.3,
            stuck_window: 50,
            stuck_disp: 0.05,
            max_steps: 2000,
            substeps: 10,
            mc: McSection::default(),
        }
    }
}

/// The single JSON document driving every pipeline stage. Unknown keys
/// are rejected; every run artifact embeds this config's hash.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub dynamics: DynamicsSection,
    pub reach: ReachSection,
    pub train: TrainConfig,
    pub mpc: MpcSection,
    pub sim: SimSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(json: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.env.resolution > 0.0 && self.env.width_m > 0.0 && self.env.height_m > 0.0) {
            return fail("env: sizes and resolution must be positive".into());
        }
        if self.env.count_min > self.env.count_max {
            return fail("env.count_min exceeds env.count_max".into());
        }
        if !(self.env.size_min > 0.0 && self.env.size_min <= self.env.size_max) {
            return fail("env: invalid obstacle size range".into());
        }
        self.model().map_err(|e| ConfigError::Invalid(format!("dynamics.id: {e}")))?;
        if !(self.reach.cfl > 0.0 && self.reach.cfl < 1.0) {
            return fail(format!("reach.cfl {} outside (0, 1)", self.reach.cfl));
        }
        if self.reach.r_robot < 0.0 {
            return fail("reach.r_robot must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.train.split) || self.train.split == 0.0 {
            return fail(format!("train.split {} outside (0, 1]", self.train.split));
        }
        if !(0.25..=1.0).contains(&self.train.grid_subsample) {
            return fail(format!(
                "train.grid_subsample {} outside [0.25, 1.0]",
                self.train.grid_subsample
            ));
        }
        if self.mpc.horizon < 1 {
            return fail("mpc.horizon must be >= 1".into());
        }
        if !(self.mpc.gamma > 0.0 && self.mpc.gamma <= 1.0) {
            return fail(format!("mpc.gamma {} outside (0, 1]", self.mpc.gamma));
        }
        if self.sim.mc.start.len() < 2 {
            return fail("sim.mc.start needs at least x, y".into());
        }
        for m in &self.sim.mc.modes {
            parse_mode_name(m, self.mpc.gamma)
                .map_err(|e| ConfigError::Invalid(format!("sim.mc.modes: {e}")))?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = super::container::canonical_json(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn model(&self) -> Result<DynamicsModel, ConfigError> {
        match self.dynamics.id.as_str() {
            "dubins" => Ok(DynamicsModel::Dubins(self.dynamics.dubins)),
            "unicycle2" => Ok(DynamicsModel::Unicycle2(self.dynamics.unicycle2)),
            other => Err(ConfigError::Invalid(format!("unknown dynamics id {other:?}"))),
        }
    }

    pub fn reach_counts(&self, model: &DynamicsModel) -> Vec<usize> {
        if !self.reach.counts.is_empty() {
            return self.reach.counts.clone();
        }
        match model {
            DynamicsModel::Dubins(_) => vec![50, 50, 21],
            DynamicsModel::Unicycle2(_) => vec![40, 40, 7, 7, 7],
        }
    }

    pub fn oracle_counts(&self, model: &DynamicsModel) -> Vec<usize> {
        if !self.sim.mc.oracle_counts.is_empty() {
            return self.sim.mc.oracle_counts.clone();
        }
        self.reach_counts(model)
    }

    pub fn solve_opts(&self) -> SolveOpts {
        SolveOpts {
            cfl: self.reach.cfl,
            conv_tol: self.reach.conv_tol,
            max_sweeps: self.reach.max_sweeps,
        }
    }

    /// Dataset environment generator; per-sample seeds are applied by the
    /// dataset builder.
    pub fn dataset_env_spec(&self) -> EnvSpec {
        EnvSpec {
            width_m: self.env.width_m,
            height_m: self.env.height_m,
            resolution: self.env.resolution,
            count_min: self.env.count_min,
            count_max: self.env.count_max,
            shapes: self.env.shapes.clone(),
            size_min: self.env.size_min,
            size_max: self.env.size_max,
            corridor: None,
            seed: 0,
        }
    }

    /// State grid over the dataset window in its local frame.
    pub fn dataset_state_grid(&self, model: &DynamicsModel) -> Result<StateGrid, ConfigError> {
        StateGrid::for_model(
            model,
            (0.0, self.env.width_m),
            (0.0, self.env.height_m),
            &self.reach_counts(model),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn main_net_spec(&self, model: &DynamicsModel) -> MainNetSpec {
        match model {
            DynamicsModel::Dubins(_) => MainNetSpec::dubins_default(self.env.width_m),
            DynamicsModel::Unicycle2(p) => {
                MainNetSpec::unicycle_default(self.env.width_m, p.v_max, p.omega_max)
            }
        }
    }

    pub fn hyper_net_spec(&self) -> HyperNetSpec {
        let cells = (self.env.width_m / self.env.resolution).round() as usize;
        HyperNetSpec::desk_default(cells)
    }

    pub fn mpc_problem(
        &self,
        model: DynamicsModel,
        horizon: usize,
        mode: ConstraintMode,
    ) -> MpcProblem {
        let mut p = MpcProblem::new(model, horizon, mode);
        p.dt = self.mpc.dt;
        if !self.mpc.q.is_empty() {
            p.q = self.mpc.q.clone();
        }
        if !self.mpc.r.is_empty() {
            p.r = self.mpc.r.clone();
        }
        p.q_n = p.q.iter().map(|v| v * self.mpc.q_n_scale).collect();
        p.margin = self.mpc.margin;
        p.opts = self.mpc.solver;
        p
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            goal_tol: self.sim.goal_tol,
            stuck_window: self.sim.stuck_window,
            stuck_disp: self.sim.stuck_disp,
            max_steps: self.sim.max_steps,
            substeps: self.sim.substeps,
            r_robot: self.reach.r_robot,
        }
    }

    /// Monte Carlo world generator with start/goal clearance guarantees.
    pub fn mc_env_spec(&self) -> EnvSpec {
        let mc = &self.sim.mc;
        EnvSpec {
            width_m: mc.map_width_m,
            height_m: mc.map_height_m,
            resolution: self.env.resolution,
            count_min: mc.count_min,
            count_max: mc.count_max,
            shapes: mc.shapes.clone(),
            size_min: mc.size_min,
            size_max: mc.size_max,
            corridor: Some(CorridorSpec {
                start: (mc.start[0], mc.start[1]),
                goal: mc.goal,
                clearance: mc.clearance,
            }),
            seed: 0,
        }
    }
}

/// Parse a planner mode name as used in configs and on the command line.
pub fn parse_mode_name(name: &str, gamma: f64) -> Result<ConstraintMode, String> {
    match name {
        "sdf" => Ok(ConstraintMode::Sdf),
        "dcbf" => Ok(ConstraintMode::Dcbf { gamma }),
        "ntc" => Ok(ConstraintMode::Ntc),
        "ntc-oracle" => Ok(ConstraintMode::NtcOracle),
        other => Err(format!("unknown mode {other:?} (expected sdf, dcbf, ntc, ntc-oracle)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hashable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let h1 = cfg.hash();
        let h2 = RunConfig::default().hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 32);
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_name() {
        let json = r#"{ "mpc": { "horizon": 5, "horizzon": 7 } }"#;
        let err = RunConfig::from_json(json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("horizzon"), "{msg}");
    }

    #[test]
    fn top_level_unknown_section_rejected() {
        let json = r#"{ "environment": {} }"#;
        assert!(RunConfig::from_json(json).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let json = r#"{ "mpc": { "gamma": 1.5 } }"#;
        let err = RunConfig::from_json(json).unwrap_err();
        assert!(err.to_string().contains("gamma"));
        let json = r#"{ "train": { "grid_subsample": 0.1 } }"#;
        assert!(RunConfig::from_json(json).is_err());
    }

    #[test]
    fn overrides_flow_into_builders() {
        let json = r#"{
            "dynamics": { "id": "unicycle2" },
            "reach": { "counts": [10, 10, 5, 3, 3], "r_robot": 0.2 },
            "mpc": { "horizon": 7, "margin": 0.05 }
        }"#;
        let cfg = RunConfig::from_json(json).unwrap();
        let model = cfg.model().unwrap();
        assert_eq!(model.state_dim(), 5);
        let grid = cfg.dataset_state_grid(&model).unwrap();
        assert_eq!(grid.total_points(), 10 * 10 * 5 * 3 * 3);
        let p = cfg.mpc_problem(model, cfg.mpc.horizon, ConstraintMode::Sdf);
        assert_eq!(p.horizon, 7);
        assert_eq!(p.margin, 0.05);
        assert_eq!(cfg.sim_params().r_robot, 0.2);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.mpc.horizon = 11;
        assert_ne!(a.hash(), b.hash());
    }
}
