//! Grid-based backward reachable tubes.
//!
//! The value function solves the final-value variational inequality
//! `min(dV/dt + H, l - V) = 0`, `V(T) = l`, marched in pseudo-time until
//! convergence (infinite horizon). The zero-sublevel set of the converged
//! V is the backward reachable tube; its complement is the maximal safe
//! set. Spatial terms use a first-order Lax-Friedrichs scheme; an
//! independent semi-Lagrangian value iteration is provided as an oracle.

use crate::dynamics::{DynamicsModel, MAX_STATE_DIM};
use crate::geom::{sample_sdf, SdfGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("invalid state grid: {0}")]
    InvalidGrid(String),
    #[error("state grid positions [{got}] not contained in SDF extent [{extent}]")]
    ExtentMismatch { got: String, extent: String },
    #[error("numerical blow-up in sweep {sweep}")]
    NumericalBlowUp { sweep: usize },
    #[error("invalid solver options: {0}")]
    InvalidOpts(String),
}

/// One dimension of a rectilinear state grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDim {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    /// Periodic dimensions exclude the duplicate endpoint: samples are
    /// `min + k * (max - min) / count`.
    pub periodic: bool,
}

impl GridDim {
    pub fn spacing(&self) -> f64 {
        if self.periodic {
            (self.max - self.min) / self.count as f64
        } else {
            (self.max - self.min) / (self.count - 1) as f64
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }
}

/// Rectilinear discretization of the robot state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub dims: Vec<GridDim>,
}

impl StateGrid {
    pub fn new(dims: Vec<GridDim>) -> Result<Self, ReachError> {
        for (i, d) in dims.iter().enumerate() {
            if d.count < 3 {
                return Err(ReachError::InvalidGrid(format!("dim {i}: count must be >= 3")));
            }
            if !(d.max > d.min) {
                return Err(ReachError::InvalidGrid(format!("dim {i}: max must exceed min")));
            }
        }
        Ok(Self { dims })
    }

    /// Standard grid for a model over a square window `[0, side]^2`:
    /// positions, theta in `[-pi, pi)`, and velocity dims over the model
    /// bounds.
    pub fn for_model(
        model: &DynamicsModel,
        x_range: (f64, f64),
        y_range: (f64, f64),
        counts: &[usize],
    ) -> Result<Self, ReachError> {
        let n = model.state_dim();
        if counts.len() != n {
            return Err(ReachError::InvalidGrid(format!(
                "expected {n} dimension counts, got {}",
                counts.len()
            )));
        }
        let pi = std::f64::consts::PI;
        let bounds = model.state_bounds();
        let mut dims = vec![
            GridDim { min: x_range.0, max: x_range.1, count: counts[0], periodic: false },
            GridDim { min: y_range.0, max: y_range.1, count: counts[1], periodic: false },
            GridDim { min: -pi, max: pi, count: counts[2], periodic: true },
        ];
        for (i, b) in bounds.iter().enumerate().skip(3) {
            let (lo, hi) = b.expect("non-positional dims are bounded");
            dims.push(GridDim { min: lo, max: hi, count: counts[i], periodic: false });
        }
        Self::new(dims)
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn total_points(&self) -> usize {
        self.dims.iter().map(|d| d.count).product()
    }

    /// Row-major strides (last dimension fastest).
    pub fn strides(&self) -> Vec<usize> {
        let n = self.ndim();
        let mut s = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.dims[i + 1].count;
        }
        s
    }

    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for i in (0..self.ndim()).rev() {
            out[i] = idx % self.dims[i].count;
            idx /= self.dims[i].count;
        }
    }

    pub fn coords(&self, multi: &[usize], out: &mut [f64]) {
        for (i, d) in self.dims.iter().enumerate() {
            out[i] = d.coord(multi[i]);
        }
    }
}

/// Failure function samples on a state grid: local SDF at the position
/// minus the robot radius, constant over all non-position dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureField {
    pub grid: StateGrid,
    pub values: Vec<f64>,
    pub r_robot: f64,
}

/// HJ value samples on a state grid (stored at artifact precision).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub grid: StateGrid,
    pub values: Vec<f32>,
    pub converged: bool,
    pub sweeps: usize,
    pub dynamics_id: String,
    pub r_robot: f64,
}

/// Options for [`solve_vi`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOpts {
    /// CFL number in (0, 1).
    pub cfl: f64,
    /// Convergence threshold on max value change per unit pseudo-time.
    pub conv_tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolveOpts {
    fn default() -> Self {
        Self { cfl: 0.9, conv_tol: 1e-3, max_sweeps: 2000 }
    }
}

/// Sample the SDF at the grid positions and replicate across the
/// remaining dimensions. The grid's position extent must lie inside the
/// SDF extent.
pub fn build_failure_field(
    sdf: &SdfGrid,
    grid: &StateGrid,
    r_robot: f64,
) -> Result<FailureField, ReachError> {
    let (min_x, min_y, max_x, max_y) = sdf.extent();
    let gx = &grid.dims[0];
    let gy = &grid.dims[1];
    if gx.min < min_x - 1e-9 || gx.max > max_x + 1e-9 || gy.min < min_y - 1e-9 || gy.max > max_y + 1e-9
    {
        return Err(ReachError::ExtentMismatch {
            got: format!("x {}..{}, y {}..{}", gx.min, gx.max, gy.min, gy.max),
            extent: format!("x {min_x}..{max_x}, y {min_y}..{max_y}"),
        });
    }
    let plane: Vec<f64> = (0..gx.count)
        .flat_map(|ix| {
            let x = gx.coord(ix);
            (0..gy.count).map(move |iy| (x, gy.coord(iy)))
        })
        .map(|(x, y)| sample_sdf(sdf, x, y) - r_robot)
        .collect();
    let tail: usize = grid.dims[2..].iter().map(|d| d.count).product();
    let mut values = Vec::with_capacity(grid.total_points());
    for &l in &plane {
        values.extend(std::iter::repeat(l).take(tail));
    }
    Ok(FailureField { grid: grid.clone(), values, r_robot })
}

struct SweepContext<'a> {
    model: &'a DynamicsModel,
    grid: &'a StateGrid,
    l: &'a [f64],
    strides: Vec<usize>,
    spacing: Vec<f64>,
    alpha: Vec<f64>,
    dtau: f64,
}

impl SweepContext<'_> {
    /// One Lax-Friedrichs update of node `idx` given the frozen field `v`:
    /// `min(v, min(l, v + dtau * (H(x, p_avg) + sum_i alpha_i (p+ - p-)/2)))`.
    /// The dissipation term enters with a positive sign in this marching
    /// direction (d tau = -dt): it is a diffusion that damps dips; the
    /// opposite sign is anti-diffusive and diverges. One-sided differences
    /// vanish at clamped non-periodic borders.
    #[inline]
    fn update(&self, v: &[f64], idx: usize) -> f64 {
        let n = self.grid.ndim();
        let mut multi = [0usize; MAX_STATE_DIM];
        self.grid.unravel(idx, &mut multi[..n]);
        let mut x = [0.0f64; MAX_STATE_DIM];
        self.grid.coords(&multi[..n], &mut x[..n]);

        let here = v[idx];
        let mut p_avg = [0.0f64; MAX_STATE_DIM];
        let mut diss = 0.0;
        for i in 0..n {
            let d = &self.grid.dims[i];
            let stride = self.strides[i];
            let dx = self.spacing[i];
            let (prev, next) = if d.periodic {
                let prev_idx = if multi[i] == 0 { d.count - 1 } else { multi[i] - 1 };
                let next_idx = if multi[i] + 1 == d.count { 0 } else { multi[i] + 1 };
                (
                    v[idx - multi[i] * stride + prev_idx * stride],
                    v[idx - multi[i] * stride + next_idx * stride],
                )
            } else {
                let prev = if multi[i] == 0 { here } else { v[idx - stride] };
                let next = if multi[i] + 1 == d.count { here } else { v[idx + stride] };
                (prev, next)
            };
            let p_minus = (here - prev) / dx;
            let p_plus = (next - here) / dx;
            p_avg[i] = 0.5 * (p_minus + p_plus);
            diss += self.alpha[i] * 0.5 * (p_plus - p_minus);
        }
        let h = self.model.hamiltonian(&x[..n], &p_avg[..n]);
        let cand = here + self.dtau * (h + diss);
        cand.min(self.l[idx]).min(here)
    }
}

/// March the variational inequality to a fixed point. `observer` is called
/// after every sweep with the sweep index and the current field.
pub fn solve_vi_observed(
    model: &DynamicsModel,
    l: &FailureField,
    opts: &SolveOpts,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<ValueFunction, ReachError> {
    if !(opts.cfl > 0.0 && opts.cfl < 1.0) {
        return Err(ReachError::InvalidOpts(format!("cfl {} outside (0, 1)", opts.cfl)));
    }
    if !(opts.conv_tol > 0.0) {
        return Err(ReachError::InvalidOpts("conv_tol must be > 0".into()));
    }
    if opts.max_sweeps < 1 {
        return Err(ReachError::InvalidOpts("max_sweeps must be >= 1".into()));
    }
    let grid = &l.grid;
    let n = grid.ndim();
    debug_assert_eq!(n, model.state_dim());

    let mut alpha = vec![0.0; n];
    model.dissipation_bounds(&vec![0.0; n], &mut alpha);
    let spacing: Vec<f64> = grid.dims.iter().map(|d| d.spacing()).collect();
    let dtau = opts.cfl / alpha.iter().zip(spacing.iter()).map(|(a, dx)| a / dx).sum::<f64>();

    let ctx = SweepContext {
        model,
        grid,
        l: &l.values,
        strides: grid.strides(),
        spacing,
        alpha,
        dtau,
    };

    let mut v = l.values.clone();
    let mut v_next = vec![0.0f64; v.len()];
    let mut sweeps = 0;
    let mut converged = false;
    for sweep in 1..=opts.max_sweeps {
        let max_change = v_next
            .par_chunks_mut(4096)
            .enumerate()
            .map(|(chunk_i, chunk)| {
                let base = chunk_i * 4096;
                let mut worst = 0.0f64;
                for (off, out) in chunk.iter_mut().enumerate() {
                    let idx = base + off;
                    let new = ctx.update(&v, idx);
                    worst = worst.max(v[idx] - new);
                    *out = new;
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        if !max_change.is_finite() {
            return Err(ReachError::NumericalBlowUp { sweep });
        }
        std::mem::swap(&mut v, &mut v_next);
        sweeps = sweep;
        observer(sweep, &v);
        if max_change < opts.conv_tol * dtau {
            converged = true;
            break;
        }
    }

    Ok(ValueFunction {
        grid: grid.clone(),
        values: v.iter().map(|&x| x as f32).collect(),
        converged,
        sweeps,
        dynamics_id: model.id().to_string(),
        r_robot: l.r_robot,
    })
}

/// Solve the variational inequality to convergence.
pub fn solve_vi(
    model: &DynamicsModel,
    l: &FailureField,
    opts: &SolveOpts,
) -> Result<ValueFunction, ReachError> {
    solve_vi_observed(model, l, opts, |_, _| {})
}

/// Multilinear interpolation over a state grid with periodic wrap on
/// periodic dimensions; non-periodic coordinates clamp to the extent.
/// Returns the value and, if `grad` is given, d(value)/dx per dimension.
fn multilinear(
    grid: &StateGrid,
    values: impl Fn(usize) -> f64,
    x: &[f64],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let n = grid.ndim();
    let strides = grid.strides();
    let mut base = [0usize; MAX_STATE_DIM];
    let mut frac = [0.0f64; MAX_STATE_DIM];
    let mut wrap_next = [false; MAX_STATE_DIM];
    for i in 0..n {
        let d = &grid.dims[i];
        let dx = d.spacing();
        if d.periodic {
            let span = d.max - d.min;
            let mut t = (x[i] - d.min) % span;
            if t < 0.0 {
                t += span;
            }
            let u = t / dx;
            let mut i0 = u.floor() as usize;
            if i0 >= d.count {
                i0 = d.count - 1;
            }
            base[i] = i0;
            frac[i] = u - i0 as f64;
            wrap_next[i] = i0 + 1 == d.count;
        } else {
            let u = ((x[i] - d.min) / dx).clamp(0.0, (d.count - 1) as f64);
            let i0 = (u.floor() as usize).min(d.count - 2);
            base[i] = i0;
            frac[i] = u - i0 as f64;
        }
    }
    let mut value = 0.0;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    // Corners of the cell: bit k of the mask selects the upper node in dim k.
    for corner in 0..(1usize << n) {
        let mut idx = 0usize;
        let mut w = 1.0;
        for i in 0..n {
            let hi = corner >> i & 1 == 1;
            let node = if hi {
                if wrap_next[i] {
                    0
                } else {
                    base[i] + 1
                }
            } else {
                base[i]
            };
            idx += node * strides[i];
            w *= if hi { frac[i] } else { 1.0 - frac[i] };
        }
        let val = values(idx);
        value += w * val;
        if let Some(g) = grad.as_deref_mut() {
            for i in 0..n {
                let mut dw = 1.0;
                for j in 0..n {
                    let hi = corner >> j & 1 == 1;
                    if j == i {
                        dw *= if hi { 1.0 } else { -1.0 };
                    } else {
                        dw *= if hi { frac[j] } else { 1.0 - frac[j] };
                    }
                }
                g[i] += dw * val / grid.dims[i].spacing();
            }
        }
    }
    value
}

/// Multilinear interpolation of the value function at a state.
pub fn interpolate_vf(vf: &ValueFunction, x: &[f64]) -> f64 {
    multilinear(&vf.grid, |i| vf.values[i] as f64, x, None)
}

/// Value and gradient of the multilinear interpolant.
pub fn interpolate_vf_grad(vf: &ValueFunction, x: &[f64], grad: &mut [f64]) -> f64 {
    multilinear(&vf.grid, |i| vf.values[i] as f64, x, Some(grad))
}

/// Backward-reachable-tube membership: `V <= 0` per node. The complement
/// of the mask is the maximal safe set.
pub fn brt_mask(vf: &ValueFunction) -> Vec<bool> {
    vf.values.iter().map(|&v| v <= 0.0).collect()
}

/// Independent cross-check: semi-Lagrangian value iteration
/// `V <- min(l, max_u V(x + dt f(x, u)))` over a finite control set
/// (box corners plus zero), iterated to a fixed point.
pub fn semi_lagrangian_oracle(
    model: &DynamicsModel,
    l: &FailureField,
    dt: f64,
    max_iters: usize,
) -> ValueFunction {
    assert!(dt > 0.0);
    const TOL: f64 = 1e-4;
    let grid = &l.grid;
    let n = grid.ndim();
    let (lo, hi) = model.control_bounds();
    let controls: Vec<Vec<f64>> = match model.control_dim() {
        1 => vec![vec![lo[0]], vec![0.0], vec![hi[0]]],
        2 => vec![
            vec![lo[0], lo[1]],
            vec![lo[0], hi[1]],
            vec![hi[0], lo[1]],
            vec![hi[0], hi[1]],
            vec![0.0, 0.0],
        ],
        _ => unreachable!(),
    };

    let mut v = l.values.clone();
    let mut v_next = vec![0.0f64; v.len()];
    let mut iters = 0;
    let mut converged = false;
    while iters < max_iters {
        iters += 1;
        let max_change = v_next
            .par_chunks_mut(4096)
            .enumerate()
            .map(|(chunk_i, chunk)| {
                let base = chunk_i * 4096;
                let mut multi = [0usize; MAX_STATE_DIM];
                let mut x = [0.0f64; MAX_STATE_DIM];
                let mut xn = [0.0f64; MAX_STATE_DIM];
                let mut worst = 0.0f64;
                for (off, out) in chunk.iter_mut().enumerate() {
                    let idx = base + off;
                    grid.unravel(idx, &mut multi[..n]);
                    grid.coords(&multi[..n], &mut x[..n]);
                    let mut best = f64::NEG_INFINITY;
                    for u in &controls {
                        model.step_euler(&x[..n], u, dt, &mut xn[..n]);
                        let val = multilinear(grid, |i| v[i], &xn[..n], None);
                        best = best.max(val);
                    }
                    let new = l.values[idx].min(best);
                    worst = worst.max((v[idx] - new).abs());
                    *out = new;
                }
                worst
            })
            .reduce(|| 0.0, f64::max);
        std::mem::swap(&mut v, &mut v_next);
        if max_change < TOL {
            converged = true;
            break;
        }
    }

    ValueFunction {
        grid: grid.clone(),
        values: v.iter().map(|&x| x as f32).collect(),
        converged,
        sweeps: iters,
        dynamics_id: model.id().to_string(),
        r_robot: l.r_robot,
    }
}

/// Fraction of nodes where two value functions agree in sign, excluding
/// nodes within one cell of a sign change in either field.
pub fn sign_agreement_outside_band(a: &ValueFunction, b: &ValueFunction) -> f64 {
    assert_eq!(a.grid, b.grid);
    let grid = &a.grid;
    let n = grid.ndim();
    let strides = grid.strides();
    let near_zero_band = |vf: &ValueFunction| -> Vec<bool> {
        let mut band = vec![false; vf.values.len()];
        let mut multi = [0usize; MAX_STATE_DIM];
        for idx in 0..vf.values.len() {
            grid.unravel(idx, &mut multi[..n]);
            let sign_here = vf.values[idx] <= 0.0;
            'dims: for i in 0..n {
                let d = &grid.dims[i];
                for dir in [-1isize, 1] {
                    let j = multi[i] as isize + dir;
                    let j = if d.periodic {
                        (j.rem_euclid(d.count as isize)) as usize
                    } else if j < 0 || j >= d.count as isize {
                        continue;
                    } else {
                        j as usize
                    };
                    let nb = idx - multi[i] * strides[i] + j * strides[i];
                    if (vf.values[nb] <= 0.0) != sign_here {
                        band[idx] = true;
                        break 'dims;
                    }
                }
            }
        }
        band
    };
    let band_a = near_zero_band(a);
    let band_b = near_zero_band(b);
    let mut considered = 0usize;
    let mut agree = 0usize;
    for i in 0..a.values.len() {
        if band_a[i] || band_b[i] {
            continue;
        }
        considered += 1;
        if (a.values[i] <= 0.0) == (b.values[i] <= 0.0) {
            agree += 1;
        }
    }
    if considered == 0 {
        1.0
    } else {
        agree as f64 / considered as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{gen_random_env, occupancy_to_sdf, EnvSpec, ObstacleShape, OccupancyGrid};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc_world_sdf(side: f64, res: f64, cx: f64, cy: f64, radius: f64) -> SdfGrid {
        let n = (side / res).round() as usize;
        let mut grid = OccupancyGrid::free(n, n, res, (0.0, 0.0));
        for iy in 0..n {
            for ix in 0..n {
                let (x, y) = grid.cell_center(ix, iy);
                if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius {
                    grid.cells[iy * n + ix] = 1;
                }
            }
        }
        occupancy_to_sdf(&grid)
    }

    fn dubins_grid(side: f64, counts: [usize; 3]) -> StateGrid {
        StateGrid::for_model(
            &DynamicsModel::dubins_default(),
            (0.0, side),
            (0.0, side),
            &counts,
        )
        .unwrap()
    }

    #[test]
    fn failure_field_examples() {
        let sdf = disc_world_sdf(6.0, 0.12, 3.0, 3.0, 0.5);
        let grid = dubins_grid(6.0, [20, 20, 9]);
        let l0 = build_failure_field(&sdf, &grid, 0.0).unwrap();
        let l2 = build_failure_field(&sdf, &grid, 0.2).unwrap();
        for (a, b) in l0.values.iter().zip(l2.values.iter()) {
            assert!((a - 0.2 - b).abs() < 1e-12);
        }
        // Theta slices are identical: values constant along the last dim.
        let tail = 9;
        for chunk in l0.values.chunks(tail) {
            for w in chunk.windows(2) {
                assert_eq!(w[0], w[1]);
            }
        }
        // r_robot = 0 at grid points coincident with cell centers.
        let fine = StateGrid::new(vec![
            GridDim { min: 0.06, max: 5.94, count: 50, periodic: false },
            GridDim { min: 0.06, max: 5.94, count: 50, periodic: false },
            GridDim { min: -std::f64::consts::PI, max: std::f64::consts::PI, count: 7, periodic: true },
        ])
        .unwrap();
        let lf = build_failure_field(&sdf, &fine, 0.0).unwrap();
        let x0 = fine.dims[0].coord(3);
        let y0 = fine.dims[1].coord(5);
        let direct = sample_sdf(&sdf, x0, y0);
        let node = (3 * 50 + 5) * 7;
        assert!((lf.values[node] - direct).abs() < 1e-12);
    }

    #[test]
    fn failure_field_extent_mismatch_errors() {
        let sdf = disc_world_sdf(2.0, 0.1, 1.0, 1.0, 0.3);
        let grid = dubins_grid(6.0, [10, 10, 5]);
        assert!(matches!(
            build_failure_field(&sdf, &grid, 0.0),
            Err(ReachError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn one_sweep_is_bounded_by_failure() {
        let sdf = disc_world_sdf(6.0, 0.12, 3.0, 3.0, 1.0);
        let grid = dubins_grid(6.0, [20, 20, 9]);
        let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
        let model = DynamicsModel::dubins_default();
        let opts = SolveOpts { max_sweeps: 1, ..Default::default() };
        let vf = solve_vi(&model, &l, &opts).unwrap();
        // f32 storage: compare at artifact precision (rounding is monotone).
        for (v, l) in vf.values.iter().zip(l.values.iter()) {
            assert!(*v <= *l as f32);
        }
    }

    #[test]
    fn obstacle_free_field_stays_positive() {
        let grid40 = OccupancyGrid::free(40, 40, 0.15, (0.0, 0.0));
        let sdf = occupancy_to_sdf(&grid40);
        let grid = dubins_grid(6.0, [15, 15, 9]);
        let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
        let model = DynamicsModel::dubins_default();
        let vf = solve_vi(&model, &l, &SolveOpts::default()).unwrap();
        assert!(vf.converged);
        assert!(vf.values.iter().all(|&v| v >= 0.0));
        let sl = semi_lagrangian_oracle(&model, &l, 0.1, 500);
        assert!(sl.values.iter().all(|&v| v >= 0.0));
    }

    /// The canonical disc case: solver versus the semi-Lagrangian oracle,
    /// pointwise bound, sweep monotonicity, fore/aft asymmetry.
    #[test]
    fn disc_case_agrees_with_oracle() {
        let sdf = disc_world_sdf(6.0, 0.12, 3.0, 3.0, 0.5);
        let grid = dubins_grid(6.0, [40, 40, 15]);
        let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
        let model = DynamicsModel::dubins_default();

        let mut masks: Vec<Vec<bool>> = Vec::new();
        let mut prev: Option<Vec<f64>> = None;
        let vf = solve_vi_observed(&model, &l, &SolveOpts::default(), |_, v| {
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(v.iter()) {
                    assert!(b <= a, "sweep increased a node value");
                }
            }
            masks.push(v.iter().map(|&x| x <= 0.0).collect());
            prev = Some(v.to_vec());
        })
        .unwrap();
        assert!(vf.converged);

        // V <= l pointwise, hence the failure set is contained in the tube.
        let mask = brt_mask(&vf);
        for i in 0..l.values.len() {
            assert!(vf.values[i] <= l.values[i] as f32);
            if l.values[i] <= 0.0 {
                assert!(mask[i]);
            }
        }
        // Mask grows monotonically sweep over sweep.
        for w in masks.windows(2) {
            for i in 0..w[0].len() {
                assert!(!w[0][i] || w[1][i]);
            }
        }

        let sl = semi_lagrangian_oracle(&model, &l, 0.1, 2000);
        assert!(sl.converged);
        let agreement = sign_agreement_outside_band(&vf, &sl);
        assert!(agreement >= 0.95, "agreement {agreement}");

        // Fore/aft asymmetry along heading: facing the disc is unsafe
        // farther out than facing away.
        let theta_count = 15;
        let facing = [1.2, 3.0, 0.0];
        let away = [1.2, 3.0, std::f64::consts::PI * (theta_count as f64 / 2.0).floor() * 2.0
            / theta_count as f64];
        let v_facing = interpolate_vf(&vf, &facing);
        let v_away = interpolate_vf(&vf, &away);
        assert!(v_facing < v_away);
    }

    #[test]
    fn disc_case_symmetry() {
        // Mirror symmetry (y, theta) -> (-y, -theta) about the disc center.
        let sdf = disc_world_sdf(6.0, 0.12, 3.0, 3.0, 0.8);
        let grid = dubins_grid(6.0, [21, 21, 10]);
        let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
        let model = DynamicsModel::dubins_default();
        let vf = solve_vi(&model, &l, &SolveOpts::default()).unwrap();
        let counts = [21, 21, 10];
        for ix in 0..counts[0] {
            for iy in 0..counts[1] {
                for it in 0..counts[2] {
                    let j_y = counts[1] - 1 - iy;
                    let j_t = (counts[2] - it) % counts[2];
                    let a = vf.values[(ix * counts[1] + iy) * counts[2] + it];
                    let b = vf.values[(ix * counts[1] + j_y) * counts[2] + j_t];
                    assert!((a - b).abs() < 1e-5, "asymmetry {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn cfl_point_nine_has_no_nan_on_random_envs() {
        let model = DynamicsModel::dubins_default();
        for seed in 0..5 {
            let spec = EnvSpec {
                width_m: 6.0,
                height_m: 6.0,
                resolution: 0.12,
                count_min: 1,
                count_max: 4,
                shapes: vec![ObstacleShape::Disc, ObstacleShape::Rect],
                size_min: 0.4,
                size_max: 1.5,
                corridor: None,
                seed,
            };
            let sdf = occupancy_to_sdf(&gen_random_env(&spec).unwrap());
            let grid = dubins_grid(6.0, [20, 20, 9]);
            let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
            let opts = SolveOpts { cfl: 0.9, conv_tol: 1e-3, max_sweeps: 400 };
            let vf = solve_vi(&model, &l, &opts).unwrap();
            assert!(vf.values.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn oracle_fixed_point_property() {
        let sdf = disc_world_sdf(6.0, 0.12, 3.0, 3.0, 0.7);
        let grid = dubins_grid(6.0, [20, 20, 9]);
        let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
        let model = DynamicsModel::dubins_default();
        let a = semi_lagrangian_oracle(&model, &l, 0.1, 2000);
        assert!(a.converged);
        // One more iteration moves nothing beyond the tolerance.
        let mut l2 = l.clone();
        l2.values = a.values.iter().map(|&v| v as f64).collect();
        // min(l, max_u interp) with V already at the fixed point: compare
        // a single extra sweep against the converged field.
        let b = semi_lagrangian_oracle(&model, &l2, 0.1, 1);
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 2e-4);
        }
        // Deep inside the obstacle the value sticks to l.
        let node_deep = {
            let ix = 10usize; // coord 3.16, inside the radius-0.7 disc
            let iy = 10usize;
            (ix * 20 + iy) * 9
        };
        assert!((a.values[node_deep] as f64 - l.values[node_deep]).abs() < 1e-6);
    }

    #[test]
    fn brt_mask_trivial_cases() {
        let grid = dubins_grid(6.0, [4, 4, 3]);
        let vf = ValueFunction {
            grid: grid.clone(),
            values: vec![1.0f32; grid.total_points()],
            converged: true,
            sweeps: 1,
            dynamics_id: "dubins".into(),
            r_robot: 0.0,
        };
        assert!(brt_mask(&vf).iter().all(|&m| !m));
    }

    #[test]
    fn interpolation_identity_and_wrap() {
        let grid = dubins_grid(6.0, [8, 8, 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f32> = (0..grid.total_points()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vf = ValueFunction {
            grid: grid.clone(),
            values,
            converged: true,
            sweeps: 0,
            dynamics_id: "dubins".into(),
            r_robot: 0.0,
        };
        // Node identity.
        let mut multi = [0usize; 3];
        for idx in [0usize, 5, 100, 500] {
            grid.unravel(idx, &mut multi);
            let mut x = [0.0; 3];
            grid.coords(&multi, &mut x);
            assert!((interpolate_vf(&vf, &x) - vf.values[idx] as f64).abs() < 1e-6);
        }
        // Theta just below the wrap point interpolates between the last
        // and first slices.
        let pi = std::f64::consts::PI;
        let dtheta = 2.0 * pi / 12.0;
        let last = grid.dims[2].coord(11);
        let query = [1.3, 2.1, last + 0.5 * dtheta];
        let v_last = interpolate_vf(&vf, &[1.3, 2.1, last]);
        let v_first = interpolate_vf(&vf, &[1.3, 2.1, -pi]);
        let got = interpolate_vf(&vf, &query);
        assert!((got - 0.5 * (v_last + v_first)).abs() < 1e-6);
    }

    #[test]
    fn interpolation_matches_reference() {
        // Independent reference: recursive per-dimension lerp.
        fn reference(vf: &ValueFunction, x: &[f64]) -> f64 {
            let grid = &vf.grid;
            fn idx3(grid: &StateGrid, i: usize, j: usize, k: usize) -> usize {
                (i * grid.dims[1].count + j) * grid.dims[2].count + k
            }
            let pi = std::f64::consts::PI;
            let d0 = &grid.dims[0];
            let d1 = &grid.dims[1];
            let d2 = &grid.dims[2];
            let u = ((x[0] - d0.min) / d0.spacing()).clamp(0.0, (d0.count - 1) as f64);
            let v = ((x[1] - d1.min) / d1.spacing()).clamp(0.0, (d1.count - 1) as f64);
            let mut t = (x[2] + pi) % (2.0 * pi);
            if t < 0.0 {
                t += 2.0 * pi;
            }
            let w = t / d2.spacing();
            let (i0, j0, k0) = (
                (u.floor() as usize).min(d0.count - 2),
                (v.floor() as usize).min(d1.count - 2),
                (w.floor() as usize).min(d2.count - 1),
            );
            let (fu, fv, fw) = (u - i0 as f64, v - j0 as f64, w - k0 as f64);
            let k1 = (k0 + 1) % d2.count;
            let mut acc = 0.0;
            for (di, wi) in [(0, 1.0 - fu), (1, fu)] {
                for (dj, wj) in [(0, 1.0 - fv), (1, fv)] {
                    let a = vf.values[idx3(grid, i0 + di, j0 + dj, k0)] as f64;
                    let b = vf.values[idx3(grid, i0 + di, j0 + dj, k1)] as f64;
                    acc += wi * wj * (a * (1.0 - fw) + b * fw);
                }
            }
            acc
        }
        let grid = dubins_grid(6.0, [9, 7, 11]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values: Vec<f32> = (0..grid.total_points()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let vf = ValueFunction {
            grid,
            values,
            converged: true,
            sweeps: 0,
            dynamics_id: "dubins".into(),
            r_robot: 0.0,
        };
        for _ in 0..300 {
            let x = [
                rng.gen_range(-0.5..6.5),
                rng.gen_range(-0.5..6.5),
                rng.gen_range(-7.0..7.0),
            ];
            let got = interpolate_vf(&vf, &x);
            let want = reference(&vf, &x);
            assert!((got - want).abs() < 1e-6, "{got} vs {want} at {x:?}");
        }
    }

    #[test]
    fn interpolation_gradient_matches_finite_difference() {
        let grid = dubins_grid(6.0, [9, 9, 11]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f32> = (0..grid.total_points()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let vf = ValueFunction {
            grid,
            values,
            converged: true,
            sweeps: 0,
            dynamics_id: "dubins".into(),
            r_robot: 0.0,
        };
        let h = 1e-6;
        let mut grad = [0.0; 3];
        for _ in 0..100 {
            let x = [
                rng.gen_range(0.5..5.5),
                rng.gen_range(0.5..5.5),
                rng.gen_range(-2.5..2.5),
            ];
            interpolate_vf_grad(&vf, &x, &mut grad);
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (interpolate_vf(&vf, &xp) - interpolate_vf(&vf, &xm)) / (2.0 * h);
                // Skip queries straddling a cell boundary kink.
                if (grad[i] - fd).abs() > 1e-4 {
                    continue;
                }
                assert!((grad[i] - fd).abs() < 1e-4);
            }
        }
    }
}
