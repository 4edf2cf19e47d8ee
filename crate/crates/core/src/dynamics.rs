//! Robot models: continuous vector fields, discretized steps, and the
//! analytic Hamiltonians / dissipation bounds used by the reachability
//! solver.
//!
//! States are slices in a fixed layout: Dubins `[x, y, theta]`, dynamic
//! unicycle `[x, y, theta, v, omega]`. Theta lives in `[-pi, pi)` and is
//! rewrapped after every integrator step; velocity-like components are
//! clamped back into their bounds.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Maximum state dimension across supported models.
pub const MAX_STATE_DIM: usize = 5;
/// Maximum control dimension across supported models.
pub const MAX_CONTROL_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("control component {index} = {value} outside [{lo}, {hi}]")]
    ControlOutOfBounds { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("unknown dynamics id {0:?}")]
    UnknownId(String),
}

/// Wrap an angle to `[-pi, pi)`.
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let wrapped = theta - two_pi * ((theta + PI) / two_pi).floor();
    // Guard the boundary: floor rounding can land exactly on +pi.
    if wrapped >= PI {
        wrapped - two_pi
    } else {
        wrapped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DubinsParams {
    /// Constant linear speed, m/s.
    pub speed: f64,
    /// Angular speed bound, rad/s.
    pub omega_max: f64,
}

impl Default for DubinsParams {
    fn default() -> Self {
        Self { speed: 0.5, omega_max: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Unicycle2Params {
    /// Linear speed bound, m/s.
    pub v_max: f64,
    /// Angular speed bound, rad/s.
    pub omega_max: f64,
    /// Linear acceleration bound, m/s^2.
    pub accel_max: f64,
    /// Angular acceleration bound, rad/s^2.
    pub alpha_max: f64,
}

impl Default for Unicycle2Params {
    fn default() -> Self {
        Self { v_max: 1.0, omega_max: 0.5, accel_max: 0.25, alpha_max: 1.0 }
    }
}

/// A robot model with box control bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum DynamicsModel {
    Dubins(DubinsParams),
    Unicycle2(Unicycle2Params),
}

impl DynamicsModel {
    pub fn dubins_default() -> Self {
        DynamicsModel::Dubins(DubinsParams::default())
    }

    pub fn unicycle2_default() -> Self {
        DynamicsModel::Unicycle2(Unicycle2Params::default())
    }

    pub fn from_id(id: &str) -> Result<Self, DynamicsError> {
        match id {
            "dubins" => Ok(Self::dubins_default()),
            "unicycle2" => Ok(Self::unicycle2_default()),
            other => Err(DynamicsError::UnknownId(other.to_string())),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            DynamicsModel::Dubins(_) => "dubins",
            DynamicsModel::Unicycle2(_) => "unicycle2",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsModel::Dubins(_) => 3,
            DynamicsModel::Unicycle2(_) => 5,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            DynamicsModel::Dubins(_) => 1,
            DynamicsModel::Unicycle2(_) => 2,
        }
    }

    /// Index of the heading dimension (the single periodic state).
    pub fn theta_index(&self) -> usize {
        2
    }

    pub fn control_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DynamicsModel::Dubins(p) => (vec![-p.omega_max], vec![p.omega_max]),
            DynamicsModel::Unicycle2(p) => {
                (vec![-p.accel_max, -p.alpha_max], vec![p.accel_max, p.alpha_max])
            }
        }
    }

    /// Per-dimension state bounds; `None` where unbounded (positions) or
    /// periodic (theta).
    pub fn state_bounds(&self) -> Vec<Option<(f64, f64)>> {
        match self {
            DynamicsModel::Dubins(_) => vec![None, None, None],
            DynamicsModel::Unicycle2(p) => vec![
                None,
                None,
                None,
                Some((-p.v_max, p.v_max)),
                Some((-p.omega_max, p.omega_max)),
            ],
        }
    }

    pub fn periodic_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.state_dim()];
        mask[self.theta_index()] = true;
        mask
    }

    #[inline]
    fn vector_field(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        match self {
            DynamicsModel::Dubins(p) => {
                let theta = x[2];
                dx[0] = p.speed * theta.cos();
                dx[1] = p.speed * theta.sin();
                dx[2] = u[0];
            }
            DynamicsModel::Unicycle2(_) => {
                let theta = x[2];
                let v = x[3];
                dx[0] = v * theta.cos();
                dx[1] = v * theta.sin();
                dx[2] = x[4];
                dx[3] = u[0];
                dx[4] = u[1];
            }
        }
    }

    /// Continuous-time dynamics `dx = f(x, u)`. Errors if the control is
    /// outside its bounds.
    pub fn f_continuous(&self, x: &[f64], u: &[f64], dx: &mut [f64]) -> Result<(), DynamicsError> {
        let (lo, hi) = self.control_bounds();
        for (i, &ui) in u.iter().enumerate().take(self.control_dim()) {
            if ui < lo[i] || ui > hi[i] {
                return Err(DynamicsError::ControlOutOfBounds {
                    index: i,
                    value: ui,
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        self.vector_field(x, u, dx);
        Ok(())
    }

    fn clamp_control(&self, u: &[f64], out: &mut [f64; MAX_CONTROL_DIM]) {
        let (lo, hi) = self.control_bounds();
        for i in 0..self.control_dim() {
            out[i] = u[i].clamp(lo[i], hi[i]);
        }
    }

    /// Rewrap theta and clamp bounded components in place.
    pub fn normalize_state(&self, x: &mut [f64]) {
        x[self.theta_index()] = wrap_angle(x[self.theta_index()]);
        for (i, b) in self.state_bounds().iter().enumerate() {
            if let Some((lo, hi)) = b {
                x[i] = x[i].clamp(*lo, *hi);
            }
        }
    }

    /// One forward-Euler step; the control is clamped to its box first.
    pub fn step_euler(&self, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
        debug_assert!(dt > 0.0);
        let n = self.state_dim();
        let mut uc = [0.0; MAX_CONTROL_DIM];
        self.clamp_control(u, &mut uc);
        let mut dx = [0.0; MAX_STATE_DIM];
        self.vector_field(x, &uc[..self.control_dim()], &mut dx[..n]);
        for i in 0..n {
            out[i] = x[i] + dt * dx[i];
        }
        self.normalize_state(&mut out[..n]);
    }

    /// One classical Runge-Kutta-4 step with zero-order-hold control.
    pub fn step_rk4(&self, x: &[f64], u: &[f64], dt: f64, out: &mut [f64]) {
        debug_assert!(dt > 0.0);
        let n = self.state_dim();
        let mut uc = [0.0; MAX_CONTROL_DIM];
        self.clamp_control(u, &mut uc);
        let u = &uc[..self.control_dim()];
        let mut k1 = [0.0; MAX_STATE_DIM];
        let mut k2 = [0.0; MAX_STATE_DIM];
        let mut k3 = [0.0; MAX_STATE_DIM];
        let mut k4 = [0.0; MAX_STATE_DIM];
        let mut tmp = [0.0; MAX_STATE_DIM];
        self.vector_field(x, u, &mut k1[..n]);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        self.vector_field(&tmp[..n], u, &mut k2[..n]);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        self.vector_field(&tmp[..n], u, &mut k3[..n]);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        self.vector_field(&tmp[..n], u, &mut k4[..n]);
        for i in 0..n {
            out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        self.normalize_state(&mut out[..n]);
    }

    /// Jacobians of the Euler step: `A = d(step)/dx`, `B = d(step)/du`.
    /// Rows of clamped components are zeroed when the clamp is active.
    pub fn step_jacobian(
        &self,
        x: &[f64],
        u: &[f64],
        dt: f64,
        a: &mut [[f64; MAX_STATE_DIM]; MAX_STATE_DIM],
        b: &mut [[f64; MAX_CONTROL_DIM]; MAX_STATE_DIM],
    ) {
        let n = self.state_dim();
        for row in a.iter_mut().take(n) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for row in b.iter_mut().take(n) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for (i, row) in a.iter_mut().enumerate().take(n) {
            row[i] = 1.0;
        }
        match self {
            DynamicsModel::Dubins(p) => {
                let theta = x[2];
                a[0][2] = -dt * p.speed * theta.sin();
                a[1][2] = dt * p.speed * theta.cos();
                b[2][0] = dt;
            }
            DynamicsModel::Unicycle2(p) => {
                let theta = x[2];
                let v = x[3];
                a[0][2] = -dt * v * theta.sin();
                a[0][3] = dt * theta.cos();
                a[1][2] = dt * v * theta.cos();
                a[1][3] = dt * theta.sin();
                a[2][4] = dt;
                // Clamp-aware rows for v and omega.
                let mut uc = [0.0; MAX_CONTROL_DIM];
                self.clamp_control(u, &mut uc);
                let v_next = v + dt * uc[0];
                let w_next = x[4] + dt * uc[1];
                if v_next.abs() < p.v_max {
                    b[3][0] = dt;
                } else {
                    a[3][3] = 0.0;
                }
                if w_next.abs() < p.omega_max {
                    b[4][1] = dt;
                } else {
                    a[4][4] = 0.0;
                }
            }
        }
    }

    /// Analytic Hamiltonian `max_u p . f(x, u)` over the control box.
    pub fn hamiltonian(&self, x: &[f64], p: &[f64]) -> f64 {
        match self {
            DynamicsModel::Dubins(m) => {
                let theta = x[2];
                m.speed * (p[0] * theta.cos() + p[1] * theta.sin()) + m.omega_max * p[2].abs()
            }
            DynamicsModel::Unicycle2(m) => {
                let theta = x[2];
                let v = x[3];
                let omega = x[4];
                v * (p[0] * theta.cos() + p[1] * theta.sin())
                    + omega * p[2]
                    + m.accel_max * p[3].abs()
                    + m.alpha_max * p[4].abs()
            }
        }
    }

    /// Componentwise bounds `alpha_i >= max_u |f_i(x, u)|`, taken over the
    /// model's state bounds for the velocity-dependent rates (the
    /// reachability grids span those bounds).
    pub fn dissipation_bounds(&self, _x: &[f64], out: &mut [f64]) {
        match self {
            DynamicsModel::Dubins(p) => {
                out[0] = p.speed;
                out[1] = p.speed;
                out[2] = p.omega_max;
            }
            DynamicsModel::Unicycle2(p) => {
                out[0] = p.v_max;
                out[1] = p.v_max;
                out[2] = p.omega_max;
                out[3] = p.accel_max;
                out[4] = p.alpha_max;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dubins() -> DynamicsModel {
        DynamicsModel::dubins_default()
    }

    fn unicycle() -> DynamicsModel {
        DynamicsModel::unicycle2_default()
    }

    /// Closed-form Dubins pose under constant turn rate.
    fn dubins_circle(x0: &[f64; 3], omega: f64, t: f64) -> [f64; 3] {
        let v = 0.5;
        if omega == 0.0 {
            return [x0[0] + v * t * x0[2].cos(), x0[1] + v * t * x0[2].sin(), x0[2]];
        }
        let r = v / omega;
        [
            x0[0] + r * ((x0[2] + omega * t).sin() - x0[2].sin()),
            x0[1] - r * ((x0[2] + omega * t).cos() - x0[2].cos()),
            wrap_angle(x0[2] + omega * t),
        ]
    }

    #[test]
    fn dubins_field_examples() {
        let m = dubins();
        let mut dx = [0.0; 3];
        m.f_continuous(&[0.0, 0.0, 0.0], &[0.0], &mut dx).unwrap();
        assert_eq!(dx, [0.5, 0.0, 0.0]);
        m.f_continuous(&[0.0, 0.0, std::f64::consts::FRAC_PI_2], &[0.2], &mut dx).unwrap();
        assert!(dx[0].abs() < 1e-15);
        assert!((dx[1] - 0.5).abs() < 1e-15);
        assert_eq!(dx[2], 0.2);
    }

    #[test]
    fn unicycle_field_example() {
        let m = unicycle();
        let mut dx = [0.0; 5];
        m.f_continuous(&[0.0, 0.0, 0.0, 1.0, 0.0], &[0.25, 0.0], &mut dx).unwrap();
        assert_eq!(dx, [1.0, 0.0, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn control_out_of_bounds_errors() {
        let m = dubins();
        let mut dx = [0.0; 3];
        let err = m.f_continuous(&[0.0; 3], &[0.3], &mut dx);
        assert!(matches!(err, Err(DynamicsError::ControlOutOfBounds { .. })));
    }

    #[test]
    fn euler_straight_line() {
        let m = dubins();
        let mut out = [0.0; 3];
        m.step_euler(&[0.0, 0.0, 0.0], &[0.0], 0.1, &mut out);
        assert_eq!(out, [0.05, 0.0, 0.0]);
    }

    #[test]
    fn euler_clamps_unicycle_speed() {
        let m = unicycle();
        let mut out = [0.0; 5];
        m.step_euler(&[0.0, 0.0, 0.0, 1.0, 0.0], &[0.25, 0.0], 0.1, &mut out);
        assert_eq!(out[3], 1.0);
    }

    #[test]
    fn euler_wraps_theta() {
        let m = dubins();
        let mut out = [0.0; 3];
        let theta0 = PI - 0.01;
        m.step_euler(&[0.0, 0.0, theta0], &[0.2], 0.1, &mut out);
        assert!((out[2] - (-PI + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn wrap_idempotent() {
        for theta in [-7.0, -PI, -0.3, 0.0, 1.0, PI, 9.42, 100.0] {
            let once = wrap_angle(theta);
            assert!((-PI..PI).contains(&once), "{theta} -> {once}");
            assert_eq!(wrap_angle(once), once);
        }
    }

    #[test]
    fn rk4_matches_analytic_circle() {
        let m = dubins();
        let x0 = [0.0, 0.0, 0.0];
        let mut out = [0.0; 3];
        m.step_rk4(&x0, &[0.25], 0.1, &mut out);
        let want = dubins_circle(&x0, 0.25, 0.1);
        let err = ((out[0] - want[0]).powi(2) + (out[1] - want[1]).powi(2)).sqrt();
        assert!(err < 1e-7, "position error {err}");
    }

    #[test]
    fn rk4_equals_euler_for_straight_motion() {
        let m = dubins();
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        m.step_euler(&[0.2, -0.1, 0.0], &[0.0], 0.1, &mut a);
        m.step_rk4(&[0.2, -0.1, 0.0], &[0.0], 0.1, &mut b);
        assert_eq!(a, b);
    }

    fn integrate_error(m: &DynamicsModel, dt: f64, steps: usize, rk4: bool) -> f64 {
        let mut x = [0.0, 0.0, 0.0];
        let mut out = [0.0; 3];
        for _ in 0..steps {
            if rk4 {
                m.step_rk4(&x, &[0.25], dt, &mut out);
            } else {
                m.step_euler(&x, &[0.25], dt, &mut out);
            }
            x = out;
        }
        let want = dubins_circle(&[0.0, 0.0, 0.0], 0.25, dt * steps as f64);
        ((x[0] - want[0]).powi(2) + (x[1] - want[1]).powi(2)).sqrt()
    }

    #[test]
    fn rk4_order_four_convergence() {
        let m = dubins();
        let e1 = integrate_error(&m, 0.2, 10, true);
        let e2 = integrate_error(&m, 0.1, 20, true);
        let ratio = e1 / e2;
        assert!((8.0..32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn euler_order_one_convergence() {
        let m = dubins();
        let e1 = integrate_error(&m, 0.2, 10, false);
        let e2 = integrate_error(&m, 0.1, 20, false);
        let ratio = e1 / e2;
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
    }

    /// Grid search over the control box; step fine enough for the
    /// bang-bang structure of these Hamiltonians.
    fn hamiltonian_grid_search(m: &DynamicsModel, x: &[f64], p: &[f64], step: f64) -> f64 {
        let (lo, hi) = m.control_bounds();
        let n = m.state_dim();
        let mut dx = vec![0.0; n];
        let mut best = f64::NEG_INFINITY;
        match m.control_dim() {
            1 => {
                let mut u = lo[0];
                while u <= hi[0] + 1e-12 {
                    m.f_continuous(x, &[u.min(hi[0])], &mut dx).unwrap();
                    let val: f64 = p.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
                    best = best.max(val);
                    u += step;
                }
            }
            2 => {
                let mut u0 = lo[0];
                while u0 <= hi[0] + 1e-12 {
                    let mut u1 = lo[1];
                    while u1 <= hi[1] + 1e-12 {
                        m.f_continuous(x, &[u0.min(hi[0]), u1.min(hi[1])], &mut dx).unwrap();
                        let val: f64 = p.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
                        best = best.max(val);
                        u1 += step;
                    }
                    u0 += step;
                }
            }
            _ => unreachable!(),
        }
        best
    }

    #[test]
    fn hamiltonian_examples() {
        let m = dubins();
        let h = m.hamiltonian(&[1.0, -2.0, 0.7], &[0.0, 0.0, 1.0]);
        assert!((h - 0.25).abs() < 1e-12);
        let grid = hamiltonian_grid_search(&m, &[1.0, -2.0, 0.7], &[0.0, 0.0, 1.0], 1e-4);
        assert!((h - grid).abs() < 1e-9);
        assert_eq!(m.hamiltonian(&[0.0; 3], &[0.0; 3]), 0.0);
    }

    #[test]
    fn hamiltonian_matches_control_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in [dubins(), unicycle()] {
            let n = m.state_dim();
            let tol = if n == 3 { 1e-6 } else { 1e-4 };
            for _ in 0..25 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let analytic = m.hamiltonian(&x, &p);
                // Dense sample: analytic max dominates and is attained.
                let sampled = hamiltonian_grid_search(&m, &x, &p, 0.25 / 50.0);
                assert!(analytic >= sampled - 1e-9);
                assert!((analytic - sampled).abs() < tol, "analytic {analytic} sampled {sampled}");
            }
        }
    }

    #[test]
    fn dissipation_bound_values() {
        let m = dubins();
        let mut a = [0.0; 3];
        m.dissipation_bounds(&[0.0; 3], &mut a);
        assert_eq!(a, [0.5, 0.5, 0.25]);
        let m = unicycle();
        let mut a = [0.0; 5];
        m.dissipation_bounds(&[0.0; 5], &mut a);
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 1.0);
    }

    #[test]
    fn dissipation_bounds_dominate_sampled_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for m in [dubins(), unicycle()] {
            let n = m.state_dim();
            let (lo, hi) = m.control_bounds();
            let bounds = m.state_bounds();
            let mut alpha = vec![0.0; n];
            let mut dx = vec![0.0; n];
            for _ in 0..1000 {
                let x: Vec<f64> = (0..n)
                    .map(|i| match bounds[i] {
                        Some((a, b)) => rng.gen_range(a..=b),
                        None => rng.gen_range(-3.0..3.0),
                    })
                    .collect();
                let u: Vec<f64> =
                    (0..m.control_dim()).map(|i| rng.gen_range(lo[i]..=hi[i])).collect();
                m.dissipation_bounds(&x, &mut alpha);
                m.f_continuous(&x, &u, &mut dx).unwrap();
                for i in 0..n {
                    assert!(alpha[i] >= dx[i].abs() - 1e-12);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bounded_components_stay_bounded(seed in 0u64..10_000) {
            let m = unicycle();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = [0.0, 0.0, 0.0, rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)];
            let mut out = [0.0; 5];
            for _ in 0..200 {
                let u = [rng.gen_range(-0.25..0.25), rng.gen_range(-1.0..1.0)];
                if rng.gen::<bool>() {
                    m.step_euler(&x, &u, 0.1, &mut out);
                } else {
                    m.step_rk4(&x, &u, 0.1, &mut out);
                }
                x = out;
                prop_assert!(x[3].abs() <= 1.0 + 1e-12);
                prop_assert!(x[4].abs() <= 0.5 + 1e-12);
                prop_assert!((-PI..PI).contains(&x[2]));
            }
        }
    }
}
