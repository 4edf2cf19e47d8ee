//! Occupancy grids, exact signed distance fields, and environment tooling.
//!
//! Occupancy grids are row-major with row 0 at minimal y; a cell value of
//! 0 is free, 1 is occupied. Signed distances are measured between cell
//! centers and are positive in free space, negative inside obstacles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid env spec: {0}")]
    InvalidSpec(String),
    #[error("unsatisfiable spec: obstacle placement failed after {attempts} attempts")]
    Unsatisfiable { attempts: usize },
    #[error("augmentation requires square grids, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
}

/// 2D rasterized environment. `cells[iy * width + ix]`, 0 = free, 1 = occupied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub width: usize,
    pub height: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// World coordinates of the corner of cell (0, 0).
    pub origin: (f64, f64),
    pub cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: (f64, f64),
        cells: Vec<u8>,
    ) -> Result<Self, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidGrid("width and height must be >= 1".into()));
        }
        if !(resolution > 0.0) {
            return Err(GeomError::InvalidGrid("resolution must be > 0".into()));
        }
        if cells.len() != width * height {
            return Err(GeomError::InvalidGrid(format!(
                "cells length {} does not match {}x{}",
                cells.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, resolution, origin, cells })
    }

    pub fn free(width: usize, height: usize, resolution: f64, origin: (f64, f64)) -> Self {
        Self::new(width, height, resolution, origin, vec![0; width * height]).expect("valid grid")
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    #[inline]
    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.cells[self.idx(ix, iy)] != 0
    }

    /// World coordinates of the center of cell (ix, iy).
    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.resolution,
            self.origin.1 + (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Length of the grid's diagonal in meters.
    pub fn diagonal(&self) -> f64 {
        let w = self.width as f64 * self.resolution;
        let h = self.height as f64 * self.resolution;
        (w * w + h * h).sqrt()
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

/// Signed distance samples at the cell centers of an [`OccupancyGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: (f64, f64),
    /// Row-major distances in meters; positive in free space.
    pub values: Vec<f64>,
}

impl SdfGrid {
    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.resolution,
            self.origin.1 + (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Rectangle covered by the grid: (min_x, min_y, max_x, max_y).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + self.width as f64 * self.resolution,
            self.origin.1 + self.height as f64 * self.resolution,
        )
    }
}

/// Obstacle shapes available to the environment generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleShape {
    Disc,
    Rect,
}

/// Start/goal clearance request for generated environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorSpec {
    pub start: (f64, f64),
    pub goal: (f64, f64),
    /// Obstacles keep at least this distance from start and goal.
    pub clearance: f64,
}

/// Parameters of the random environment generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub width_m: f64,
    pub height_m: f64,
    pub resolution: f64,
    /// Inclusive range for the number of obstacles.
    pub count_min: usize,
    pub count_max: usize,
    pub shapes: Vec<ObstacleShape>,
    /// Inclusive range for the obstacle size (disc diameter / rect side), meters.
    pub size_min: f64,
    pub size_max: f64,
    pub corridor: Option<CorridorSpec>,
    pub seed: u64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.width_m > 0.0 && self.height_m > 0.0 && self.resolution > 0.0) {
            return Err(GeomError::InvalidSpec("map size and resolution must be positive".into()));
        }
        if self.count_min > self.count_max {
            return Err(GeomError::InvalidSpec("empty obstacle count range".into()));
        }
        if self.count_max > 0 && self.shapes.is_empty() {
            return Err(GeomError::InvalidSpec("shape set is empty".into()));
        }
        if !(self.size_min > 0.0) || self.size_min > self.size_max {
            return Err(GeomError::InvalidSpec("invalid obstacle size range".into()));
        }
        if let Some(c) = &self.corridor {
            if !(c.clearance > 0.0) {
                return Err(GeomError::InvalidSpec("corridor clearance must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn cells_wide(&self) -> usize {
        (self.width_m / self.resolution).round().max(1.0) as usize
    }

    pub fn cells_high(&self) -> usize {
        (self.height_m / self.resolution).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Obstacle {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, half_w: f64, half_h: f64 },
}

impl Obstacle {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Obstacle::Disc { cx, cy, r } => {
                let dx = x - cx;
                let dy = y - cy;
                dx * dx + dy * dy <= r * r
            }
            Obstacle::Rect { cx, cy, half_w, half_h } => {
                (x - cx).abs() <= half_w && (y - cy).abs() <= half_h
            }
        }
    }

    /// Distance from a point to the obstacle boundary (0 inside).
    fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Obstacle::Disc { cx, cy, r } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
                d.max(0.0)
            }
            Obstacle::Rect { cx, cy, half_w, half_h } => {
                let dx = ((x - cx).abs() - half_w).max(0.0);
                let dy = ((y - cy).abs() - half_h).max(0.0);
                (dx * dx + dy * dy).sqrt()
            }
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Generate a random occupancy grid. Deterministic for a fixed spec
/// (the seed is part of the spec).
pub fn gen_random_env(spec: &EnvSpec) -> Result<OccupancyGrid, GeomError> {
    spec.validate()?;
    let width = spec.cells_wide();
    let height = spec.cells_high();
    let mut grid = OccupancyGrid::free(width, height, spec.resolution, (0.0, 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = if spec.count_min == spec.count_max {
        spec.count_min
    } else {
        rng.gen_range(spec.count_min..=spec.count_max)
    };

    let mut obstacles = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];
            let cx = rng.gen_range(0.0..spec.width_m);
            let cy = rng.gen_range(0.0..spec.height_m);
            let ob = match shape {
                ObstacleShape::Disc => {
                    let d = rng.gen_range(spec.size_min..=spec.size_max);
                    Obstacle::Disc { cx, cy, r: d / 2.0 }
                }
                ObstacleShape::Rect => {
                    let w = rng.gen_range(spec.size_min..=spec.size_max);
                    let h = rng.gen_range(spec.size_min..=spec.size_max);
                    Obstacle::Rect { cx, cy, half_w: w / 2.0, half_h: h / 2.0 }
                }
            };
            let clear = match &spec.corridor {
                Some(c) => {
                    ob.distance(c.start.0, c.start.1) >= c.clearance
                        && ob.distance(c.goal.0, c.goal.1) >= c.clearance
                }
                None => true,
            };
            if clear {
                obstacles.push(ob);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GeomError::Unsatisfiable { attempts: PLACEMENT_ATTEMPTS });
        }
    }

    // Occupancy by the cell-center-in-shape test.
    for iy in 0..height {
        for ix in 0..width {
            let (x, y) = grid.cell_center(ix, iy);
            if obstacles.iter().any(|ob| ob.contains(x, y)) {
                grid.cells[iy * width + ix] = 1;
            }
        }
    }
    Ok(grid)
}

/// Exact squared Euclidean distance transform of one scan line:
/// `d[p] = min_q (p - q)^2 + f[q]` via the lower envelope of parabolas
/// (Felzenszwalb-Huttenlocher). Inputs are integers (as f64) bounded so
/// every intermediate is exactly representable.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Squared distances (in cells) from every cell to the nearest source cell.
/// Cells in scan lines with no source carry a cap larger than any true
/// squared distance, so real sources always win in the second pass. The
/// caller guarantees at least one source exists.
fn edt_squared(sources: impl Fn(usize, usize) -> bool, width: usize, height: usize) -> Vec<f64> {
    let cap = (width * width + height * height + 1) as f64;
    let n = width.max(height);
    let mut tmp = vec![0.0f64; width * height];
    let mut f = vec![0.0f64; n];
    let mut d = vec![0.0f64; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    // Pass 1: per row.
    for iy in 0..height {
        for ix in 0..width {
            f[ix] = if sources(ix, iy) { 0.0 } else { cap };
        }
        dt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        tmp[iy * width..(iy + 1) * width].copy_from_slice(&d[..width]);
    }
    // Pass 2: per column over the row results.
    let mut out = vec![0.0f64; width * height];
    for ix in 0..width {
        for iy in 0..height {
            f[iy] = tmp[iy * width + ix];
        }
        dt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for iy in 0..height {
            out[iy * width + ix] = d[iy];
        }
    }
    out
}

/// Exact signed Euclidean distance field between cell centers:
/// distance to the nearest occupied cell minus distance to the nearest
/// free cell. An all-free grid gets the diagonal as a sentinel value
/// (all-occupied symmetric).
pub fn occupancy_to_sdf(grid: &OccupancyGrid) -> SdfGrid {
    let res = grid.resolution;
    let sentinel = grid.diagonal();
    let occupied = grid.occupied_count();
    let total = grid.cells.len();

    let values = if occupied == 0 {
        vec![sentinel; total]
    } else if occupied == total {
        vec![-sentinel; total]
    } else {
        let d_occ = edt_squared(|x, y| grid.is_occupied(x, y), grid.width, grid.height);
        let d_free = edt_squared(|x, y| !grid.is_occupied(x, y), grid.width, grid.height);
        d_occ
            .iter()
            .zip(d_free.iter())
            .map(|(&o, &f)| (o.sqrt() - f.sqrt()) * res)
            .collect()
    };

    SdfGrid {
        width: grid.width,
        height: grid.height,
        resolution: res,
        origin: grid.origin,
        values,
    }
}

/// Cell-center coordinates of a query point, clamped to the grid, plus the
/// base cell index and in-cell fractions for bilinear interpolation.
fn bilinear_setup(sdf: &SdfGrid, x: f64, y: f64) -> (usize, usize, f64, f64) {
    let u = ((x - sdf.origin.0) / sdf.resolution - 0.5).clamp(0.0, (sdf.width - 1) as f64);
    let v = ((y - sdf.origin.1) / sdf.resolution - 0.5).clamp(0.0, (sdf.height - 1) as f64);
    let ix = (u.floor() as usize).min(sdf.width.saturating_sub(2));
    let iy = (v.floor() as usize).min(sdf.height.saturating_sub(2));
    (ix, iy, u - ix as f64, v - iy as f64)
}

/// Bilinear interpolation of the SDF at a world point. Queries outside the
/// grid clamp to the nearest border cell value.
pub fn sample_sdf(sdf: &SdfGrid, x: f64, y: f64) -> f64 {
    if sdf.width == 1 && sdf.height == 1 {
        return sdf.values[0];
    }
    let (ix, iy, fx, fy) = bilinear_setup(sdf, x, y);
    if sdf.width == 1 {
        let v0 = sdf.values[sdf.idx(0, iy)];
        let v1 = sdf.values[sdf.idx(0, iy + 1)];
        return v0 + (v1 - v0) * fy;
    }
    if sdf.height == 1 {
        let v0 = sdf.values[sdf.idx(ix, 0)];
        let v1 = sdf.values[sdf.idx(ix + 1, 0)];
        return v0 + (v1 - v0) * fx;
    }
    let v00 = sdf.values[sdf.idx(ix, iy)];
    let v10 = sdf.values[sdf.idx(ix + 1, iy)];
    let v01 = sdf.values[sdf.idx(ix, iy + 1)];
    let v11 = sdf.values[sdf.idx(ix + 1, iy + 1)];
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

/// Analytic gradient of the bilinear interpolant (piecewise constant per
/// cell quad; clamped regions have zero gradient in the clamped direction).
pub fn sdf_gradient(sdf: &SdfGrid, x: f64, y: f64) -> (f64, f64) {
    if sdf.width == 1 && sdf.height == 1 {
        return (0.0, 0.0);
    }
    let res = sdf.resolution;
    let u = (x - sdf.origin.0) / res - 0.5;
    let v = (y - sdf.origin.1) / res - 0.5;
    let inside_x = u > 0.0 && u < (sdf.width - 1) as f64;
    let inside_y = v > 0.0 && v < (sdf.height - 1) as f64;
    let (ix, iy, fx, fy) = bilinear_setup(sdf, x, y);
    if sdf.width == 1 {
        let v0 = sdf.values[sdf.idx(0, iy)];
        let v1 = sdf.values[sdf.idx(0, iy + 1)];
        return (0.0, if inside_y { (v1 - v0) / res } else { 0.0 });
    }
    if sdf.height == 1 {
        let v0 = sdf.values[sdf.idx(ix, 0)];
        let v1 = sdf.values[sdf.idx(ix + 1, 0)];
        return (if inside_x { (v1 - v0) / res } else { 0.0 }, 0.0);
    }
    let v00 = sdf.values[sdf.idx(ix, iy)];
    let v10 = sdf.values[sdf.idx(ix + 1, iy)];
    let v01 = sdf.values[sdf.idx(ix, iy + 1)];
    let v11 = sdf.values[sdf.idx(ix + 1, iy + 1)];
    let gx = if inside_x {
        ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) / res
    } else {
        0.0
    };
    let gy = if inside_y {
        ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) / res
    } else {
        0.0
    };
    (gx, gy)
}

fn rotate90(grid: &OccupancyGrid) -> OccupancyGrid {
    // Counter-clockwise quarter turn of a square grid.
    let n = grid.width;
    let mut cells = vec![0u8; n * n];
    for iy in 0..n {
        for ix in 0..n {
            cells[iy * n + ix] = grid.cells[ix * n + (n - 1 - iy)];
        }
    }
    OccupancyGrid { cells, ..grid.clone() }
}

fn flip_vertical(grid: &OccupancyGrid) -> OccupancyGrid {
    let (w, h) = (grid.width, grid.height);
    let mut cells = vec![0u8; w * h];
    for iy in 0..h {
        for ix in 0..w {
            cells[iy * w + ix] = grid.cells[(h - 1 - iy) * w + ix];
        }
    }
    OccupancyGrid { cells, ..grid.clone() }
}

/// Expand each square grid into its 8 dihedral variants: identity, three
/// rotations, vertical flip, three rotations of the flip.
pub fn augment(grids: &[OccupancyGrid]) -> Result<Vec<OccupancyGrid>, GeomError> {
    let mut out = Vec::with_capacity(grids.len() * 8);
    for g in grids {
        if g.width != g.height {
            return Err(GeomError::NotSquare { width: g.width, height: g.height });
        }
        let r90 = rotate90(g);
        let r180 = rotate90(&r90);
        let r270 = rotate90(&r180);
        let f = flip_vertical(g);
        let f90 = rotate90(&f);
        let f180 = rotate90(&f90);
        let f270 = rotate90(&f180);
        out.extend([g.clone(), r90, r180, r270, f, f90, f180, f270]);
    }
    Ok(out)
}

/// Square sub-grid of side `side` meters centered at a world point, cell
/// lattice aligned with the global grid. Cells beyond the global map are
/// free.
pub fn extract_window(global: &OccupancyGrid, center: (f64, f64), side: f64) -> OccupancyGrid {
    assert!(side > 0.0, "window side must be positive");
    let res = global.resolution;
    let n = (side / res).round().max(1.0) as usize;
    let ix0 = ((center.0 - global.origin.0 - side / 2.0) / res).round() as isize;
    let iy0 = ((center.1 - global.origin.1 - side / 2.0) / res).round() as isize;
    let origin = (
        global.origin.0 + ix0 as f64 * res,
        global.origin.1 + iy0 as f64 * res,
    );
    let mut cells = vec![0u8; n * n];
    for wy in 0..n {
        let gy = iy0 + wy as isize;
        if gy < 0 || gy >= global.height as isize {
            continue;
        }
        for wx in 0..n {
            let gx = ix0 + wx as isize;
            if gx < 0 || gx >= global.width as isize {
                continue;
            }
            cells[wy * n + wx] = global.cells[gy as usize * global.width + gx as usize];
        }
    }
    OccupancyGrid { width: n, height: n, resolution: res, origin, cells }
}
