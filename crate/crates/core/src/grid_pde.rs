//! Finite-difference discretization of the convection-diffusion equation
//!
//! ```text
//! ∂u/∂t = ∇²u − v(t)·∇u + S(z)
//! ```
//!
//! on a uniform square grid with homogeneous Neumann boundaries (ghost-node
//! reflection on all four sides), explicit forward-Euler time stepping, bilinear
//! point observation, and the sparse Jacobian `A − B(t)` used by the adjoint.
//!
//! Node `(ix, iy)` is stored at flat index `iy * n + ix`, so `x` is the fast
//! axis: the `X` blocks of the advection Jacobian couple `ix ± 1` inside one
//! row block and the `Y` blocks couple neighbouring row blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid over `[z_min, z_max]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    z_min: f64,
    z_max: f64,
    n_points: usize,
    spacing: f64,
}

impl GridSpec {
    pub fn new(z_min: f64, z_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 points per axis, got {n_points}"
            )));
        }
        if !(z_min.is_finite() && z_max.is_finite() && z_max > z_min) {
            return Err(Error::InvalidGrid(format!(
                "bounds must be finite with z_max > z_min, got [{z_min}, {z_max}]"
            )));
        }
        let spacing = (z_max - z_min) / (n_points - 1) as f64;
        Ok(Self {
            z_min,
            z_max,
            n_points,
            spacing,
        })
    }

    pub fn z_min(&self) -> f64 {
        self.z_min
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.n_points * self.n_points
    }

    /// Coordinate of grid line `i` along either axis.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.z_max
        } else {
            self.z_min + i as f64 * self.spacing
        }
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.n_points + ix
    }

    /// Physical coordinates of flat node `k`.
    #[inline]
    pub fn node_position(&self, k: usize) -> (f64, f64) {
        (self.coord(k % self.n_points), self.coord(k / self.n_points))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let tol = 1e-12 * (self.z_max - self.z_min);
        let inside = |c: f64| c >= self.z_min - tol && c <= self.z_max + tol;
        inside(x) && inside(y)
    }

    /// Indices of nodes lying in `[lo, hi]^2`, plus the per-axis count.
    pub fn window(&self, lo: f64, hi: f64) -> (Vec<usize>, usize) {
        let tol = 1e-9 * self.spacing;
        let axis: Vec<usize> = (0..self.n_points)
            .filter(|&i| {
                let c = self.coord(i);
                c >= lo - tol && c <= hi + tol
            })
            .collect();
        let mut nodes = Vec::with_capacity(axis.len() * axis.len());
        for &iy in &axis {
            for &ix in &axis {
                nodes.push(self.index(ix, iy));
            }
        }
        (nodes, axis.len())
    }
}

impl Default for GridSpec {
    /// 101 points over `[-2, 3]^2` (h = 0.05).
    fn default() -> Self {
        Self::new(-2.0, 3.0, 101).expect("default grid is valid")
    }
}

/// Concentration field at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub time: f64,
}

impl StateField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.node_count()],
            time: 0.0,
        }
    }

    pub fn new(grid: GridSpec, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::DimensionMismatch {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values, time })
    }

    /// Trapezoid-weighted spatial mean (edge nodes ½, corners ¼). This is the
    /// discrete mean preserved by the reflected diffusion stencil.
    pub fn spatial_mean(&self) -> f64 {
        let n = self.grid.n_points;
        let w = |i: usize| if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        let mut total = 0.0;
        let mut weight = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let c = w(ix) * w(iy);
                total += c * self.values[iy * n + ix];
                weight += c;
            }
        }
        total / weight
    }
}

/// Spatially uniform velocity `v(t) = offset + rate · t` (per component).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityModel {
    pub rate: [f64; 2],
    pub offset: [f64; 2],
}

impl VelocityModel {
    /// `v_x = v_y = coefficient · t`.
    pub fn linear(coefficient: f64) -> Self {
        Self {
            rate: [coefficient, coefficient],
            offset: [0.0, 0.0],
        }
    }

    pub fn constant(vx: f64, vy: f64) -> Self {
        Self {
            rate: [0.0, 0.0],
            offset: [vx, vy],
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0, 0.0)
    }

    #[inline]
    pub fn at(&self, t: f64) -> [f64; 2] {
        [
            self.offset[0] + self.rate[0] * t,
            self.offset[1] + self.rate[1] * t,
        ]
    }
}

/// A source field sampled at every grid node. Construction rejects
/// non-finite samples, so every `SourceField` is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl SourceField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::DimensionMismatch {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        let n = grid.n_points();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSource {
                ix: k % n,
                iy: k / n,
                value: values[k],
            });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f(x, y)` at every node.
    pub fn sample(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.node_count())
            .map(|k| {
                let (x, y) = grid.node_position(k);
                f(x, y)
            })
            .collect();
        Self::from_values(grid, values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Substep control for the explicit integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub stability_factor: f64,
    pub cfl_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            stability_factor: 0.9,
            cfl_factor: 0.5,
        }
    }
}

impl SolverConfig {
    /// `min(stability·h²/4, cfl·h/max(|v(t)|, ε))`.
    pub fn substep(&self, grid: &GridSpec, velocity: &VelocityModel, t: f64) -> f64 {
        let h = grid.spacing();
        let v = velocity.at(t);
        let speed = v[0].hypot(v[1]).max(1e-12);
        (self.stability_factor * h * h / 4.0).min(self.cfl_factor * h / speed)
    }
}

fn check_grid(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a != b {
        return Err(Error::InvalidGrid("state and source live on different grids".into()));
    }
    Ok(())
}

/// Writes `∇²u − v·∇u + S` into `out` using the reflected 5-point stencil.
fn rhs_into(grid: &GridSpec, v: [f64; 2], u: &[f64], s: &[f64], out: &mut [f64]) {
    let n = grid.n_points();
    let h = grid.spacing();
    let inv_h2 = 1.0 / (h * h);
    let inv_2h = 1.0 / (2.0 * h);
    for iy in 0..n {
        let south = if iy == 0 { 1 } else { iy - 1 };
        let north = if iy + 1 == n { n - 2 } else { iy + 1 };
        let row = iy * n;
        let row_s = south * n;
        let row_n = north * n;
        for ix in 0..n {
            let west = if ix == 0 { 1 } else { ix - 1 };
            let east = if ix + 1 == n { n - 2 } else { ix + 1 };
            let uc = u[row + ix];
            let uw = u[row + west];
            let ue = u[row + east];
            let us = u[row_s + ix];
            let un = u[row_n + ix];
            let lap = (uw + ue + us + un - 4.0 * uc) * inv_h2;
            let adv = v[0] * (ue - uw) * inv_2h + v[1] * (un - us) * inv_2h;
            out[row + ix] = lap - adv + s[row + ix];
        }
    }
}

/// `∂u/∂t` at every node for the given state, velocity and source at time `t`.
pub fn apply_rhs(
    state: &StateField,
    velocity: &VelocityModel,
    source: &SourceField,
    t: f64,
) -> Result<Vec<f64>> {
    check_grid(&state.grid, &source.grid)?;
    let mut out = vec![0.0; state.grid.node_count()];
    rhs_into(&state.grid, velocity.at(t), &state.values, &source.values, &mut out);
    Ok(out)
}

/// The sequence of forward-Euler substeps between two instants.
///
/// Forward solves and adjoint sweeps share this grid so that the adjoint is
/// the exact transpose of the discrete forward map.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    steps: Vec<f64>,
}

impl TimeGrid {
    pub fn build(
        grid: &GridSpec,
        velocity: &VelocityModel,
        cfg: &SolverConfig,
        t0: f64,
        t1: f64,
    ) -> Result<Self> {
        let mut tg = Self {
            times: vec![t0],
            steps: Vec::new(),
        };
        tg.extend(grid, velocity, cfg, t1)?;
        Ok(tg)
    }

    /// Concatenation of the substep grids of consecutive intervals
    /// `[b0, b1], [b1, b2], ...`; every breakpoint is hit exactly.
    pub fn through(
        grid: &GridSpec,
        velocity: &VelocityModel,
        cfg: &SolverConfig,
        breakpoints: &[f64],
    ) -> Result<Self> {
        let (&first, rest) = breakpoints
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("no breakpoints".into()))?;
        let mut tg = Self {
            times: vec![first],
            steps: Vec::new(),
        };
        for &b in rest {
            tg.extend(grid, velocity, cfg, b)?;
        }
        Ok(tg)
    }

    fn extend(
        &mut self,
        grid: &GridSpec,
        velocity: &VelocityModel,
        cfg: &SolverConfig,
        t1: f64,
    ) -> Result<()> {
        let mut t = *self.times.last().expect("non-empty");
        if !(t1 >= t) || !t1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time interval [{t}, {t1}] is not forward"
            )));
        }
        while t < t1 {
            let remaining = t1 - t;
            let dt = cfg.substep(grid, velocity, t);
            if !(dt > 0.0) {
                return Err(Error::InvalidArgument(format!("non-positive substep {dt}")));
            }
            if dt >= remaining * (1.0 - 1e-10) {
                self.steps.push(remaining);
                t = t1;
            } else {
                self.steps.push(dt);
                t += dt;
            }
            self.times.push(t);
        }
        Ok(())
    }

    /// Number of substeps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("non-empty")
    }

    /// Start time of substep `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// Length of substep `k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.steps[k]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Integrates `state` over every substep of `time_grid`.
pub fn integrate(
    state: &StateField,
    velocity: &VelocityModel,
    source: &SourceField,
    time_grid: &TimeGrid,
) -> Result<StateField> {
    check_grid(&state.grid, &source.grid)?;
    let mut u = state.values.clone();
    let mut rate = vec![0.0; u.len()];
    for k in 0..time_grid.len() {
        let t = time_grid.time(k);
        let dt = time_grid.dt(k);
        rhs_into(&state.grid, velocity.at(t), &u, &source.values, &mut rate);
        for (ui, ri) in u.iter_mut().zip(&rate) {
            *ui += dt * ri;
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Unstable {
                substep: k,
                time: time_grid.time(k + 1),
            });
        }
    }
    Ok(StateField {
        grid: state.grid,
        values: u,
        time: time_grid.end(),
    })
}

/// Advances `state` by `dt_macro` with adaptive forward-Euler substeps.
pub fn step(
    state: &StateField,
    velocity: &VelocityModel,
    source: &SourceField,
    dt_macro: f64,
    cfg: &SolverConfig,
) -> Result<StateField> {
    if !(dt_macro > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dt_macro must be positive, got {dt_macro}"
        )));
    }
    let tg = TimeGrid::build(
        &state.grid,
        velocity,
        cfg,
        state.time,
        state.time + dt_macro,
    )?;
    integrate(state, velocity, source, &tg)
}

/// Runs from `initial` through each of `breakpoints` (which must start at
/// `initial.time`), returning the state at every breakpoint after the first.
pub fn simulate(
    initial: &StateField,
    velocity: &VelocityModel,
    source: &SourceField,
    cfg: &SolverConfig,
    breakpoints: &[f64],
) -> Result<Vec<StateField>> {
    let mut out = Vec::with_capacity(breakpoints.len().saturating_sub(1));
    let mut current = initial.clone();
    for &b in breakpoints.iter().skip(1) {
        let tg = TimeGrid::build(&current.grid, velocity, cfg, current.time, b)?;
        current = integrate(&current, velocity, source, &tg)?;
        out.push(current.clone());
    }
    Ok(out)
}

/// Bilinear interpolation weights of a point observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationStencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

impl ObservationStencil {
    pub fn new(grid: &GridSpec, location: (f64, f64)) -> Result<Self> {
        let (x, y) = location;
        if !grid.contains(x, y) {
            return Err(Error::OutsideDomain {
                x,
                y,
                min: grid.z_min(),
                max: grid.z_max(),
            });
        }
        let n = grid.n_points();
        let locate = |c: f64| {
            let f = ((c - grid.z_min()) / grid.spacing()).clamp(0.0, (n - 1) as f64);
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (ix, tx) = locate(x);
        let (iy, ty) = locate(y);
        Ok(Self {
            nodes: [
                grid.index(ix, iy),
                grid.index(ix + 1, iy),
                grid.index(ix, iy + 1),
                grid.index(ix + 1, iy + 1),
            ],
            weights: [
                (1.0 - tx) * (1.0 - ty),
                tx * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * ty,
            ],
        })
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&k, &w)| w * values[k])
            .sum()
    }
}

/// Bilinear interpolation of `state` at `location`.
pub fn observe(state: &StateField, location: (f64, f64)) -> Result<f64> {
    Ok(ObservationStencil::new(&state.grid, location)?.apply(&state.values))
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.rows) {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.col_idx.len()];
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[k];
                let dst = next[c];
                col_idx[dst] = r;
                values[dst] = self.values[k];
                next[c] += 1;
            }
        }
        Csr {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in m.iter_mut().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                row[self.col_idx[k]] += self.values[k];
            }
        }
        m
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.values[self.row_ptr[r]..self.row_ptr[r + 1]].iter().sum()
    }

    fn scaled_combination(&self, terms: &[(&Csr, f64)]) -> Csr {
        let mut out = self.clone();
        for (m, c) in terms {
            debug_assert_eq!(m.col_idx, self.col_idx);
            for (o, v) in out.values.iter_mut().zip(&m.values) {
                *o += c * v;
            }
        }
        out
    }
}

/// The Jacobian `∂(rhs)/∂u = A − B(t)` of the discretized operator.
///
/// `A` is the reflected 5-point Laplacian; `B(t) = v_x(t)·B_x + v_y(t)·B_y`
/// is central-difference advection. All three matrices share one sparsity
/// pattern (boundary rows fold the ghost node onto its mirror, keeping
/// explicit zeros), so the combination is formed entrywise.
#[derive(Debug, Clone)]
pub struct JacobianOperator {
    grid: GridSpec,
    laplacian: Csr,
    advection_x: Csr,
    advection_y: Csr,
    velocity: [f64; 2],
    time: f64,
    combined: Csr,
    combined_t: Csr,
}

impl JacobianOperator {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.velocity
    }

    /// `A`.
    pub fn laplacian(&self) -> &Csr {
        &self.laplacian
    }

    /// `B(t)`.
    pub fn advection(&self) -> Csr {
        let mut b = self.advection_x.clone();
        for v in b.values.iter_mut() {
            *v *= self.velocity[0];
        }
        b.scaled_combination(&[(&self.advection_y, self.velocity[1])])
    }

    /// `A − B(t)`.
    pub fn matrix(&self) -> &Csr {
        &self.combined
    }

    /// `(A − B(t)) u`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.combined.matvec(u)
    }

    /// `(A − B(t))ᵀ λ`.
    pub fn apply_transpose(&self, lambda: &[f64]) -> Vec<f64> {
        self.combined_t.matvec(lambda)
    }

    pub fn apply_transpose_into(&self, lambda: &[f64], out: &mut [f64]) {
        self.combined_t.matvec_into(lambda, out)
    }

    /// Re-evaluates the operator at a new time without rebuilding the pattern.
    pub fn retime(&mut self, velocity: &VelocityModel, t: f64) {
        let v = velocity.at(t);
        self.velocity = v;
        self.time = t;
        for (k, out) in self.combined.values.iter_mut().enumerate() {
            *out = self.laplacian.values[k]
                - v[0] * self.advection_x.values[k]
                - v[1] * self.advection_y.values[k];
        }
        // The transposed pattern is a permutation of the same entries.
        let tvals = &mut self.combined_t.values;
        let lap = &self.laplacian;
        let bx = &self.advection_x;
        let by = &self.advection_y;
        let mut next: Vec<usize> = self.combined_t.row_ptr.clone();
        for r in 0..lap.rows {
            for k in lap.row_ptr[r]..lap.row_ptr[r + 1] {
                let c = lap.col_idx[k];
                tvals[next[c]] = lap.values[k] - v[0] * bx.values[k] - v[1] * by.values[k];
                next[c] += 1;
            }
        }
    }
}

/// Builds `A − B(t)` for `grid` at time `t`.
pub fn assemble_jacobian(grid: &GridSpec, velocity: &VelocityModel, t: f64) -> JacobianOperator {
    let n = grid.n_points();
    let h = grid.spacing();
    let inv_h2 = 1.0 / (h * h);
    let inv_2h = 1.0 / (2.0 * h);
    let size = grid.node_count();

    let mut row_ptr = Vec::with_capacity(size + 1);
    let mut col_idx = Vec::with_capacity(5 * size);
    let mut a_vals = Vec::with_capacity(5 * size);
    let mut bx_vals = Vec::with_capacity(5 * size);
    let mut by_vals = Vec::with_capacity(5 * size);
    row_ptr.push(0);

    for iy in 0..n {
        let south = if iy == 0 { 1 } else { iy - 1 };
        let north = if iy + 1 == n { n - 2 } else { iy + 1 };
        for ix in 0..n {
            let west = if ix == 0 { 1 } else { ix - 1 };
            let east = if ix + 1 == n { n - 2 } else { ix + 1 };
            // (column, A, B_x, B_y) before merging mirrored ghost entries
            let mut entries = [
                (grid.index(ix, iy), -4.0 * inv_h2, 0.0, 0.0),
                (grid.index(west, iy), inv_h2, -inv_2h, 0.0),
                (grid.index(east, iy), inv_h2, inv_2h, 0.0),
                (grid.index(ix, south), inv_h2, 0.0, -inv_2h),
                (grid.index(ix, north), inv_h2, 0.0, inv_2h),
            ];
            entries.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, a, bx, by) in entries {
                if last == Some(c) {
                    *a_vals.last_mut().unwrap() += a;
                    *bx_vals.last_mut().unwrap() += bx;
                    *by_vals.last_mut().unwrap() += by;
                } else {
                    col_idx.push(c);
                    a_vals.push(a);
                    bx_vals.push(bx);
                    by_vals.push(by);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
    }

    let make = |values: Vec<f64>| Csr {
        rows: size,
        cols: size,
        row_ptr: row_ptr.clone(),
        col_idx: col_idx.clone(),
        values,
    };
    let laplacian = make(a_vals);
    let advection_x = make(bx_vals);
    let advection_y = make(by_vals);
    let combined = laplacian.clone();
    let combined_t = combined.transpose();
    let mut op = JacobianOperator {
        grid: *grid,
        laplacian,
        advection_x,
        advection_y,
        velocity: [0.0, 0.0],
        time: t,
        combined,
        combined_t,
    };
    op.retime(velocity, t);
    op
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..grid.node_count()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_field_is_steady() {
        let grid = GridSpec::new(0.0, 1.0, 9).unwrap();
        let state = StateField::new(grid, vec![3.5; 81], 0.0).unwrap();
        let rate = apply_rhs(
            &state,
            &VelocityModel::linear(20.0),
            &SourceField::zeros(grid),
            0.3,
        )
        .unwrap();
        assert!(rate.iter().all(|r| r.abs() < 1e-9));
    }

    #[test]
    fn center_row_of_three_by_three_laplacian() {
        let grid = GridSpec::new(0.0, 1.0, 3).unwrap();
        let op = assemble_jacobian(&grid, &VelocityModel::zero(), 0.0);
        let h2 = grid.spacing() * grid.spacing();
        let dense = op.laplacian().to_dense();
        let center = &dense[4];
        let expected = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        for (got, want) in center.iter().zip(expected) {
            assert!((got * h2 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_velocity_gives_zero_advection() {
        let grid = GridSpec::new(-1.0, 1.0, 6).unwrap();
        let op = assemble_jacobian(&grid, &VelocityModel::zero(), 1.0);
        assert!(op.advection().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn observe_on_node_and_cell_center() {
        let grid = GridSpec::new(0.0, 1.0, 3).unwrap();
        let mut values = vec![0.0; 9];
        values[grid.index(1, 1)] = 4.0;
        values[grid.index(2, 2)] = 7.0;
        let state = StateField::new(grid, values, 0.0).unwrap();
        assert_eq!(observe(&state, (0.5, 0.5)).unwrap(), 4.0);
        assert_eq!(observe(&state, (1.0, 1.0)).unwrap(), 7.0);
        // cell [0,0.5]^2 has nodes {0,0,0,4}
        assert!((observe(&state, (0.25, 0.25)).unwrap() - 1.0).abs() < 1e-15);
        let flat = StateField::new(grid, vec![2.0; 9], 0.0).unwrap();
        assert!((observe(&flat, (0.75, 0.25)).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            observe(&state, (1.2, 0.5)),
            Err(Error::OutsideDomain { .. })
        ));
    }

    #[test]
    fn single_substep_is_forward_euler() {
        let grid = GridSpec::new(0.0, 1.0, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = StateField::new(grid, random_field(&grid, &mut rng), 0.1).unwrap();
        let source = SourceField::from_values(grid, random_field(&grid, &mut rng)).unwrap();
        let velocity = VelocityModel::linear(5.0);
        let cfg = SolverConfig::default();
        let dt = cfg.substep(&grid, &velocity, 0.1);
        let next = step(&state, &velocity, &source, dt, &cfg).unwrap();
        // the grid stores times, so the step it takes is (0.1 + dt) - 0.1
        let dt = (0.1 + dt) - 0.1;
        let rate = apply_rhs(&state, &velocity, &source, 0.1).unwrap();
        for k in 0..grid.node_count() {
            assert_eq!(next.values[k], state.values[k] + dt * rate[k]);
        }
        assert_eq!(next.time, 0.1 + dt);
    }

    #[test]
    fn zero_problem_stays_zero() {
        let grid = GridSpec::new(0.0, 1.0, 11).unwrap();
        let out = step(
            &StateField::zeros(grid),
            &VelocityModel::linear(20.0),
            &SourceField::zeros(grid),
            0.2,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        assert!((out.time - 0.2).abs() < 1e-15);
    }

    #[test]
    fn time_grid_lands_on_breakpoints() {
        let grid = GridSpec::default();
        let v = VelocityModel::linear(50.0);
        let tg = TimeGrid::through(
            &grid,
            &v,
            &SolverConfig::default(),
            &[0.0, 0.05, 0.1, 0.15],
        )
        .unwrap();
        assert_eq!(tg.end(), 0.15);
        assert!(tg.times().contains(&0.05));
        assert!(tg.times().contains(&0.1));
        assert!(tg.times().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn non_finite_source_names_node() {
        let grid = GridSpec::new(0.0, 1.0, 4).unwrap();
        let err = SourceField::sample(grid, |x, y| {
            if x > 0.5 && y < 0.1 {
                f64::NAN
            } else {
                0.0
            }
        })
        .unwrap_err();
        match err {
            Error::NonFiniteSource { ix, iy, .. } => assert_eq!((ix, iy), (2, 0)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn huge_step_factors_are_reported_as_unstable() {
        let grid = GridSpec::new(0.0, 1.0, 11).unwrap();
        let mut state = StateField::zeros(grid);
        state.values[60] = 1.0;
        let cfg = SolverConfig {
            stability_factor: 40.0,
            cfl_factor: 40.0,
        };
        let err = step(
            &state,
            &VelocityModel::zero(),
            &SourceField::zeros(grid),
            50.0,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }

    #[test]
    fn csr_transpose_roundtrip() {
        let grid = GridSpec::new(0.0, 1.0, 5).unwrap();
        let op = assemble_jacobian(&grid, &VelocityModel::constant(2.0, -1.0), 0.0);
        let m = op.matrix();
        assert_eq!(&m.transpose().transpose(), m);
        let d = m.to_dense();
        let dt = op.combined_t.to_dense();
        for i in 0..25 {
            for j in 0..25 {
                assert_eq!(d[i][j], dt[j][i]);
            }
        }
    }
}
