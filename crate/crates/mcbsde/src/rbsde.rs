//! Reflected BSDE solver.
//!
//! The solution `(V, Z, K)` keeps `V` above an obstacle `G` through a
//! continuous increasing push `K` that acts only on the contact set
//! (`int (V - G) dK = 0`). The primary construction is the penalization
//! ladder: solve the plain BSDE with driver `f + n (v - G)^-` for
//! `n = 1, 2, 4, ...`, refining the grid so `n * dt` stays bounded, until
//! successive levels agree in sup norm. Levels increase monotonically in `n`,
//! and the push is recovered from the penalty intensity
//! `k_i(t) = n (u^n_i(t) - G(t,i))^-`, so the pathwise
//! `K_t = int_0^t k_{X_s}(s) ds` is continuous and increasing by
//! construction.
//!
//! A first-order project-after-step scheme ([`solve_rbsde_projected`]) serves
//! as an independent cross-check of the ladder.

use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::bsde::{
    solve_bsde_on_grid, sweep_backward, Driver, Forcing, TerminalCondition, ValueGrid,
};
use crate::chain::{ChainModel, ChainPath};
use crate::error::{Error, Result};
use crate::montecarlo::{compensated_sum, substream_rng};

/// Lower obstacle `G(t, state)`, bounded on `[0, T] x states`.
#[derive(Clone)]
enum ObstacleKind {
    /// `G = level` everywhere.
    Constant(f64),
    /// `G_i(t) = levels_i + slope * (T - t)`.
    Ramp {
        levels: DVector<f64>,
        slope: f64,
        horizon: f64,
    },
    Custom(Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>),
    Shifted(Arc<Obstacle>, Forcing),
    Scaled(Arc<Obstacle>, f64),
}

#[derive(Clone)]
pub struct Obstacle {
    kind: ObstacleKind,
}

impl fmt::Debug for Obstacle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ObstacleKind::Constant(l) => write!(f, "Obstacle::constant({l})"),
            ObstacleKind::Ramp { levels, slope, .. } => {
                write!(f, "Obstacle::ramp({levels:?}, slope={slope})")
            }
            ObstacleKind::Custom(_) => write!(f, "Obstacle::custom"),
            ObstacleKind::Shifted(base, bump) => write!(f, "{base:?} + {bump:?}"),
            ObstacleKind::Scaled(base, s) => write!(f, "{s} * {base:?}"),
        }
    }
}

impl Obstacle {
    pub fn constant(level: f64) -> Self {
        Obstacle {
            kind: ObstacleKind::Constant(level),
        }
    }

    /// A constant far below any desk-scale solution; the reflection never
    /// activates and the reflected solve degenerates to the plain BSDE.
    pub fn inactive() -> Self {
        Obstacle::constant(-1.0e6)
    }

    /// `G_i(t) = levels_i + slope * (T - t)`: equals `levels` at the horizon
    /// and rises (for positive slope) walking back in time.
    pub fn ramp(levels: DVector<f64>, slope: f64, horizon: f64) -> Self {
        Obstacle {
            kind: ObstacleKind::Ramp {
                levels,
                slope,
                horizon,
            },
        }
    }

    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(f64, usize) -> f64 + Send + Sync + 'static,
    {
        Obstacle {
            kind: ObstacleKind::Custom(Arc::new(f)),
        }
    }

    /// `G + bump_i(t)`.
    pub fn shifted(&self, bump: Forcing) -> Self {
        Obstacle {
            kind: ObstacleKind::Shifted(Arc::new(self.clone()), bump),
        }
    }

    /// `factor * G`.
    pub fn scaled(&self, factor: f64) -> Self {
        Obstacle {
            kind: ObstacleKind::Scaled(Arc::new(self.clone()), factor),
        }
    }

    pub fn eval(&self, t: f64, state: usize) -> f64 {
        match &self.kind {
            ObstacleKind::Constant(l) => *l,
            ObstacleKind::Ramp {
                levels,
                slope,
                horizon,
            } => levels[state] + slope * (horizon - t),
            ObstacleKind::Custom(f) => f(t, state),
            ObstacleKind::Shifted(base, bump) => base.eval(t, state) + bump.eval(t, state),
            ObstacleKind::Scaled(base, s) => s * base.eval(t, state),
        }
    }

    /// No solution stays above an obstacle that exceeds the terminal value.
    pub fn check_compatible(&self, xi: &TerminalCondition, horizon: f64) -> Result<()> {
        for (i, &x) in xi.values().iter().enumerate() {
            let g = self.eval(horizon, i);
            if g > x {
                return Err(Error::IncompatibleObstacle {
                    state: i,
                    obstacle: g,
                    terminal: x,
                });
            }
        }
        Ok(())
    }
}

/// One penalization level: `n`, its grid size and the gap to the previous
/// level.
///
/// Gaps are measured with both levels discretized on the current grid (the
/// previous level is re-solved there when the ladder refines), so they track
/// the penalization progress itself rather than discretization differences.
#[derive(Debug, Clone, Copy)]
pub struct LadderLevel {
    pub n: u64,
    pub steps: usize,
    /// Sup-norm difference to the previous level (infinite for the first).
    pub sup_gap: f64,
    /// Smallest signed increase over the previous level; the penalized
    /// values are nondecreasing in `n`, so this stays above roundoff.
    pub min_gap: f64,
    pub wall_secs: f64,
}

/// Reflected solution: values, the push intensity `k_i(t) >= 0` with
/// `K_t = int_0^t k_{X_s}(s) ds`, and the ladder trace that produced it.
#[derive(Debug, Clone)]
pub struct RbsdeSolution {
    values: ValueGrid,
    k_intensity: DMatrix<f64>,
    n_final: u64,
    ladder: Vec<LadderLevel>,
}

impl RbsdeSolution {
    pub fn values(&self) -> &ValueGrid {
        &self.values
    }

    pub fn k_intensity(&self) -> &DMatrix<f64> {
        &self.k_intensity
    }

    /// Penalization level the ladder stopped at (`0` for the projection
    /// scheme, which has no ladder).
    pub fn n_final(&self) -> u64 {
        self.n_final
    }

    pub fn ladder(&self) -> &[LadderLevel] {
        &self.ladder
    }

    /// Sup-differences between successive ladder levels.
    pub fn ladder_gaps(&self) -> Vec<f64> {
        self.ladder.iter().skip(1).map(|l| l.sup_gap).collect()
    }

    /// One line per ladder level: n, grid cells, sup-gap, wall time.
    pub fn ladder_report(&self) -> String {
        let mut out = String::new();
        for level in &self.ladder {
            let gap = if level.sup_gap.is_finite() {
                format!("{:.3e}", level.sup_gap)
            } else {
                "-".to_string()
            };
            out.push_str(&format!(
                "n={:<6} steps={:<7} sup_gap={:<10} wall={:.3}s\n",
                level.n, level.steps, gap, level.wall_secs
            ));
        }
        out
    }

    /// Per-state cumulative push `C_i(t_k) = int_0^{t_k} k_i(s) ds`
    /// (trapezoid, exact for the piecewise-linear intensity).
    pub fn cumulative_k(&self) -> DMatrix<f64> {
        let times = self.values.times();
        let n = self.values.n_states();
        let mut out = DMatrix::zeros(times.len(), n);
        for k in 1..times.len() {
            let dt = times[k] - times[k - 1];
            for i in 0..n {
                out[(k, i)] = out[(k - 1, i)]
                    + 0.5 * dt * (self.k_intensity[(k - 1, i)] + self.k_intensity[(k, i)]);
            }
        }
        out
    }

    /// CSV export: `t,V_1..V_N,k_1..k_N`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let n = self.values.n_states();
        write!(w, "t")?;
        for i in 1..=n {
            write!(w, ",V_{i}")?;
        }
        for i in 1..=n {
            write!(w, ",k_{i}")?;
        }
        writeln!(w)?;
        for (k, &t) in self.values.times().iter().enumerate() {
            write!(w, "{t}")?;
            for i in 0..n {
                write!(w, ",{}", self.values.value(k, i))?;
            }
            for i in 0..n {
                write!(w, ",{}", self.k_intensity[(k, i)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// One penalized BSDE level together with its penalty intensity.
#[derive(Debug, Clone)]
pub struct PenalizedSolution {
    pub values: ValueGrid,
    /// `n (u^n_i(t) - G(t,i))^-`, nonnegative.
    pub k_intensity: DMatrix<f64>,
}

/// Solves the BSDE with the penalized driver `f + n (v - G)^-`. With `n = 0`
/// this is exactly the plain BSDE solve.
pub fn solve_penalized(
    model: &ChainModel,
    driver: &Driver,
    obstacle: &Obstacle,
    xi: &TerminalCondition,
    n: u64,
    steps: usize,
) -> Result<PenalizedSolution> {
    obstacle.check_compatible(xi, model.horizon())?;
    let grid = model.build_grid(steps.max(1));
    solve_penalized_on_grid(model, driver, obstacle, xi, n, &grid)
}

fn solve_penalized_on_grid(
    model: &ChainModel,
    driver: &Driver,
    obstacle: &Obstacle,
    xi: &TerminalCondition,
    n: u64,
    grid: &[f64],
) -> Result<PenalizedSolution> {
    let pen = n as f64;
    let values = if n == 0 {
        solve_bsde_on_grid(model, driver, xi, grid)?
    } else {
        let rhs = |rate_time: f64, t: f64, u: &DVector<f64>| {
            let a = model.rates_at(rate_time);
            let mut out = a.tr_mul(u);
            for i in 0..model.n() {
                let f = driver.eval_at(model, rate_time, t, u[i], u, i)
                    + pen * (obstacle.eval(t, i) - u[i]).max(0.0);
                out[i] = -f - out[i];
            }
            out
        };
        sweep_backward(model, grid, xi, rhs)?
    };
    let k_intensity = penalty_intensity(&values, obstacle, pen);
    Ok(PenalizedSolution {
        values,
        k_intensity,
    })
}

fn penalty_intensity(values: &ValueGrid, obstacle: &Obstacle, pen: f64) -> DMatrix<f64> {
    let times = values.times();
    let n_states = values.n_states();
    DMatrix::from_fn(times.len(), n_states, |k, i| {
        pen * (obstacle.eval(times[k], i) - values.value(k, i)).max(0.0)
    })
}

/// How the penalization ladder runs.
#[derive(Debug, Clone, Copy)]
pub struct LadderPolicy {
    /// Levels are `n = 1, 2, ..., 2^max_level`.
    pub max_level: u32,
    /// Stop once successive levels differ by less than this in sup norm;
    /// `None` runs the full ladder (useful when two instances must share a
    /// grid and level).
    pub tol: Option<f64>,
    /// Grid refinement keeps `n * dt` at or below this.
    pub max_rate_per_step: f64,
}

impl Default for LadderPolicy {
    fn default() -> Self {
        LadderPolicy {
            max_level: 12,
            tol: Some(1e-3),
            max_rate_per_step: 1.0,
        }
    }
}

impl LadderPolicy {
    pub fn fixed(max_level: u32) -> Self {
        LadderPolicy {
            max_level,
            tol: None,
            ..LadderPolicy::default()
        }
    }
}

/// Penalization ladder `n = 1, 2, 4, ...` with grid refinement keeping
/// `n * dt <= 1`, stopping once successive levels differ by less than `tol`
/// in sup norm over the shared nodes. Power-of-two refinements keep the
/// coarser nodes bit-exact inside the finer grid, so levels are compared
/// without interpolation.
pub fn solve_rbsde(
    model: &ChainModel,
    driver: &Driver,
    obstacle: &Obstacle,
    xi: &TerminalCondition,
    steps: usize,
    tol: f64,
) -> Result<RbsdeSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    solve_rbsde_with(
        model,
        driver,
        obstacle,
        xi,
        steps,
        LadderPolicy {
            tol: Some(tol),
            ..LadderPolicy::default()
        },
    )
}

pub fn solve_rbsde_with(
    model: &ChainModel,
    driver: &Driver,
    obstacle: &Obstacle,
    xi: &TerminalCondition,
    steps: usize,
    policy: LadderPolicy,
) -> Result<RbsdeSolution> {
    obstacle.check_compatible(xi, model.horizon())?;
    let base_counts = model.segment_cell_counts(steps);
    let dt_base_max = max_cell_length(model, &base_counts, 1);
    let mut prev: Option<(PenalizedSolution, usize, u64)> = None;
    let mut ladder: Vec<LadderLevel> = Vec::new();
    for level in 0..=policy.max_level {
        let n = 1u64 << level;
        let scale = refinement_scale(n, dt_base_max, policy.max_rate_per_step);
        let counts: Vec<usize> = base_counts.iter().map(|c| c * scale).collect();
        let grid = model.grid_from_counts(&counts);
        let t0 = Instant::now();
        let sol = solve_penalized_on_grid(model, driver, obstacle, xi, n, &grid)?;
        let (sup_gap, min_gap) = match &prev {
            None => (f64::INFINITY, 0.0),
            Some((prev_sol, prev_scale, prev_n)) => {
                if scale == *prev_scale {
                    grid_gaps(&prev_sol.values, &sol.values)
                } else {
                    // the grid refined: re-solve the previous level here so
                    // the gap compares identical discretizations
                    let prev_on_fine =
                        solve_penalized_on_grid(model, driver, obstacle, xi, *prev_n, &grid)?;
                    grid_gaps(&prev_on_fine.values, &sol.values)
                }
            }
        };
        let wall = t0.elapsed().as_secs_f64();
        ladder.push(LadderLevel {
            n,
            steps: counts.iter().sum(),
            sup_gap,
            min_gap,
            wall_secs: wall,
        });
        let converged = matches!(policy.tol, Some(tol) if sup_gap < tol);
        if converged || level == policy.max_level {
            if !converged && policy.tol.is_some() {
                return Err(Error::NoConvergence { last_gap: sup_gap });
            }
            return Ok(RbsdeSolution {
                values: sol.values,
                k_intensity: sol.k_intensity,
                n_final: n,
                ladder,
            });
        }
        prev = Some((sol, scale, n));
    }
    unreachable!("ladder loop returns on the last level");
}

fn max_cell_length(model: &ChainModel, counts: &[usize], scale: usize) -> f64 {
    let grid = model.grid_from_counts(
        &counts
            .iter()
            .map(|c| c * scale)
            .collect::<Vec<_>>(),
    );
    grid.windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0_f64, f64::max)
}

/// Smallest power-of-two grid refinement keeping `n * dt <= cap`.
fn refinement_scale(n: u64, dt_base_max: f64, cap: f64) -> usize {
    let needed = n as f64 * dt_base_max / cap;
    let mut scale = 1usize;
    while (scale as f64) < needed {
        scale *= 2;
    }
    scale
}

/// Elementwise gaps of `next - prev` for two solutions on one grid.
fn grid_gaps(prev: &ValueGrid, next: &ValueGrid) -> (f64, f64) {
    debug_assert!(prev.same_grid(next));
    let mut sup = 0.0_f64;
    let mut min = f64::INFINITY;
    for (p, n) in prev.values().iter().zip(next.values().iter()) {
        let d = n - p;
        sup = sup.max(d.abs());
        min = min.min(d);
    }
    (sup, min)
}

/// Independent first-order oracle: explicit Euler step backward, then
/// project each state onto the obstacle; the push intensity is the
/// projection amount per unit time.
pub fn solve_rbsde_projected(
    model: &ChainModel,
    driver: &Driver,
    obstacle: &Obstacle,
    xi: &TerminalCondition,
    steps: usize,
) -> Result<RbsdeSolution> {
    obstacle.check_compatible(xi, model.horizon())?;
    if xi.len() != model.n() {
        return Err(Error::InvalidArgument(
            "terminal condition length must equal the state count".into(),
        ));
    }
    let grid = model.build_grid(steps.max(1));
    let nodes = grid.len();
    let n_states = model.n();
    let mut values = DMatrix::zeros(nodes, n_states);
    let mut k_intensity = DMatrix::zeros(nodes, n_states);
    let mut u = xi.values().clone();
    values.row_mut(nodes - 1).copy_from(&u.transpose());
    for k in (0..nodes - 1).rev() {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let h = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        let a = model.rates_at(tm);
        let au = a.tr_mul(&u);
        for i in 0..n_states {
            let step = u[i] + h * (driver.eval_at(model, tm, t1, u[i], &u, i) + au[i]);
            let floor = obstacle.eval(t0, i);
            if step >= floor {
                u[i] = step;
            } else {
                u[i] = floor;
                k_intensity[(k, i)] = (floor - step) / h;
            }
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        values.row_mut(k).copy_from(&u.transpose());
    }
    Ok(RbsdeSolution {
        values: ValueGrid::from_parts(grid, values),
        k_intensity,
        n_final: 0,
        ladder: Vec::new(),
    })
}

/// Discrete Skorokhod residual: the largest over states of
/// `sum_cells |V - G| k dt`, a quadrature of `int (V - G) dK`. Near zero for
/// valid solutions (the push acts only where `V` touches `G`).
pub fn skorokhod_residual(sol: &RbsdeSolution, obstacle: &Obstacle) -> f64 {
    let times = sol.values().times();
    let mut worst = 0.0_f64;
    for i in 0..sol.values().n_states() {
        let mut acc = 0.0;
        for k in 0..times.len() - 1 {
            let dt = times[k + 1] - times[k];
            let slack = (sol.values().value(k, i) - obstacle.eval(times[k], i)).abs();
            acc += slack * sol.k_intensity()[(k, i)] * dt;
        }
        worst = worst.max(acc);
    }
    worst
}

fn jump_pieces(path: &ChainPath, t0: f64, t1: f64) -> Vec<(f64, f64, usize)> {
    let mut cuts = vec![t0];
    for &(tj, _) in path.jumps() {
        if tj > t0 && tj < t1 {
            cuts.push(tj);
        }
    }
    cuts.push(t1);
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1], path.state_at(w[0])))
        .collect()
}

/// Pathwise push `K_t = int_0^t k_{X_s}(s) ds` sampled at the grid nodes.
///
/// The intensity is interpolated linearly in time per state and integrated
/// exactly on the piecewise-constant path, so `K` is continuous,
/// nondecreasing and starts at zero.
pub fn k_on_path(sol: &RbsdeSolution, path: &ChainPath) -> Result<Vec<f64>> {
    let times = sol.values().times();
    if path.horizon() != times[times.len() - 1] {
        return Err(Error::InvalidArgument(
            "path and solution horizons differ".into(),
        ));
    }
    let k = sol.k_intensity();
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for idx in 0..times.len() - 1 {
        let (t0, t1) = (times[idx], times[idx + 1]);
        let dt = t1 - t0;
        for (a, b, st) in jump_pieces(path, t0, t1) {
            let ka = lerp(k[(idx, st)], k[(idx + 1, st)], (a - t0) / dt);
            let kb = lerp(k[(idx, st)], k[(idx + 1, st)], (b - t0) / dt);
            acc += 0.5 * (b - a) * (ka + kb);
        }
        out.push(acc);
    }
    Ok(out)
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

/// Node-wise comparison gaps between two reflected solutions on one grid.
#[derive(Debug, Clone, Copy)]
pub struct ComparisonGaps {
    /// `min (V - Y)` over nodes and states, where `Y` comes from the smaller
    /// data and `V` from the larger.
    pub min_value_gap: f64,
    /// `min (K - J)` of the per-state cumulative pushes: the smaller data
    /// needs at least as much pushing.
    pub min_k_gap: f64,
}

/// Compares a solution driven by smaller data `(f, xi_1)` against one driven
/// by larger data `(g >= f, xi_2 >= xi_1)` on the same obstacle and grid.
/// Both gaps are nonnegative (up to roundoff) when the hypotheses hold.
pub fn compare_rbsde(smaller: &RbsdeSolution, larger: &RbsdeSolution) -> Result<ComparisonGaps> {
    if !smaller.values().same_grid(larger.values())
        || smaller.values().n_states() != larger.values().n_states()
    {
        return Err(Error::GridMismatch);
    }
    let mut min_value_gap = f64::INFINITY;
    for (v, y) in larger
        .values()
        .values()
        .iter()
        .zip(smaller.values().values().iter())
    {
        min_value_gap = min_value_gap.min(v - y);
    }
    let ck = smaller.cumulative_k();
    let cj = larger.cumulative_k();
    let mut min_k_gap = f64::INFINITY;
    for (k, j) in ck.iter().zip(cj.iter()) {
        min_k_gap = min_k_gap.min(k - j);
    }
    Ok(ComparisonGaps {
        min_value_gap,
        min_k_gap,
    })
}

/// One reflected problem: a driver (forcing included), an obstacle and a
/// terminal condition on a shared model.
#[derive(Debug, Clone)]
pub struct RbsdeInstance {
    pub driver: Driver,
    pub obstacle: Obstacle,
    pub xi: TerminalCondition,
}

/// Both sides of the continuous-dependence bound for two instances sharing
/// the driver and differing in `(xi, phi, G)`.
#[derive(Debug, Clone, Copy)]
pub struct DependenceGap {
    /// `sup_t E|v_t|^2` with `v = V1 - V2`, from the exact forward law.
    pub sup_e_v_sq: f64,
    /// `E int ||z||^2 dt` with `z = Z1 - Z2`, from the exact forward law.
    pub int_e_z_sq: f64,
    /// `sup_t E|k_T - k_t|^2` with `k = K1 - K2`, Monte Carlo.
    pub sup_e_dk_sq: f64,
    /// `E[sup_t |v_t + k_t|^2]`, the sup-pathwise form, Monte Carlo.
    pub sup_pathwise_vk_sq: f64,
    /// `E|xi_1 - xi_2|^2` under the terminal law.
    pub rhs_xi_sq: f64,
    /// `E[(int |phi_1 - phi_2| dt)^2]`.
    pub rhs_phi_sq: f64,
    /// `E[sup_t |G_1 - G_2|^2]` sampled on the grid.
    pub rhs_g_sq: f64,
}

impl DependenceGap {
    pub fn lhs(&self) -> f64 {
        self.sup_e_v_sq + self.int_e_z_sq + self.sup_e_dk_sq
    }

    pub fn rhs(&self) -> f64 {
        self.rhs_xi_sq + self.rhs_phi_sq + self.rhs_g_sq
    }

    pub fn ratio(&self) -> f64 {
        let (lhs, rhs) = (self.lhs(), self.rhs());
        if rhs == 0.0 {
            if lhs == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            lhs / rhs
        }
    }
}

/// Solves two instances that share the driver `f` and differ only in
/// `(xi, phi, G)`, and returns both sides of the dependence bound.
///
/// Runs the full fixed ladder from `policy` so both solutions land on the
/// same grid and penalization level; `E|v|^2` and `E int ||z||^2` use the
/// exact forward law from `x0`, the push and sup-pathwise terms use seeded
/// Monte Carlo.
pub fn continuous_dependence_gap(
    model: &ChainModel,
    a: &RbsdeInstance,
    b: &RbsdeInstance,
    steps: usize,
    policy: LadderPolicy,
    x0: usize,
    n_paths: usize,
    seed: u64,
) -> Result<DependenceGap> {
    if !a.driver.same_family(&b.driver) {
        return Err(Error::InstanceMismatch);
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let fixed = LadderPolicy {
        tol: None,
        ..policy
    };
    let sol_a = solve_rbsde_with(model, &a.driver, &a.obstacle, &a.xi, steps, fixed)?;
    let sol_b = solve_rbsde_with(model, &b.driver, &b.obstacle, &b.xi, steps, fixed)?;
    debug_assert!(sol_a.values().same_grid(sol_b.values()));

    let times = sol_a.values().times().to_vec();
    let nodes = times.len();
    let n_states = model.n();
    let law = model.forward_law(&crate::chain::unit_vector(n_states, x0), &times)?;

    // exact-law terms
    let mut sup_e_v_sq = 0.0_f64;
    let mut e_z_sq = vec![0.0_f64; nodes];
    for k in 0..nodes {
        let z: DVector<f64> = sol_a.values().node_values(k) - sol_b.values().node_values(k);
        let mut ev = 0.0;
        let mut ez = 0.0;
        for i in 0..n_states {
            let vi = sol_a.values().value(k, i) - sol_b.values().value(k, i);
            ev += law[k][i] * vi * vi;
            ez += law[k][i] * model.seminorm_sq(times[k], i, &z);
        }
        sup_e_v_sq = sup_e_v_sq.max(ev);
        e_z_sq[k] = ez;
    }
    let mut int_e_z_sq = 0.0;
    for k in 0..nodes - 1 {
        int_e_z_sq += 0.5 * (times[k + 1] - times[k]) * (e_z_sq[k] + e_z_sq[k + 1]);
    }
    let zero = Forcing::uniform(n_states, 0.0);
    let phi_a = a.driver.forcing().cloned().unwrap_or_else(|| zero.clone());
    let phi_b = b.driver.forcing().cloned().unwrap_or(zero);
    let dphi = phi_a.plus(&phi_b.scaled(-1.0));
    let dxi: DVector<f64> = a.xi.values() - b.xi.values();
    let rhs_xi_sq: f64 = (0..n_states)
        .map(|i| law[nodes - 1][i] * dxi[i] * dxi[i])
        .sum();

    // path terms
    let mut dk_sq_mean = vec![0.0_f64; nodes];
    let mut sup_vk = Vec::with_capacity(n_paths);
    let mut phi_int_sq = Vec::with_capacity(n_paths);
    let mut sup_g_sq = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let mut rng = substream_rng(seed, p as u64);
        let path = model.simulate_path_with(x0, &mut rng);
        let ka = k_on_path(&sol_a, &path)?;
        let kb = k_on_path(&sol_b, &path)?;
        let dk_total = ka[nodes - 1] - kb[nodes - 1];
        let mut path_sup_vk = 0.0_f64;
        let mut path_sup_g = 0.0_f64;
        for k in 0..nodes {
            let st = path.state_at(times[k]);
            let dk = ka[k] - kb[k];
            let tail = dk_total - dk;
            dk_sq_mean[k] += tail * tail;
            let v = sol_a.values().value(k, st) - sol_b.values().value(k, st);
            path_sup_vk = path_sup_vk.max((v + dk) * (v + dk));
            let dg = a.obstacle.eval(times[k], st) - b.obstacle.eval(times[k], st);
            path_sup_g = path_sup_g.max(dg * dg);
        }
        let mut phi_l1 = 0.0;
        for (s0, s1, st) in model.pieces(&path, 0.0, model.horizon()) {
            phi_l1 += dphi.abs_integral(st, s0, s1);
        }
        sup_vk.push(path_sup_vk);
        phi_int_sq.push(phi_l1 * phi_l1);
        sup_g_sq.push(path_sup_g);
    }
    let inv = 1.0 / n_paths as f64;
    let sup_e_dk_sq = dk_sq_mean
        .iter()
        .map(|s| s * inv)
        .fold(0.0_f64, f64::max);
    Ok(DependenceGap {
        sup_e_v_sq,
        int_e_z_sq,
        sup_e_dk_sq,
        sup_pathwise_vk_sq: compensated_sum(&sup_vk) * inv,
        rhs_xi_sq,
        rhs_phi_sq: compensated_sum(&phi_int_sq) * inv,
        rhs_g_sq: compensated_sum(&sup_g_sq) * inv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use nalgebra::dmatrix;

    fn symmetric_model() -> ChainModel {
        ChainModel::constant(dmatrix![-1.0, 1.0; 1.0, -1.0], 1.0).unwrap()
    }

    fn minus_one_driver(n: usize) -> Driver {
        Driver::linear_with_offset(0.0, 0.0, Forcing::uniform(n, -1.0))
    }

    #[test]
    fn zero_penalty_reproduces_plain_bsde() {
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, -0.5])).unwrap();
        let driver = Driver::linear(0.2, 0.1);
        let plain = solve_bsde(&model, &driver, &xi, 64).unwrap();
        let pen = solve_penalized(&model, &driver, &Obstacle::constant(-2.0), &xi, 0, 64).unwrap();
        assert_eq!(pen.values.values(), plain.values());
        assert_eq!(pen.k_intensity, DMatrix::zeros(65, 2));
    }

    #[test]
    fn far_obstacle_never_activates_the_penalty() {
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let driver = Driver::linear(-0.3, 0.0);
        let plain = solve_bsde(&model, &driver, &xi, 64).unwrap();
        let pen =
            solve_penalized(&model, &driver, &Obstacle::inactive(), &xi, 1 << 10, 64).unwrap();
        assert!(pen.values.sup_distance(&plain).unwrap() < 1e-12);
        assert_eq!(pen.k_intensity.abs().max(), 0.0);

        let refl = solve_rbsde(&model, &driver, &Obstacle::inactive(), &xi, 64, 1e-3).unwrap();
        assert!(refl.values().sup_distance(&plain).unwrap() < 1e-12);
        assert_eq!(refl.k_intensity().abs().max(), 0.0);
    }

    #[test]
    fn stationary_obstacle_pins_value_and_pushes_linearly() {
        let model = symmetric_model();
        let c = 1.0;
        let xi = TerminalCondition::constant(2, c);
        let obstacle = Obstacle::constant(c);
        let sol = solve_rbsde(&model, &minus_one_driver(2), &obstacle, &xi, 256, 1e-3).unwrap();
        for k in 0..sol.values().n_nodes() {
            for i in 0..2 {
                assert!(
                    (sol.values().value(k, i) - c).abs() < 1e-2,
                    "V strayed from the obstacle"
                );
                assert!(sol.k_intensity()[(k, i)] >= 0.0);
            }
        }
        let path = model.simulate_path(0, 13);
        let kk = k_on_path(&sol, &path).unwrap();
        for (idx, &t) in sol.values().times().iter().enumerate() {
            assert!((kk[idx] - t).abs() < 1e-2, "K({t}) = {}", kk[idx]);
        }
    }

    #[test]
    fn projected_scheme_solves_stationary_case_exactly() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let obstacle = Obstacle::constant(1.0);
        let sol =
            solve_rbsde_projected(&model, &minus_one_driver(2), &obstacle, &xi, 512).unwrap();
        for k in 0..sol.values().n_nodes() {
            for i in 0..2 {
                assert_eq!(sol.values().value(k, i), 1.0);
            }
        }
        let path = model.simulate_path(1, 5);
        let kk = k_on_path(&sol, &path).unwrap();
        let times = sol.values().times();
        for (idx, &t) in times.iter().enumerate() {
            assert!((kk[idx] - t).abs() < 5e-3, "K({t}) = {}", kk[idx]);
        }
    }

    #[test]
    fn projected_degenerate_single_state_tracks_the_obstacle() {
        // N = 1, A = 0: the reflected value is the running max of the
        // (constant) unreflected value and the obstacle
        let model = ChainModel::constant(DMatrix::zeros(1, 1), 1.0).unwrap();
        let xi = TerminalCondition::constant(1, -0.5);
        let obstacle = Obstacle::custom(|t, _| 0.5 - t);
        let sol = solve_rbsde_projected(&model, &Driver::zero(), &obstacle, &xi, 1024).unwrap();
        for (k, &t) in sol.values().times().iter().enumerate() {
            let expected = (-0.5_f64).max(0.5 - t);
            assert!(
                (sol.values().value(k, 0) - expected).abs() < 2e-3,
                "V({t}) = {} expected {expected}",
                sol.values().value(k, 0)
            );
        }
    }

    #[test]
    fn penalized_and_projected_solvers_agree() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let obstacle = Obstacle::constant(1.0);
        let driver = minus_one_driver(2);
        let ladder = solve_rbsde(&model, &driver, &obstacle, &xi, 512, 1e-3).unwrap();
        let projected = solve_rbsde_projected(&model, &driver, &obstacle, &xi, 2000).unwrap();
        let mut worst = 0.0_f64;
        for (k, &t) in projected.values().times().iter().enumerate() {
            // compare on the projected grid via the ladder's nearest node
            let lk = ladder
                .values()
                .times()
                .binary_search_by(|x| x.partial_cmp(&t).unwrap())
                .unwrap_or_else(|i| i.min(ladder.values().n_nodes() - 1));
            for i in 0..2 {
                worst = worst.max((projected.values().value(k, i) - ladder.values().value(lk, i)).abs());
            }
        }
        assert!(worst < 5e-2, "solvers diverge: {worst}");
    }

    #[test]
    fn skorokhod_residual_flags_corruption() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let obstacle = Obstacle::constant(1.0);
        let sol =
            solve_rbsde_projected(&model, &minus_one_driver(2), &obstacle, &xi, 512).unwrap();
        // projected solution sits on the obstacle where it pushes
        assert!(skorokhod_residual(&sol, &obstacle) < 1e-10);
        // raising the obstacle after the fact breaks complementarity
        let raised = obstacle.shifted(Forcing::uniform(2, 1.0));
        assert!(skorokhod_residual(&sol, &raised) >= 0.1);
        // no push, no residual
        let free = solve_rbsde(
            &model,
            &Driver::zero(),
            &Obstacle::inactive(),
            &xi,
            64,
            1e-3,
        )
        .unwrap();
        assert_eq!(skorokhod_residual(&free, &Obstacle::inactive()), 0.0);
    }

    #[test]
    fn k_on_path_is_zero_flat_and_monotone() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let free = solve_rbsde(
            &model,
            &Driver::zero(),
            &Obstacle::inactive(),
            &xi,
            32,
            1e-3,
        )
        .unwrap();
        let path = model.simulate_path(0, 2);
        let kk = k_on_path(&free, &path).unwrap();
        assert!(kk.iter().all(|&x| x == 0.0));

        let pushed = solve_rbsde(
            &model,
            &minus_one_driver(2),
            &Obstacle::constant(1.0),
            &xi,
            128,
            1e-3,
        )
        .unwrap();
        let kk = k_on_path(&pushed, &path).unwrap();
        assert_eq!(kk[0], 0.0);
        for w in kk.windows(2) {
            assert!(w[1] >= w[0], "K must be nondecreasing");
        }
    }

    #[test]
    fn comparison_gaps_for_identical_and_shifted_drivers() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 0.5);
        let obstacle = Obstacle::inactive();
        let policy = LadderPolicy::fixed(4);
        let base = solve_rbsde_with(&model, &Driver::zero(), &obstacle, &xi, 64, policy).unwrap();
        let same = compare_rbsde(&base, &base).unwrap();
        assert_eq!(same.min_value_gap, 0.0);
        assert_eq!(same.min_k_gap, 0.0);

        // g = f + 1 shifts the value by (T - t), leaving the push at zero
        let plus_one = Driver::linear_with_offset(0.0, 0.0, Forcing::uniform(2, 1.0));
        let bigger = solve_rbsde_with(&model, &plus_one, &obstacle, &xi, 64, policy).unwrap();
        let gaps = compare_rbsde(&base, &bigger).unwrap();
        assert!(gaps.min_value_gap >= -1e-12);
        assert!(gaps.min_k_gap.abs() < 1e-12);
        let times = bigger.values().times();
        for (k, &t) in times.iter().enumerate() {
            let expected = 1.0 - t;
            assert!(
                (bigger.values().value(k, 0) - base.values().value(k, 0) - expected).abs() < 1e-8
            );
        }
    }

    #[test]
    fn incompatible_obstacle_is_rejected() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 0.0);
        let high = Obstacle::constant(0.5);
        assert!(matches!(
            solve_rbsde(&model, &Driver::zero(), &high, &xi, 32, 1e-3),
            Err(Error::IncompatibleObstacle { .. })
        ));
    }

    #[test]
    fn exhausted_ladder_reports_no_convergence() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let obstacle = Obstacle::constant(1.0);
        let policy = LadderPolicy {
            max_level: 2,
            tol: Some(1e-12),
            max_rate_per_step: 1.0,
        };
        let err = solve_rbsde_with(&model, &minus_one_driver(2), &obstacle, &xi, 64, policy)
            .unwrap_err();
        assert!(matches!(err, Error::NoConvergence { last_gap } if last_gap > 1e-12));
    }

    #[test]
    fn ladder_levels_increase_monotonically() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let sol = solve_rbsde(
            &model,
            &minus_one_driver(2),
            &Obstacle::constant(1.0),
            &xi,
            256,
            1e-3,
        )
        .unwrap();
        for level in sol.ladder().iter().skip(1) {
            assert!(
                level.min_gap >= -1e-10,
                "level n={} dipped by {}",
                level.n,
                level.min_gap
            );
        }
        assert!(!sol.ladder_report().is_empty());
    }

    #[test]
    fn identical_instances_have_zero_dependence_gap() {
        let model = symmetric_model();
        let inst = RbsdeInstance {
            driver: Driver::linear(-0.2, 0.1),
            obstacle: Obstacle::inactive(),
            xi: TerminalCondition::new(DVector::from_vec(vec![0.4, -0.1])).unwrap(),
        };
        let gap = continuous_dependence_gap(
            &model,
            &inst,
            &inst,
            64,
            LadderPolicy::fixed(3),
            0,
            64,
            9,
        )
        .unwrap();
        assert_eq!(gap.lhs(), 0.0);
        assert_eq!(gap.rhs(), 0.0);
        assert_eq!(gap.ratio(), 0.0);
    }

    #[test]
    fn dependence_gap_rejects_different_drivers() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 0.0);
        let a = RbsdeInstance {
            driver: Driver::linear(-0.2, 0.1),
            obstacle: Obstacle::inactive(),
            xi: xi.clone(),
        };
        let b = RbsdeInstance {
            driver: Driver::linear(-0.3, 0.1),
            obstacle: Obstacle::inactive(),
            xi,
        };
        assert!(matches!(
            continuous_dependence_gap(&model, &a, &b, 32, LadderPolicy::fixed(2), 0, 8, 1),
            Err(Error::InstanceMismatch)
        ));
    }

    #[test]
    fn rbsde_csv_has_value_and_intensity_columns() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let sol = solve_rbsde(
            &model,
            &minus_one_driver(2),
            &Obstacle::constant(1.0),
            &xi,
            64,
            1e-2,
        )
        .unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,V_1,V_2,k_1,k_2\n"));
        assert_eq!(text.lines().count(), sol.values().n_nodes() + 1);
    }
}
