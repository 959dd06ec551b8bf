//! Backward solver for Markovian BSDEs driven by the chain martingale.
//!
//! For Markovian data the solution satisfies `Y_t = u_{X_t}(t)` where the
//! per-state value vector `u` solves the coupled backward ODE system
//!
//! ```text
//! du_i/dt = -f(t, u_i(t), u(t), i) - (A_t' u(t))_i,       u(T) = xi,
//! ```
//!
//! and `Z_t = u(t)` is the canonical martingale-representation vector. Any
//! `Z` differing by a multiple of the ones vector is equivalent under the
//! `Psi` semi-norm, so the node values themselves are stored as `Z`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chain::{ChainModel, ChainPath};
use crate::error::{Error, Result};

/// Per-state scalar field affine in time: `value_i(t) = c_i + s_i * t`.
///
/// Used for driver offsets, additive forcing terms and comparison bumps.
#[derive(Debug, Clone, PartialEq)]
pub struct Forcing {
    constants: DVector<f64>,
    slopes: DVector<f64>,
}

impl Forcing {
    pub fn affine(constants: DVector<f64>, slopes: DVector<f64>) -> Result<Self> {
        if constants.len() != slopes.len() {
            return Err(Error::InvalidArgument(
                "forcing constants and slopes must have equal length".into(),
            ));
        }
        if constants.iter().chain(slopes.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("forcing must be finite".into()));
        }
        Ok(Forcing { constants, slopes })
    }

    pub fn constant_per_state(constants: DVector<f64>) -> Self {
        let n = constants.len();
        Forcing {
            constants,
            slopes: DVector::zeros(n),
        }
    }

    /// Same value in every state.
    pub fn uniform(n: usize, value: f64) -> Self {
        Forcing::constant_per_state(DVector::from_element(n, value))
    }

    pub fn n(&self) -> usize {
        self.constants.len()
    }

    pub fn eval(&self, t: f64, state: usize) -> f64 {
        self.constants[state] + self.slopes[state] * t
    }

    /// `int_a^b |value_state(t)| dt`, exact for the affine form.
    pub fn abs_integral(&self, state: usize, a: f64, b: f64) -> f64 {
        let (c, s) = (self.constants[state], self.slopes[state]);
        let anti = |t: f64| c * t + 0.5 * s * t * t;
        if s == 0.0 {
            return c.abs() * (b - a);
        }
        let root = -c / s;
        if root > a && root < b {
            (anti(root) - anti(a)).abs() + (anti(b) - anti(root)).abs()
        } else {
            (anti(b) - anti(a)).abs()
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Forcing {
            constants: &self.constants * factor,
            slopes: &self.slopes * factor,
        }
    }

    pub fn plus(&self, other: &Forcing) -> Self {
        Forcing {
            constants: &self.constants + &other.constants,
            slopes: &self.slopes + &other.slopes,
        }
    }

    /// Max of `|value_i(t)|` over states at the interval endpoints and the
    /// interior extrema (affine: endpoints suffice).
    pub fn sup_abs(&self, a: f64, b: f64) -> f64 {
        (0..self.n())
            .map(|i| self.eval(a, i).abs().max(self.eval(b, i).abs()))
            .fold(0.0_f64, f64::max)
    }
}

#[derive(Clone)]
enum DriverFamily {
    Zero,
    /// `a * y + b * ||z||_{X_t} + offset_i(t)`
    Linear {
        a: f64,
        b: f64,
        offset: Option<Forcing>,
    },
    Custom {
        f: Arc<dyn Fn(&ChainModel, f64, f64, &DVector<f64>, usize) -> f64 + Send + Sync>,
        tag: &'static str,
    },
}

/// Markovian driver `f(t, y, z, state)` with declared Lipschitz constants
/// (`c_y` in the value, `c_z` in the semi-norm of `z`) and an optional
/// additive forcing term.
#[derive(Clone)]
pub struct Driver {
    family: DriverFamily,
    c_y: f64,
    c_z: f64,
    forcing: Option<Forcing>,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("family", &self.family_tag())
            .field("c_y", &self.c_y)
            .field("c_z", &self.c_z)
            .field("forcing", &self.forcing)
            .finish()
    }
}

impl Driver {
    pub fn zero() -> Self {
        Driver {
            family: DriverFamily::Zero,
            c_y: 0.0,
            c_z: 0.0,
            forcing: None,
        }
    }

    /// `f(t, y, z) = a y + b ||z||_{X_t}`.
    pub fn linear(a: f64, b: f64) -> Self {
        Driver {
            family: DriverFamily::Linear { a, b, offset: None },
            c_y: a.abs(),
            c_z: b.abs(),
            forcing: None,
        }
    }

    /// `f(t, y, z) = a y + b ||z||_{X_t} + offset_i(t)`.
    pub fn linear_with_offset(a: f64, b: f64, offset: Forcing) -> Self {
        Driver {
            family: DriverFamily::Linear {
                a,
                b,
                offset: Some(offset),
            },
            c_y: a.abs(),
            c_z: b.abs(),
            forcing: None,
        }
    }

    /// Arbitrary Markovian driver with caller-declared Lipschitz constants.
    pub fn custom<F>(f: F, c_y: f64, c_z: f64, tag: &'static str) -> Self
    where
        F: Fn(&ChainModel, f64, f64, &DVector<f64>, usize) -> f64 + Send + Sync + 'static,
    {
        Driver {
            family: DriverFamily::Custom { f: Arc::new(f), tag },
            c_y,
            c_z,
            forcing: None,
        }
    }

    /// Adds the additive forcing term `phi_i(t)`.
    pub fn with_forcing(mut self, forcing: Forcing) -> Self {
        self.forcing = Some(forcing);
        self
    }

    pub fn without_forcing(mut self) -> Self {
        self.forcing = None;
        self
    }

    pub fn forcing(&self) -> Option<&Forcing> {
        self.forcing.as_ref()
    }

    pub fn c_y(&self) -> f64 {
        self.c_y
    }

    pub fn c_z(&self) -> f64 {
        self.c_z
    }

    pub fn family_tag(&self) -> &'static str {
        match &self.family {
            DriverFamily::Zero => "zero",
            DriverFamily::Linear { .. } => "linear",
            DriverFamily::Custom { tag, .. } => tag,
        }
    }

    /// Linear-family coefficients `(a, b)` when applicable.
    pub fn linear_coefficients(&self) -> Option<(f64, f64)> {
        match &self.family {
            DriverFamily::Linear { a, b, .. } => Some((*a, *b)),
            _ => None,
        }
    }

    pub fn eval(&self, model: &ChainModel, t: f64, y: f64, z: &DVector<f64>, state: usize) -> f64 {
        self.eval_at(model, t, t, y, z, state)
    }

    /// Evaluation with a separate lookup time for the rate matrix, so a
    /// sweep can pin the whole step to one schedule segment while keeping
    /// the true stage time for explicit time dependence.
    pub(crate) fn eval_at(
        &self,
        model: &ChainModel,
        rate_time: f64,
        t: f64,
        y: f64,
        z: &DVector<f64>,
        state: usize,
    ) -> f64 {
        let base = match &self.family {
            DriverFamily::Zero => 0.0,
            DriverFamily::Linear { a, b, offset } => {
                let mut v = a * y;
                if *b != 0.0 {
                    v += b * model.seminorm_sq(rate_time, state, z).max(0.0).sqrt();
                }
                if let Some(off) = offset {
                    v += off.eval(t, state);
                }
                v
            }
            DriverFamily::Custom { f, .. } => f(model, t, y, z, state),
        };
        match &self.forcing {
            Some(phi) => base + phi.eval(t, state),
            None => base,
        }
    }

    /// `f(t, 0, 0)` including forcing, per state.
    pub fn zero_level(&self, model: &ChainModel, t: f64, state: usize) -> f64 {
        let z = DVector::zeros(model.n());
        self.eval(model, t, 0.0, &z, state)
    }

    /// True when two drivers share the family and coefficients, ignoring the
    /// forcing term. Custom drivers compare by closure identity.
    pub fn same_family(&self, other: &Driver) -> bool {
        match (&self.family, &other.family) {
            (DriverFamily::Zero, DriverFamily::Zero) => true,
            (
                DriverFamily::Linear { a, b, offset },
                DriverFamily::Linear {
                    a: a2,
                    b: b2,
                    offset: o2,
                },
            ) => a == a2 && b == b2 && offset == o2,
            (DriverFamily::Custom { f, .. }, DriverFamily::Custom { f: f2, .. }) => {
                Arc::ptr_eq(f, f2)
            }
            _ => false,
        }
    }
}

/// Spot-checks the declared Lipschitz constants on random probes; returns the
/// largest observed excess of `|f(t,y1,z1) - f(t,y2,z2)|` over
/// `c_y |y1-y2| + c_z ||z1-z2||_{X_t}` (nonpositive when the declaration
/// holds on the sample).
pub fn lipschitz_excess(model: &ChainModel, driver: &Driver, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.n();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..probes {
        let t = rng.random::<f64>() * model.horizon();
        let state = rng.random_range(0..n);
        let y1 = rng.random_range(-2.0..2.0);
        let y2 = rng.random_range(-2.0..2.0);
        let z1 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let z2 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let lhs = (driver.eval(model, t, y1, &z1, state) - driver.eval(model, t, y2, &z2, state))
            .abs();
        let dz = &z1 - &z2;
        let bound = driver.c_y * (y1 - y2).abs()
            + driver.c_z * model.seminorm_sq(t, state, &dz).max(0.0).sqrt();
        worst = worst.max(lhs - bound);
    }
    worst
}

/// Terminal condition: one value per terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCondition {
    xi: DVector<f64>,
}

impl TerminalCondition {
    pub fn new(xi: DVector<f64>) -> Result<Self> {
        if xi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "terminal values must be finite".into(),
            ));
        }
        Ok(TerminalCondition { xi })
    }

    pub fn constant(n: usize, c: f64) -> Self {
        TerminalCondition {
            xi: DVector::from_element(n, c),
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.len() == 0
    }
}

/// Marker for the `Z` representative stored in a [`ValueGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZConvention {
    /// `Z(t) = u(t)`: the node value vector itself.
    NodeValues,
}

/// Backward solution on a time grid: `K+1` increasing times and a
/// `(K+1) x N` value matrix whose terminal row equals the terminal condition
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    times: Vec<f64>,
    values: DMatrix<f64>,
    z_convention: ZConvention,
}

impl ValueGrid {
    pub(crate) fn from_parts(times: Vec<f64>, values: DMatrix<f64>) -> Self {
        debug_assert_eq!(times.len(), values.nrows());
        ValueGrid {
            times,
            values,
            z_convention: ZConvention::NodeValues,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn n_states(&self) -> usize {
        self.values.ncols()
    }

    pub fn z_convention(&self) -> ZConvention {
        self.z_convention
    }

    pub fn value(&self, node: usize, state: usize) -> f64 {
        self.values[(node, state)]
    }

    /// Value vector at one node; under [`ZConvention::NodeValues`] this is
    /// also the `Z` representative there.
    pub fn node_values(&self, node: usize) -> DVector<f64> {
        self.values.row(node).transpose()
    }

    pub fn terminal_values(&self) -> DVector<f64> {
        self.node_values(self.n_nodes() - 1)
    }

    pub fn same_grid(&self, other: &ValueGrid) -> bool {
        self.times == other.times
    }

    /// Sup-norm distance to another solution on the identical grid.
    pub fn sup_distance(&self, other: &ValueGrid) -> Result<f64> {
        if !self.same_grid(other) || self.n_states() != other.n_states() {
            return Err(Error::GridMismatch);
        }
        Ok((&self.values - &other.values).abs().max())
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.abs().max()
    }

    /// CSV export: header `t,u_1,...,u_N`, one row per node, round-trip
    /// double precision.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t")?;
        for i in 1..=self.n_states() {
            write!(w, ",u_{i}")?;
        }
        writeln!(w)?;
        for (k, &t) in self.times.iter().enumerate() {
            write!(w, "{t}")?;
            for i in 0..self.n_states() {
                write!(w, ",{}", self.values[(k, i)])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Classical fourth-order Runge-Kutta backward sweep of `du/dt = rhs(t, u)`
/// from `u(T) = xi` over the given grid. The rate-matrix lookup time is
/// pinned to each cell's midpoint so steps never straddle a schedule break.
pub(crate) fn sweep_backward<F>(
    model: &ChainModel,
    grid: &[f64],
    xi: &TerminalCondition,
    rhs: F,
) -> Result<ValueGrid>
where
    F: Fn(f64, f64, &DVector<f64>) -> DVector<f64>,
{
    model.check_grid(grid)?;
    if xi.len() != model.n() {
        return Err(Error::InvalidArgument(
            "terminal condition length must equal the state count".into(),
        ));
    }
    let nodes = grid.len();
    let mut values = DMatrix::zeros(nodes, model.n());
    let mut u = xi.values().clone();
    values.row_mut(nodes - 1).copy_from(&u.transpose());
    for k in (0..nodes - 1).rev() {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let h = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        let k1 = rhs(tm, t1, &u);
        let k2 = rhs(tm, tm, &(&u - &k1 * (0.5 * h)));
        let k3 = rhs(tm, tm, &(&u - &k2 * (0.5 * h)));
        let k4 = rhs(tm, t0, &(&u - &k3 * h));
        u -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        values.row_mut(k).copy_from(&u.transpose());
    }
    Ok(ValueGrid::from_parts(grid.to_vec(), values))
}

/// Vector field of the backward system for a given driver:
/// `F_i(t, u) = -f(t, u_i, u, i) - (A_t' u)_i`.
pub(crate) fn driver_rhs<'a>(
    model: &'a ChainModel,
    driver: &'a Driver,
) -> impl Fn(f64, f64, &DVector<f64>) -> DVector<f64> + 'a {
    move |rate_time, t, u| {
        let a = model.rates_at(rate_time);
        let mut out = a.tr_mul(u);
        for i in 0..model.n() {
            out[i] = -driver.eval_at(model, rate_time, t, u[i], u, i) - out[i];
        }
        out
    }
}

/// Solves the BSDE on a uniform-per-segment grid with roughly `steps` cells.
///
/// Converges at fourth order in the step size for smooth drivers; the
/// terminal row equals `xi` exactly.
pub fn solve_bsde(
    model: &ChainModel,
    driver: &Driver,
    xi: &TerminalCondition,
    steps: usize,
) -> Result<ValueGrid> {
    let grid = model.build_grid(steps.max(1));
    solve_bsde_on_grid(model, driver, xi, &grid)
}

pub(crate) fn solve_bsde_on_grid(
    model: &ChainModel,
    driver: &Driver,
    xi: &TerminalCondition,
    grid: &[f64],
) -> Result<ValueGrid> {
    sweep_backward(model, grid, xi, driver_rhs(model, driver))
}

/// `Y` and the running stochastic integral `int Z' dM` sampled on the grid
/// along one path.
#[derive(Debug, Clone)]
pub struct PathSamples {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    /// Cumulative `sum Z(t_k)' dM_k` with the predictable (left-endpoint)
    /// integrand; entry `k` is the integral over `[0, t_k]`.
    pub stochastic_integral: Vec<f64>,
}

/// Samples `Y_t = u_{X_t}(t)` and the cumulative stochastic integral along a
/// path, using the left grid node for the integrand and exact martingale
/// increments per cell.
pub fn evaluate_on_path(
    model: &ChainModel,
    sol: &ValueGrid,
    path: &ChainPath,
) -> Result<PathSamples> {
    if path.horizon() != model.horizon() {
        return Err(Error::InvalidArgument(
            "path and model horizons differ".into(),
        ));
    }
    let times = sol.times();
    let increments = model.martingale_increments(path, times)?;
    let mut y = Vec::with_capacity(times.len());
    let mut si = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    si.push(0.0);
    for (k, &t) in times.iter().enumerate() {
        y.push(sol.value(k, path.state_at(t)));
        if k < increments.len() {
            acc += sol.node_values(k).dot(&increments[k]);
            si.push(acc);
        }
    }
    Ok(PathSamples {
        times: times.to_vec(),
        y,
        stochastic_integral: si,
    })
}

/// Pathwise defect of the backward dynamics: the largest over grid nodes of
/// `|Y_t - (xi_{X_T} + int_t^T f ds - int_t^T Z' dM)|` with left-endpoint
/// quadrature for the driver integral. Order of the grid step for solved
/// instances; large values flag a corrupted solution.
pub fn residual_check(
    model: &ChainModel,
    sol: &ValueGrid,
    path: &ChainPath,
    driver: &Driver,
    xi: &TerminalCondition,
) -> Result<f64> {
    let samples = evaluate_on_path(model, sol, path)?;
    let times = &samples.times;
    let nodes = times.len();
    let si_total = samples.stochastic_integral[nodes - 1];
    let xi_term = xi.values()[path.state_at(path.horizon())];
    let mut f_suffix = 0.0;
    let mut worst = (samples.y[nodes - 1] - xi_term).abs();
    for k in (0..nodes - 1).rev() {
        let dt = times[k + 1] - times[k];
        let state = path.state_at(times[k]);
        let z = sol.node_values(k);
        f_suffix += dt * driver.eval(model, times[k], samples.y[k], &z, state);
        let reconstructed = xi_term + f_suffix - (si_total - samples.stochastic_integral[k]);
        worst = worst.max((samples.y[k] - reconstructed).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn symmetric_model() -> ChainModel {
        ChainModel::constant(dmatrix![-1.0, 1.0; 1.0, -1.0], 1.0).unwrap()
    }

    #[test]
    fn constants_are_solutions_for_zero_driver() {
        let model = ChainModel::constant(dmatrix![-1.0, 2.0; 1.0, -2.0], 1.0).unwrap();
        let xi = TerminalCondition::constant(2, 3.5);
        let sol = solve_bsde(&model, &Driver::zero(), &xi, 64).unwrap();
        for k in 0..sol.n_nodes() {
            for i in 0..2 {
                assert!((sol.value(k, i) - 3.5).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn terminal_row_is_exact() {
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, -0.25])).unwrap();
        let sol = solve_bsde(&model, &Driver::linear(0.3, 0.1), &xi, 32).unwrap();
        assert_eq!(sol.terminal_values(), *xi.values());
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        // f(t,y,z) = -r y with constant terminal c gives u = c exp(-r (T-t))
        let model = ChainModel::constant(dmatrix![-1.0, 2.0; 1.0, -2.0], 1.0).unwrap();
        let xi = TerminalCondition::constant(2, 1.0);
        let sol = solve_bsde(&model, &Driver::linear(-0.4, 0.0), &xi, 1000).unwrap();
        let expected_at_0 = 0.6703200460356393; // exp(-0.4)
        for i in 0..2 {
            assert!((sol.value(0, i) - expected_at_0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_driver_matches_matrix_exponential_closed_form() {
        // two-state symmetric chain: u(t) = ((1+e^{-2(T-t)})/2, (1-e^{-2(T-t)})/2)
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let sol = solve_bsde(&model, &Driver::zero(), &xi, 1000).unwrap();
        for (k, &t) in sol.times().iter().enumerate() {
            let decay = (-2.0 * (1.0 - t)).exp();
            assert!((sol.value(k, 0) - 0.5 * (1.0 + decay)).abs() < 1e-8);
            assert!((sol.value(k, 1) - 0.5 * (1.0 - decay)).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_driver_is_reported() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 0.0);
        let bad = Driver::custom(|_, _, _, _, _| f64::NAN, 0.0, 0.0, "nan");
        assert!(matches!(
            solve_bsde(&model, &bad, &xi, 4),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn constant_solution_has_flat_samples() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 2.0);
        let sol = solve_bsde(&model, &Driver::zero(), &xi, 128).unwrap();
        let path = model.simulate_path(0, 5);
        let samples = evaluate_on_path(&model, &sol, &path).unwrap();
        for &y in &samples.y {
            assert!((y - 2.0).abs() < 1e-13);
        }
        // Z is a multiple of the ones vector, which pairs to zero with dM
        for &s in &samples.stochastic_integral {
            assert!(s.abs() < 1e-12, "integral leaked: {s}");
        }
    }

    #[test]
    fn jump_free_path_sees_pure_compensator() {
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let sol = solve_bsde(&model, &Driver::zero(), &xi, 64).unwrap();
        let path = ChainPath::new(0, vec![], 1.0).unwrap();
        let samples = evaluate_on_path(&model, &sol, &path).unwrap();
        // with no jumps, dM = -A X dt, so the integral is minus the
        // compensator pairing
        let mut expected = 0.0;
        let times = sol.times();
        for k in 0..times.len() - 1 {
            let h = times[k + 1] - times[k];
            let a = model.rates_at(0.5 * (times[k] + times[k + 1]));
            let z = sol.node_values(k);
            let mut pair = 0.0;
            for j in 0..2 {
                pair += z[j] * a[(j, 0)];
            }
            expected -= h * pair;
        }
        let got = *samples.stochastic_integral.last().unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn residual_vanishes_for_constant_instance() {
        let model = symmetric_model();
        let xi = TerminalCondition::constant(2, 1.0);
        let sol = solve_bsde(&model, &Driver::zero(), &xi, 64).unwrap();
        let path = model.simulate_path(0, 17);
        let r = residual_check(&model, &sol, &path, &Driver::zero(), &xi).unwrap();
        assert!(r < 1e-12, "residual = {r}");
    }

    #[test]
    fn residual_detects_corruption() {
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let sol = solve_bsde(&model, &Driver::zero(), &xi, 256).unwrap();
        let path = model.simulate_path(0, 23);
        let mut corrupted = sol.clone();
        let node = corrupted.n_nodes() / 2;
        let state = path.state_at(corrupted.times()[node]);
        corrupted.values[(node, state)] += 1.0;
        let r = residual_check(&model, &corrupted, &path, &Driver::zero(), &xi).unwrap();
        assert!(r >= 0.5, "residual too small: {r}");
    }

    #[test]
    fn lipschitz_declaration_holds_for_linear_family() {
        let model = ChainModel::constant(dmatrix![-1.0, 2.0; 1.0, -2.0], 1.0).unwrap();
        let driver = Driver::linear_with_offset(-0.5, 0.2, Forcing::uniform(2, 0.7));
        let excess = lipschitz_excess(&model, &driver, 500, 42);
        assert!(excess <= 1e-12, "excess = {excess}");
    }

    #[test]
    fn forcing_abs_integral_handles_sign_change() {
        // phi(t) = -1 + 2 t on [0, 1] crosses zero at 1/2:
        // integral of |phi| = 1/4 + 1/4 = 1/2
        let phi = Forcing::affine(
            DVector::from_vec(vec![-1.0]),
            DVector::from_vec(vec![2.0]),
        )
        .unwrap();
        assert!((phi.abs_integral(0, 0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((phi.abs_integral(0, 0.0, 0.5) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_node_values() {
        let model = symmetric_model();
        let xi = TerminalCondition::new(DVector::from_vec(vec![0.25, -1.5])).unwrap();
        let sol = solve_bsde(&model, &Driver::linear(0.1, 0.0), &xi, 8).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,u_1,u_2");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0].parse::<f64>().unwrap(), sol.times()[0]);
        assert_eq!(row[1].parse::<f64>().unwrap(), sol.value(0, 0));
        assert_eq!(row[2].parse::<f64>().unwrap(), sol.value(0, 1));
    }
}
