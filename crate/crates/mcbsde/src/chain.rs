//! Finite-state Markov chain model.
//!
//! States are identified with the unit vectors `e_1, ..., e_N`, so the chain
//! satisfies `X_t = X_0 + int_0^t A_s X_s ds + M_t` with `M` a vector
//! martingale. Rate matrices follow the zero-column-sum convention: column `i`
//! holds the jump rates out of state `i`, and the drift of the unit-vector
//! state is `A_t X_t`. The predictable bracket of `X` has density
//!
//! ```text
//! Psi_t = diag(A_t X_{t-}) - diag(X_{t-}) A_t' - A_t diag(X_{t-}),
//! ```
//!
//! a symmetric positive-semidefinite matrix that annihilates the ones vector.
//! `Psi` induces the semi-norm `||C||^2_{X_t} = C' Psi_t C` used for
//! integrands against `M`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Column-sum slack accepted by the validator.
pub const COLUMN_SUM_TOL: f64 = 1e-12;

/// Relative eigenvalue cutoff for the pseudoinverse.
pub const PINV_EIGEN_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Segment {
    start: f64,
    rates: DMatrix<f64>,
}

/// A finite-state chain with a piecewise-constant rate matrix schedule on
/// `[0, T]`.
///
/// Immutable after construction; all operations may run concurrently on a
/// shared model.
#[derive(Debug, Clone)]
pub struct ChainModel {
    n: usize,
    horizon: f64,
    segments: Vec<Segment>,
    bound: f64,
}

impl ChainModel {
    /// Validates a rate-matrix schedule and builds the model.
    ///
    /// Each matrix must be `n x n` with nonnegative off-diagonal entries and
    /// columns summing to zero within [`COLUMN_SUM_TOL`]. Break times must be
    /// strictly increasing, start at `0`, and stay below `horizon`. After
    /// validation the diagonal is recomputed as minus the off-diagonal column
    /// sum so that stored columns sum to zero at working precision.
    pub fn new(n: usize, schedule: Vec<(f64, DMatrix<f64>)>, horizon: f64) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::EmptySchedule);
        }
        if n == 0 {
            return Err(Error::InvalidArgument("state count must be positive".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        let mut segments = Vec::with_capacity(schedule.len());
        let mut prev_start = f64::NEG_INFINITY;
        for (idx, (start, rates)) in schedule.into_iter().enumerate() {
            if idx == 0 && start != 0.0 {
                return Err(Error::InvalidArgument(
                    "first schedule break must be at t = 0".into(),
                ));
            }
            if start <= prev_start || start < 0.0 || start >= horizon {
                return Err(Error::InvalidArgument(
                    "break times must be strictly increasing and inside [0, T)".into(),
                ));
            }
            prev_start = start;
            let rates = validate_rates(n, rates)?;
            segments.push(Segment { start, rates });
        }
        let bound = segments
            .iter()
            .map(|s| spectral_norm(&s.rates))
            .fold(0.0_f64, f64::max);
        if !bound.is_finite() {
            return Err(Error::InvalidArgument("rate matrix entries must be finite".into()));
        }
        Ok(ChainModel {
            n,
            horizon,
            segments,
            bound,
        })
    }

    /// Model with a single rate matrix on the whole horizon.
    pub fn constant(rates: DMatrix<f64>, horizon: f64) -> Result<Self> {
        let n = rates.nrows();
        ChainModel::new(n, vec![(0.0, rates)], horizon)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// The bound `m`: the largest spectral norm across the schedule.
    pub fn bound_m(&self) -> f64 {
        self.bound
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Break times of the schedule, starting with `0`.
    pub fn break_times(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.start).collect()
    }

    fn segment_index_at(&self, t: f64) -> usize {
        match self
            .segments
            .binary_search_by(|s| s.start.partial_cmp(&t).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// Rate matrix active at time `t`.
    pub fn rates_at(&self, t: f64) -> &DMatrix<f64> {
        &self.segments[self.segment_index_at(t)].rates
    }

    fn segment_span(&self, idx: usize) -> (f64, f64) {
        let start = self.segments[idx].start;
        let end = if idx + 1 < self.segments.len() {
            self.segments[idx + 1].start
        } else {
            self.horizon
        };
        (start, end)
    }

    /// The bracket density `Psi_t` evaluated at `X_{t-} = e_state`.
    pub fn psi(&self, t: f64, state: usize) -> PsiMatrix {
        self.psi_of(self.rates_at(t), state)
    }

    fn psi_of(&self, a: &DMatrix<f64>, state: usize) -> PsiMatrix {
        assert!(state < self.n, "state index out of range");
        let n = self.n;
        let mut entries = DMatrix::zeros(n, n);
        // diag(A e_i)
        for j in 0..n {
            entries[(j, j)] = a[(j, state)];
        }
        // - diag(e_i) A': subtract row i of A' (= column i of A transposed)
        for l in 0..n {
            entries[(state, l)] -= a[(l, state)];
        }
        // - A diag(e_i): subtract column i of A in column i
        for k in 0..n {
            entries[(k, state)] -= a[(k, state)];
        }
        PsiMatrix { entries, state }
    }

    /// `||C||^2_{X_t} = C' Psi_t C` for `X_{t-} = e_state`.
    pub fn seminorm_sq(&self, t: f64, state: usize, c: &DVector<f64>) -> f64 {
        self.psi(t, state).quadratic_form(c)
    }

    /// Largest value of `c_z * ||Psi_t^+|| * sqrt(6 m)` over a sweep of all
    /// states and all schedule segments; values below `1` mean the smallness
    /// condition on the driver's `z`-Lipschitz constant holds.
    ///
    /// `Psi_t` depends on `t` only through the active segment, so sweeping one
    /// interior time per segment is exhaustive. The matrix norm is the
    /// spectral norm.
    pub fn assumption_margin(&self, c_z: f64) -> f64 {
        let factor = (6.0 * self.bound).sqrt();
        let mut worst = 0.0_f64;
        for idx in 0..self.segments.len() {
            let (start, end) = self.segment_span(idx);
            let t = 0.5 * (start + end);
            for state in 0..self.n {
                let psi = self.psi(t, state);
                let pinv = pseudoinverse(psi.entries())
                    .expect("Psi is symmetric by construction");
                worst = worst.max(symmetric_spectral_norm(&pinv));
            }
        }
        c_z * worst * factor
    }

    /// Samples one chain trajectory on `[0, T]` by exponential holding times,
    /// restarting the clock at schedule breaks (exact for piecewise-constant
    /// rates by memorylessness). Deterministic given the seed.
    pub fn simulate_path(&self, x0: usize, seed: u64) -> ChainPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.simulate_path_with(x0, &mut rng)
    }

    /// Same as [`ChainModel::simulate_path`] with a caller-provided generator,
    /// for substream-based Monte Carlo.
    pub fn simulate_path_with<R: Rng + ?Sized>(&self, x0: usize, rng: &mut R) -> ChainPath {
        assert!(x0 < self.n, "initial state out of range");
        let mut state = x0;
        let mut jumps = Vec::new();
        for idx in 0..self.segments.len() {
            let (start, end) = self.segment_span(idx);
            let a = &self.segments[idx].rates;
            // memorylessness lets the exponential clock restart at each break
            let mut t = start;
            loop {
                let out_rate = -a[(state, state)];
                if out_rate <= 0.0 {
                    break;
                }
                let u: f64 = rng.random();
                let hold = -(1.0 - u).ln() / out_rate;
                if t + hold >= end {
                    break;
                }
                t += hold;
                state = sample_target(a, state, out_rate, rng);
                jumps.push((t, state));
            }
        }
        ChainPath {
            x0,
            jumps,
            horizon: self.horizon,
        }
    }

    /// Martingale increments `dM = dX - A_s X_s ds` over each grid cell.
    ///
    /// The compensator is integrated exactly: cells are split at jump times
    /// and schedule breaks, where both the state and the rates are constant.
    pub fn martingale_increments(&self, path: &ChainPath, grid: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.check_grid(grid)?;
        if path.horizon != self.horizon {
            return Err(Error::InvalidArgument(
                "path and model horizons differ".into(),
            ));
        }
        let mut out = Vec::with_capacity(grid.len().saturating_sub(1));
        for w in grid.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let mut inc = DVector::zeros(self.n);
            inc[path.state_at(t1)] += 1.0;
            inc[path.state_at(t0)] -= 1.0;
            for (a, b, st) in self.pieces(path, t0, t1) {
                let len = b - a;
                let rates = self.rates_at(a);
                for j in 0..self.n {
                    inc[j] -= len * rates[(j, st)];
                }
            }
            out.push(inc);
        }
        Ok(out)
    }

    /// Splits `[t0, t1]` at the path's jumps and the schedule breaks, yielding
    /// `(start, end, state)` pieces with constant state and rates.
    pub(crate) fn pieces(&self, path: &ChainPath, t0: f64, t1: f64) -> Vec<(f64, f64, usize)> {
        let mut cuts = vec![t0];
        for &(tj, _) in &path.jumps {
            if tj > t0 && tj < t1 {
                cuts.push(tj);
            }
        }
        for seg in &self.segments {
            if seg.start > t0 && seg.start < t1 {
                cuts.push(seg.start);
            }
        }
        cuts.push(t1);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (w[0], w[1], path.state_at(w[0])))
            .collect()
    }

    /// Forward state law `p(t)` on the grid nodes: solves `dp/dt = A_t p`
    /// with one classical Runge-Kutta step per cell.
    pub fn forward_law(&self, p0: &DVector<f64>, grid: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.check_grid(grid)?;
        if p0.len() != self.n {
            return Err(Error::InvalidArgument("distribution length mismatch".into()));
        }
        let mut out = Vec::with_capacity(grid.len());
        let mut p = p0.clone();
        out.push(p.clone());
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            let a = self.rates_at(0.5 * (w[0] + w[1]));
            let k1 = a * &p;
            let k2 = a * (&p + &k1 * (0.5 * h));
            let k3 = a * (&p + &k2 * (0.5 * h));
            let k4 = a * (&p + &k3 * h);
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            out.push(p.clone());
        }
        Ok(out)
    }

    /// Uniform-per-segment time grid with roughly `steps` cells in total;
    /// schedule breaks and the horizon are grid nodes.
    pub fn build_grid(&self, steps: usize) -> Vec<f64> {
        self.grid_from_counts(&self.segment_cell_counts(steps))
    }

    /// Cells allocated to each segment, proportional to its length.
    pub(crate) fn segment_cell_counts(&self, steps: usize) -> Vec<usize> {
        let steps = steps.max(1);
        (0..self.segments.len())
            .map(|idx| {
                let (start, end) = self.segment_span(idx);
                let frac = (end - start) / self.horizon;
                ((steps as f64 * frac).round() as usize).max(1)
            })
            .collect()
    }

    /// Grid nodes for the given per-segment cell counts. Node times are
    /// computed as `start + (i * len) / count`, which makes power-of-two
    /// refinements of `counts` reproduce the coarser nodes bit-exactly.
    pub(crate) fn grid_from_counts(&self, counts: &[usize]) -> Vec<f64> {
        assert_eq!(counts.len(), self.segments.len());
        let mut grid = Vec::with_capacity(counts.iter().sum::<usize>() + 1);
        for (idx, &count) in counts.iter().enumerate() {
            let (start, end) = self.segment_span(idx);
            let len = end - start;
            for i in 0..count {
                grid.push(start + (i as f64 * len) / count as f64);
            }
        }
        grid.push(self.horizon);
        grid
    }

    pub(crate) fn check_grid(&self, grid: &[f64]) -> Result<()> {
        if grid.len() < 2 {
            return Err(Error::InvalidArgument("grid needs at least two nodes".into()));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        if grid[0] < 0.0 || grid[grid.len() - 1] > self.horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument("grid leaves [0, T]".into()));
        }
        Ok(())
    }
}

fn sample_target<R: Rng + ?Sized>(
    a: &DMatrix<f64>,
    state: usize,
    out_rate: f64,
    rng: &mut R,
) -> usize {
    let mut u = rng.random::<f64>() * out_rate;
    let n = a.nrows();
    let mut fallback = state;
    for j in 0..n {
        if j == state {
            continue;
        }
        let r = a[(j, state)];
        if r <= 0.0 {
            continue;
        }
        fallback = j;
        if u < r {
            return j;
        }
        u -= r;
    }
    fallback
}

fn validate_rates(n: usize, mut rates: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rates.nrows() != n || rates.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "rate matrix must be {n} x {n}, got {} x {}",
            rates.nrows(),
            rates.ncols()
        )));
    }
    if rates.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("rate matrix entries must be finite".into()));
    }
    for col in 0..n {
        let mut off_sum = 0.0;
        for row in 0..n {
            if row == col {
                continue;
            }
            let value = rates[(row, col)];
            if value < 0.0 {
                return Err(Error::NegativeRate { row, col, value });
            }
            off_sum += value;
        }
        let sum = off_sum + rates[(col, col)];
        if sum.abs() > COLUMN_SUM_TOL {
            return Err(Error::BadColumnSum { col, sum });
        }
        // pin the column sum to zero at working precision
        rates[(col, col)] = -off_sum;
    }
    Ok(rates)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

fn symmetric_spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, &l| acc.max(l.abs()))
}

/// The bracket density of Eq.-style form `diag(A x) - diag(x) A' - A diag(x)`
/// at a fixed state; symmetric, positive semidefinite, rows sum to zero.
#[derive(Debug, Clone)]
pub struct PsiMatrix {
    entries: DMatrix<f64>,
    state: usize,
}

impl PsiMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// State index the matrix was evaluated at.
    pub fn state(&self) -> usize {
        self.state
    }

    /// `c' Psi c`.
    pub fn quadratic_form(&self, c: &DVector<f64>) -> f64 {
        self.inner(c, c)
    }

    /// `c' Psi d`.
    pub fn inner(&self, c: &DVector<f64>, d: &DVector<f64>) -> f64 {
        assert_eq!(c.len(), self.entries.nrows(), "vector length mismatch");
        assert_eq!(d.len(), self.entries.nrows(), "vector length mismatch");
        (c.transpose() * &self.entries * d)[(0, 0)]
    }
}

/// Moore-Penrose pseudoinverse of a symmetric matrix via symmetric
/// eigendecomposition, zeroing eigenvalues below `1e-12` of the largest
/// magnitude. Satisfies `Q Q+ Q = Q`, `Q+ Q Q+ = Q+` and the symmetry of
/// `Q Q+` and `Q+ Q`.
pub fn pseudoinverse(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::NotSymmetric);
    }
    let scale = q.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (q[(i, j)] - q[(j, i)]).abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::NotSymmetric);
            }
        }
    }
    let eig = q.clone().symmetric_eigen();
    let max_abs = eig.eigenvalues.iter().fold(0.0_f64, |acc, &l| acc.max(l.abs()));
    let cutoff = PINV_EIGEN_CUTOFF * max_abs;
    let mut inv = DVector::zeros(n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        inv[i] = if l.abs() > cutoff { 1.0 / l } else { 0.0 };
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&inv) * v.transpose())
}

/// One realized trajectory: initial state plus ordered `(time, new state)`
/// jumps on `(0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    x0: usize,
    jumps: Vec<(f64, usize)>,
    horizon: f64,
}

impl ChainPath {
    /// Builds a path, validating that jump times are strictly increasing in
    /// `(0, T]` and consecutive states differ.
    pub fn new(x0: usize, jumps: Vec<(f64, usize)>, horizon: f64) -> Result<Self> {
        let mut prev_t = 0.0;
        let mut prev_state = x0;
        for &(t, s) in &jumps {
            if t <= prev_t || t > horizon {
                return Err(Error::InvalidArgument(
                    "jump times must be strictly increasing in (0, T]".into(),
                ));
            }
            if s == prev_state {
                return Err(Error::InvalidArgument(
                    "consecutive states must differ".into(),
                ));
            }
            prev_t = t;
            prev_state = s;
        }
        Ok(ChainPath { x0, jumps, horizon })
    }

    pub fn x0(&self) -> usize {
        self.x0
    }

    pub fn jumps(&self) -> &[(f64, usize)] {
        &self.jumps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// State occupied at time `t` (right-continuous: a jump at exactly `t`
    /// counts).
    pub fn state_at(&self, t: f64) -> usize {
        match self
            .jumps
            .binary_search_by(|&(tj, _)| tj.partial_cmp(&t).unwrap())
        {
            Ok(i) => self.jumps[i].1,
            Err(0) => self.x0,
            Err(i) => self.jumps[i - 1].1,
        }
    }

    /// Fraction of `[0, T]` spent in `state`.
    pub fn occupation_fraction(&self, state: usize) -> f64 {
        let mut total = 0.0;
        let mut t_prev = 0.0;
        let mut s_prev = self.x0;
        for &(t, s) in &self.jumps {
            if s_prev == state {
                total += t - t_prev;
            }
            t_prev = t;
            s_prev = s;
        }
        if s_prev == state {
            total += self.horizon - t_prev;
        }
        total / self.horizon
    }
}

/// Unit vector `e_i` in dimension `n`.
pub fn unit_vector(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn two_state_model() -> ChainModel {
        ChainModel::constant(dmatrix![-1.0, 2.0; 1.0, -2.0], 1.0).unwrap()
    }

    #[test]
    fn validate_computes_spectral_bound() {
        let model = two_state_model();
        assert!((model.bound_m() - 10.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_generator_is_valid_with_zero_bound() {
        let model = ChainModel::constant(DMatrix::zeros(2, 2), 1.0).unwrap();
        assert_eq!(model.bound_m(), 0.0);
    }

    #[test]
    fn bad_column_sum_is_rejected() {
        let err = ChainModel::constant(dmatrix![-1.0, 0.0; 2.0, 0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::BadColumnSum { col: 0, .. }));
    }

    #[test]
    fn negative_rate_is_rejected() {
        let err = ChainModel::constant(dmatrix![1.0, -1.0; -1.0, 1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::NegativeRate { .. }));
    }

    #[test]
    fn empty_schedule_is_rejected() {
        let err = ChainModel::new(2, vec![], 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptySchedule));
    }

    #[test]
    fn psi_matches_hand_expansion() {
        let model = two_state_model();
        let p1 = model.psi(0.0, 0);
        let p2 = model.psi(0.0, 1);
        assert_eq!(p1.entries(), &dmatrix![1.0, -1.0; -1.0, 1.0]);
        assert_eq!(p2.entries(), &dmatrix![2.0, -2.0; -2.0, 2.0]);
    }

    #[test]
    fn psi_of_zero_generator_vanishes() {
        let model = ChainModel::constant(DMatrix::zeros(3, 3), 1.0).unwrap();
        assert_eq!(model.psi(0.5, 1).entries(), &DMatrix::zeros(3, 3));
    }

    #[test]
    fn seminorm_examples() {
        let model = two_state_model();
        let c = DVector::from_vec(vec![3.0, 1.0]);
        assert!((model.seminorm_sq(0.0, 0, &c) - 4.0).abs() < 1e-12);
        let ones = DVector::from_element(2, 7.5);
        assert!(model.seminorm_sq(0.3, 1, &ones).abs() < 1e-12);
        let zero = ChainModel::constant(DMatrix::zeros(2, 2), 1.0).unwrap();
        assert_eq!(zero.seminorm_sq(0.0, 0, &c), 0.0);
    }

    #[test]
    fn pseudoinverse_examples() {
        let q = dmatrix![1.0, -1.0; -1.0, 1.0];
        let p = pseudoinverse(&q).unwrap();
        let expected = dmatrix![0.25, -0.25; -0.25, 0.25];
        assert!((&p - &expected).abs().max() < 1e-12);

        let id = DMatrix::<f64>::identity(3, 3);
        assert!((pseudoinverse(&id).unwrap() - &id).abs().max() < 1e-12);

        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(pseudoinverse(&z).unwrap(), z);
    }

    #[test]
    fn pseudoinverse_rejects_asymmetric_input() {
        let q = dmatrix![1.0, 2.0; 0.0, 1.0];
        assert!(matches!(pseudoinverse(&q), Err(Error::NotSymmetric)));
    }

    #[test]
    fn assumption_margin_example() {
        let model = two_state_model();
        let margin = model.assumption_margin(0.2);
        assert!((margin - 0.4355877174692862).abs() < 1e-10, "margin = {margin}");
        assert!(margin < 1.0);
        assert_eq!(model.assumption_margin(0.0), 0.0);
        let zero = ChainModel::constant(DMatrix::zeros(2, 2), 1.0).unwrap();
        assert_eq!(zero.assumption_margin(0.7), 0.0);
    }

    #[test]
    fn zero_generator_path_never_jumps() {
        let model = ChainModel::constant(DMatrix::zeros(4, 4), 2.0).unwrap();
        let path = model.simulate_path(2, 7);
        assert!(path.jumps().is_empty());
        assert_eq!(path.state_at(1.3), 2);
    }

    #[test]
    fn equal_seeds_give_identical_paths() {
        let model = two_state_model();
        assert_eq!(model.simulate_path(0, 99), model.simulate_path(0, 99));
        // different seeds should (generically) differ
        let a = model.simulate_path(0, 1);
        let b = model.simulate_path(0, 2);
        assert!(a != b || a.jumps().is_empty());
    }

    #[test]
    fn increments_of_zero_generator_are_zero() {
        let model = ChainModel::constant(DMatrix::zeros(2, 2), 1.0).unwrap();
        let path = model.simulate_path(0, 3);
        let grid = model.build_grid(8);
        for inc in model.martingale_increments(&path, &grid).unwrap() {
            assert_eq!(inc, DVector::zeros(2));
        }
    }

    #[test]
    fn jump_free_cell_is_pure_compensator() {
        let model = two_state_model();
        let path = ChainPath::new(0, vec![], 1.0).unwrap();
        let grid = [0.0, 0.25];
        let inc = &model.martingale_increments(&path, &grid).unwrap()[0];
        // increment = -h * (column 0 of A)
        assert!((inc[0] - 0.25).abs() < 1e-15);
        assert!((inc[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn increments_telescope_to_full_interval() {
        let model = two_state_model();
        let path = model.simulate_path(1, 11);
        let fine = model.build_grid(64);
        let total: DVector<f64> = model
            .martingale_increments(&path, &fine)
            .unwrap()
            .into_iter()
            .fold(DVector::zeros(2), |acc, x| acc + x);
        let coarse = model.martingale_increments(&path, &[0.0, 1.0]).unwrap();
        assert!((total - &coarse[0]).abs().max() < 1e-12);
    }

    #[test]
    fn two_segment_schedule_integrates_exactly() {
        let a0 = dmatrix![-1.0, 1.0; 1.0, -1.0];
        let a1 = dmatrix![-3.0, 0.5; 3.0, -0.5];
        let model = ChainModel::new(2, vec![(0.0, a0), (0.5, a1)], 1.0).unwrap();
        let path = ChainPath::new(0, vec![], 1.0).unwrap();
        // one cell straddling the break: compensator = 0.5 * col0(a0) + 0.5 * col0(a1)
        let inc = &model.martingale_increments(&path, &[0.0, 1.0]).unwrap()[0];
        assert!((inc[0] - (0.5 + 1.5)).abs() < 1e-14);
        assert!((inc[1] + (0.5 + 1.5)).abs() < 1e-14);
    }

    #[test]
    fn grid_snaps_breaks_onto_nodes() {
        let a = DMatrix::<f64>::zeros(2, 2);
        let model = ChainModel::new(2, vec![(0.0, a.clone()), (0.3, a)], 1.0).unwrap();
        let grid = model.build_grid(10);
        assert!(grid.iter().any(|&t| t == 0.3));
        assert_eq!(*grid.last().unwrap(), 1.0);
    }

    #[test]
    fn forward_law_two_state_matches_closed_form() {
        let model = ChainModel::constant(dmatrix![-1.0, 1.0; 1.0, -1.0], 1.0).unwrap();
        let grid = model.build_grid(200);
        let law = model.forward_law(&unit_vector(2, 0), &grid).unwrap();
        let p2 = law.last().unwrap()[1];
        let exact = (1.0 - (-2.0_f64).exp()) / 2.0;
        assert!((p2 - exact).abs() < 1e-9, "p2 = {p2}, exact = {exact}");
    }
}
