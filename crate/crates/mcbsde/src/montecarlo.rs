//! Seeded path-sampling statistics.
//!
//! Every estimator draws one ChaCha substream per path, derived from
//! `(seed, path index)`, so parallel and serial runs produce identical
//! results. Reductions run in fixed path order with compensated summation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chain::{ChainModel, ChainPath};
use crate::error::{Error, Result};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Substream seed for path `index` under the master `seed`.
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub(crate) fn substream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, index))
}

/// Neumaier compensated sum in slice order.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Mean and standard error of a fixed-seed sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub n_paths: usize,
    pub mean: f64,
    /// Sample standard deviation divided by `sqrt(n_paths)`.
    pub std_error: f64,
    pub seed: u64,
}

impl SampleStats {
    pub(crate) fn from_samples(values: &[f64], seed: u64) -> SampleStats {
        let n = values.len();
        assert!(n > 0, "statistics need at least one sample");
        let mean = compensated_sum(values) / n as f64;
        let std_error = if n > 1 {
            let devs: Vec<f64> = values.iter().map(|&x| (x - mean) * (x - mean)).collect();
            let var = compensated_sum(&devs) / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        SampleStats {
            n_paths: n,
            mean,
            std_error,
            seed,
        }
    }
}

/// Maps a functional over `n_paths` simulated paths, one substream each, and
/// collects the values in path order.
fn map_paths<T, F>(model: &ChainModel, x0: usize, n_paths: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&ChainPath) -> T + Sync,
{
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream_rng(seed, i as u64);
            let path = model.simulate_path_with(x0, &mut rng);
            f(&path)
        })
        .collect()
}

/// Monte Carlo mean of a path functional. Deterministic under the seed.
pub fn expectation_on_paths<F>(
    model: &ChainModel,
    functional: F,
    x0: usize,
    n_paths: usize,
    seed: u64,
) -> SampleStats
where
    F: Fn(&ChainPath) -> f64 + Sync,
{
    let values = map_paths(model, x0, n_paths, seed, functional);
    SampleStats::from_samples(&values, seed)
}

/// Both sides of the isometry `E[(int Z' dM)^2] = E[int ||Z||^2_{X_u} du]`
/// estimated on common paths.
#[derive(Debug, Clone)]
pub struct IsometryCheck {
    pub lhs: SampleStats,
    pub rhs: SampleStats,
    /// `|lhs - rhs|` in combined standard errors; `0` when both sides agree
    /// exactly.
    pub zscore: f64,
}

fn zscore(diff: f64, se1: f64, se2: f64) -> f64 {
    let se = (se1 * se1 + se2 * se2).sqrt();
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / se
    }
}

/// Estimates both sides of the isometry for the integrand field
/// `z_field(t, state)`, evaluated at the left node of each grid cell
/// (predictable integrand). Jump contributions enter through the exact
/// martingale increments; the bracket side integrates `Z' Psi Z` with the
/// running state, split exactly at jumps and schedule breaks.
pub fn isometry_check<Z>(
    model: &ChainModel,
    z_field: Z,
    x0: usize,
    n_paths: usize,
    grid: &[f64],
    seed: u64,
) -> Result<IsometryCheck>
where
    Z: Fn(f64, usize) -> DVector<f64> + Sync,
{
    model.check_grid(grid)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let pairs: Vec<(f64, f64)> = map_paths(model, x0, n_paths, seed, |path| {
        let increments = model
            .martingale_increments(path, grid)
            .expect("grid validated");
        let mut integral = 0.0;
        let mut bracket = 0.0;
        for (k, inc) in increments.iter().enumerate() {
            let zk = z_field(grid[k], path.state_at(grid[k]));
            integral += zk.dot(inc);
            for (a, b, st) in model.pieces(path, grid[k], grid[k + 1]) {
                bracket += (b - a) * model.seminorm_sq(0.5 * (a + b), st, &zk);
            }
        }
        (integral * integral, bracket)
    });
    let squares: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let brackets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let lhs = SampleStats::from_samples(&squares, seed);
    let rhs = SampleStats::from_samples(&brackets, seed);
    let z = zscore(lhs.mean - rhs.mean, lhs.std_error, rhs.std_error);
    Ok(IsometryCheck { lhs, rhs, zscore: z })
}

/// Which bracket compensator to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompensatorKind {
    /// The full density `diag(A x) - diag(x) A' - A diag(x)`.
    Full,
    /// Deliberately biased control: drops the `A diag(x)` term.
    MissingTerm,
}

/// Entrywise statistics of `[X,X]_T - <X,X>_T` over the sample.
#[derive(Debug, Clone)]
pub struct BracketCheck {
    pub mean: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    pub zscores: DMatrix<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

impl BracketCheck {
    pub fn max_zscore(&self) -> f64 {
        self.zscores.iter().fold(0.0_f64, |acc, &z| acc.max(z))
    }
}

/// Means of the matrix martingale `[X,X]_T - <X,X>_T` entry by entry; all
/// zscores stay small when the compensator density is correct.
pub fn bracket_check(
    model: &ChainModel,
    x0: usize,
    n_paths: usize,
    grid: &[f64],
    seed: u64,
) -> Result<BracketCheck> {
    bracket_check_with(model, x0, n_paths, grid, seed, CompensatorKind::Full)
}

pub fn bracket_check_with(
    model: &ChainModel,
    x0: usize,
    n_paths: usize,
    grid: &[f64],
    seed: u64,
    kind: CompensatorKind,
) -> Result<BracketCheck> {
    model.check_grid(grid)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let n = model.n();
    let samples: Vec<DMatrix<f64>> = map_paths(model, x0, n_paths, seed, |path| {
        let mut l = DMatrix::zeros(n, n);
        // optional quadratic variation: sum of dX dX' over jumps
        let mut prev = path.x0();
        for &(_, next) in path.jumps() {
            l[(next, next)] += 1.0;
            l[(prev, prev)] += 1.0;
            l[(next, prev)] -= 1.0;
            l[(prev, next)] -= 1.0;
            prev = next;
        }
        // predictable bracket, integrated exactly piece by piece
        for w in grid.windows(2) {
            for (a, b, st) in model.pieces(path, w[0], w[1]) {
                let len = b - a;
                let mid = 0.5 * (a + b);
                match kind {
                    CompensatorKind::Full => {
                        let psi = model.psi(mid, st);
                        l -= psi.entries() * len;
                    }
                    CompensatorKind::MissingTerm => {
                        let rates = model.rates_at(mid);
                        for j in 0..n {
                            l[(j, j)] -= len * rates[(j, st)];
                        }
                        for col in 0..n {
                            l[(st, col)] += len * rates[(col, st)];
                        }
                    }
                }
            }
        }
        l
    });
    let mut mean = DMatrix::zeros(n, n);
    let mut std_error = DMatrix::zeros(n, n);
    let mut zscores = DMatrix::zeros(n, n);
    let mut buf = vec![0.0_f64; n_paths];
    for i in 0..n {
        for j in 0..n {
            for (k, s) in samples.iter().enumerate() {
                buf[k] = s[(i, j)];
            }
            let stats = SampleStats::from_samples(&buf, seed);
            mean[(i, j)] = stats.mean;
            std_error[(i, j)] = stats.std_error;
            zscores[(i, j)] = zscore(stats.mean, stats.std_error, 0.0);
        }
    }
    Ok(BracketCheck {
        mean,
        std_error,
        zscores,
        n_paths,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn symmetric_model() -> ChainModel {
        ChainModel::constant(dmatrix![-1.0, 1.0; 1.0, -1.0], 1.0).unwrap()
    }

    #[test]
    fn constant_functional_has_zero_error() {
        let model = symmetric_model();
        let stats = expectation_on_paths(&model, |_| 1.0, 0, 100, 7);
        assert_eq!(stats.mean, 1.0);
        assert_eq!(stats.std_error, 0.0);
    }

    #[test]
    fn fixed_seed_reproduces_statistics_bitwise() {
        let model = symmetric_model();
        let f = |p: &ChainPath| p.jumps().len() as f64;
        let a = expectation_on_paths(&model, f, 0, 500, 11);
        let b = expectation_on_paths(&model, f, 0, 500, 11);
        assert_eq!(a, b);
    }

    #[test]
    fn ones_integrand_gives_exact_zero_on_both_sides() {
        let model = symmetric_model();
        let grid = model.build_grid(16);
        let check = isometry_check(
            &model,
            |_, _| DVector::from_element(2, 1.0),
            0,
            200,
            &grid,
            3,
        )
        .unwrap();
        // ||1||_{X_t} = 0 and 1' dM sums the conserved mass
        assert!(check.rhs.mean.abs() < 1e-15);
        assert!(check.lhs.mean.abs() < 1e-24, "lhs = {}", check.lhs.mean);
        assert!(check.zscore <= 4.0);
    }

    #[test]
    fn zero_integrand_is_trivially_isometric() {
        let model = symmetric_model();
        let grid = model.build_grid(8);
        let check =
            isometry_check(&model, |_, _| DVector::zeros(2), 0, 50, &grid, 3).unwrap();
        assert_eq!(check.lhs.mean, 0.0);
        assert_eq!(check.rhs.mean, 0.0);
        assert_eq!(check.zscore, 0.0);
    }

    #[test]
    fn zero_generator_bracket_vanishes_exactly() {
        let model = ChainModel::constant(DMatrix::zeros(2, 2), 1.0).unwrap();
        let grid = model.build_grid(4);
        let check = bracket_check(&model, 0, 50, &grid, 9).unwrap();
        assert_eq!(check.mean, DMatrix::zeros(2, 2));
        assert_eq!(check.max_zscore(), 0.0);
    }

    #[test]
    fn substreams_differ_across_paths() {
        assert_ne!(substream_seed(1, 0), substream_seed(1, 1));
        assert_ne!(substream_seed(1, 0), substream_seed(2, 0));
    }
}
