//! The verification suites. Each suite builds its canonical or generated
//! instances, measures one statistic against a pinned threshold, and folds
//! any secondary control into the same row. All randomness flows from the
//! config seed through named substreams, so a report is a pure function of
//! its config.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bsde::{solve_bsde, Driver, Forcing, TerminalCondition, ValueGrid};
use crate::chain::{pseudoinverse, unit_vector, ChainModel};
use crate::error::{Error, Result};
use crate::harness::config::{Experiment, ExperimentConfig};
use crate::harness::generate::{
    generate_comparison_pair, generate_instance, random_rates, random_rates_in, ComparisonPair,
    Constraints,
};
use crate::harness::oracle::matrix_exp;
use crate::harness::report::{CheckRow, Direction, SuiteId, SuiteReport};
use crate::montecarlo::{
    bracket_check, bracket_check_with, expectation_on_paths, isometry_check, substream_seed,
    CompensatorKind,
};
use crate::rbsde::{
    compare_rbsde, continuous_dependence_gap, k_on_path, skorokhod_residual, solve_rbsde_projected,
    solve_rbsde_with, LadderPolicy, Obstacle, RbsdeInstance, RbsdeSolution,
};

/// Runs the suites selected in the config and assembles the report.
/// Solver failures inside a suite are annotated with the instance seed.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    let exp = cfg.build()?;
    let mut rows = Vec::with_capacity(exp.suites.len());
    for suite in &exp.suites {
        rows.push(match suite {
            SuiteId::Seminorm => seminorm_suite(&exp),
            SuiteId::Pseudoinverse => pseudoinverse_suite(&exp),
            SuiteId::BsdeOracle => bsde_oracle_suite(&exp)?,
            SuiteId::Isometry => isometry_suite(&exp)?,
            SuiteId::Bracket => bracket_suite(&exp)?,
            SuiteId::StationaryObstacle => stationary_suite(&exp)?,
            SuiteId::Monotonicity => monotonicity_suite(&exp)?,
            SuiteId::Comparison => comparison_suite(&exp)?,
            SuiteId::Estimate => estimate_suite(&exp)?,
            SuiteId::ContinuousDependence => dependence_suite(&exp)?,
            SuiteId::Skorokhod => skorokhod_suite(&exp)?,
        });
    }
    Ok(SuiteReport::from_rows(rows, exp.mc.seed))
}

fn with_seed<T>(seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Config(format!("instance seed {seed}: {e}")))
}

fn two_state_symmetric() -> ChainModel {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
    ChainModel::constant(a, 1.0).expect("canonical model is valid")
}

fn start_state(exp: &Experiment, n: usize) -> usize {
    if exp.x0 < n {
        exp.x0
    } else {
        0
    }
}

/// f = -1, xi = c, G = c: the push must advance at unit speed.
fn stationary_instance(c: f64) -> (ChainModel, Driver, Obstacle, TerminalCondition) {
    let model = two_state_symmetric();
    let driver = Driver::linear_with_offset(0.0, 0.0, Forcing::uniform(2, -1.0));
    (
        model,
        driver,
        Obstacle::constant(c),
        TerminalCondition::constant(2, c),
    )
}

// --- semi-norm -----------------------------------------------------------

fn seminorm_suite(exp: &Experiment) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(exp.mc.seed, 1));
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let a = random_rates(&mut rng, n, 3.0);
        let model = ChainModel::constant(a.clone(), 1.0).expect("generated rates are valid");
        let state = rng.random_range(0..n);
        let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let quad = model.seminorm_sq(0.5, state, &c);
        let mut closed = 0.0;
        for j in 0..n {
            if j != state {
                let d = c[j] - c[state];
                closed += a[(j, state)] * d * d;
            }
        }
        worst = worst.max((quad - closed).abs() / (1.0 + quad.abs()));
    }
    CheckRow::new(
        SuiteId::Seminorm,
        "quadratic form matches closed form",
        "semi-norm of the bracket density",
        worst,
        1e-10,
        Direction::AtMost,
        exp.mc.seed,
    )
    .with_detail("200 random (A, state, C) probes".into())
}

// --- pseudoinverse --------------------------------------------------------

fn pinv_identity_defect(q: &DMatrix<f64>) -> f64 {
    let p = pseudoinverse(q).expect("symmetric input");
    let qp = q * &p;
    let pq = &p * q;
    let d1 = (&qp * q - q).abs().max();
    let d2 = (&pq * &p - &p).abs().max();
    let d3 = (qp.transpose() - &qp).abs().max();
    let d4 = (pq.transpose() - &pq).abs().max();
    d1.max(d2).max(d3).max(d4)
}

fn pseudoinverse_suite(exp: &Experiment) -> CheckRow {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(exp.mc.seed, 2));
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=5);
        // a rate floor keeps the nonzero spectrum of Psi away from the
        // pseudoinverse cutoff
        let a = random_rates_in(&mut rng, n, 0.05, 3.0);
        let model = ChainModel::constant(a, 1.0).expect("generated rates are valid");
        let state = rng.random_range(0..n);
        worst = worst.max(pinv_identity_defect(model.psi(0.0, state).entries()));
    }
    for _ in 0..100 {
        // symmetric PSD with a controlled spectrum: exact zeros mixed with
        // eigenvalues bounded away from zero
        let n = rng.random_range(2..=5);
        let basis = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
            .qr()
            .q();
        let spectrum = DVector::from_fn(n, |_, _| {
            if rng.random::<f64>() < 0.25 {
                0.0
            } else {
                rng.random_range(0.1..3.0)
            }
        });
        let q = &basis * DMatrix::from_diagonal(&spectrum) * basis.transpose();
        worst = worst.max(pinv_identity_defect(&q));
    }
    CheckRow::new(
        SuiteId::Pseudoinverse,
        "four defining identities",
        "Moore-Penrose pseudoinverse",
        worst,
        1e-8,
        Direction::AtMost,
        exp.mc.seed,
    )
    .with_detail("100 bracket densities + 100 random symmetric PSD matrices".into())
}

// --- BSDE oracle ----------------------------------------------------------

fn oracle_model() -> (ChainModel, DMatrix<f64>, TerminalCondition) {
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[-2.0, 1.0, 0.5, 1.5, -1.5, 0.5, 0.5, 0.5, -1.0],
    );
    let model = ChainModel::constant(a.clone(), 1.0).expect("oracle model is valid");
    let xi = TerminalCondition::new(DVector::from_vec(vec![1.0, -0.5, 2.0])).unwrap();
    (model, a, xi)
}

/// Sup-norm error of the zero-driver solve against `u(t) = exp(A'(T-t)) xi`,
/// propagated node to node with one exact exponential per step.
fn oracle_error(model: &ChainModel, a: &DMatrix<f64>, xi: &TerminalCondition, steps: usize) -> f64 {
    let sol = solve_bsde(model, &Driver::zero(), xi, steps).expect("zero driver solves");
    let times = sol.times();
    let h = times[1] - times[0];
    let step = matrix_exp(&(a.transpose() * h));
    let mut expected = xi.values().clone();
    let mut worst = 0.0_f64;
    for k in (0..times.len()).rev() {
        for i in 0..3 {
            worst = worst.max((sol.value(k, i) - expected[i]).abs());
        }
        if k > 0 {
            expected = &step * expected;
        }
    }
    worst
}

fn bsde_oracle_suite(exp: &Experiment) -> Result<CheckRow> {
    let (model, a, xi) = oracle_model();
    let err_full = oracle_error(&model, &a, &xi, 1000);
    let err_half = oracle_error(&model, &a, &xi, 500);
    let ratio = err_half / err_full;
    let fourth_order = (8.0..32.0).contains(&ratio);
    Ok(CheckRow::new(
        SuiteId::BsdeOracle,
        "matrix-exponential instance",
        "linear BSDE closed form",
        err_full,
        1e-6,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(fourth_order)
    .with_detail(format!(
        "halving the steps scales the error by {ratio:.1} (expect ~16)"
    )))
}

// --- Ito isometry ---------------------------------------------------------

fn isometry_suite(exp: &Experiment) -> Result<CheckRow> {
    let model = two_state_symmetric();
    let grid = model.build_grid(64);
    let x0 = start_state(exp, 2);
    let z = |_t: f64, _state: usize| DVector::from_vec(vec![1.0, 0.0]);
    let check = isometry_check(&model, z, x0, exp.mc.paths, &grid, exp.mc.seed)?;
    // for this field ||Z||^2 = 1 in both states, so the bracket side is T
    let exact = model.horizon();
    let rhs_ok =
        (check.rhs.mean - exact).abs() <= (4.0 * check.rhs.std_error).max(1e-12);
    Ok(CheckRow::new(
        SuiteId::Isometry,
        "squared integral vs bracket",
        "Ito isometry for the chain martingale",
        check.zscore,
        4.0,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(rhs_ok)
    .with_detail(format!(
        "lhs {:.5} +- {:.1e}, rhs {:.5} +- {:.1e}, exact {exact}",
        check.lhs.mean, check.lhs.std_error, check.rhs.mean, check.rhs.std_error
    )))
}

// --- bracket martingale ----------------------------------------------------

fn bracket_suite(exp: &Experiment) -> Result<CheckRow> {
    let model = two_state_symmetric();
    let grid = model.build_grid(64);
    let x0 = start_state(exp, 2);
    let clean = bracket_check(&model, x0, exp.mc.paths, &grid, exp.mc.seed)?;
    let biased = bracket_check_with(
        &model,
        x0,
        exp.mc.paths,
        &grid,
        exp.mc.seed,
        CompensatorKind::MissingTerm,
    )?;
    let control_ok = biased.max_zscore() >= 10.0;
    Ok(CheckRow::new(
        SuiteId::Bracket,
        "quadratic variation is compensated",
        "bracket martingale of the chain",
        clean.max_zscore(),
        4.0,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(control_ok)
    .with_detail(format!(
        "dropping one compensator term raises the max zscore to {:.1}",
        biased.max_zscore()
    )))
}

// --- stationary obstacle ----------------------------------------------------

fn interp_value(grid: &ValueGrid, t: f64, state: usize) -> f64 {
    let times = grid.times();
    match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(k) => grid.value(k, state),
        Err(0) => grid.value(0, state),
        Err(k) if k >= times.len() => grid.value(times.len() - 1, state),
        Err(k) => {
            let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
            grid.value(k - 1, state) * (1.0 - w) + grid.value(k, state) * w
        }
    }
}

fn stationary_suite(exp: &Experiment) -> Result<CheckRow> {
    let c = 1.0;
    let (model, driver, obstacle, xi) = stationary_instance(c);
    let policy = LadderPolicy {
        max_level: exp.solver.ladder_max_level,
        tol: Some(exp.solver.tol),
        max_rate_per_step: 1.0,
    };
    let sol = solve_rbsde_with(&model, &driver, &obstacle, &xi, exp.solver.steps, policy)?;
    let v_err = sol
        .values()
        .values()
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max((v - c).abs()));
    let mut k_err = 0.0_f64;
    for p in 0..3 {
        let path = model.simulate_path(0, substream_seed(exp.mc.seed, 40 + p));
        let kk = k_on_path(&sol, &path)?;
        for (idx, &t) in sol.values().times().iter().enumerate() {
            k_err = k_err.max((kk[idx] - t).abs());
        }
    }
    let projected = solve_rbsde_projected(&model, &driver, &obstacle, &xi, 2000)?;
    let mut agreement = 0.0_f64;
    for (k, &t) in projected.values().times().iter().enumerate() {
        for i in 0..2 {
            agreement = agreement
                .max((projected.values().value(k, i) - interp_value(sol.values(), t, i)).abs());
        }
    }
    Ok(CheckRow::new(
        SuiteId::StationaryObstacle,
        "pinned value, unit-speed push",
        "reflected stationary solution",
        v_err.max(k_err),
        1e-2,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(agreement <= 5e-2)
    .with_detail(format!(
        "value error {v_err:.2e}, push error {k_err:.2e}, projection agreement {agreement:.2e}, n_final {}",
        sol.n_final()
    )))
}

// --- penalization monotonicity ----------------------------------------------

fn monotonicity_suite(exp: &Experiment) -> Result<CheckRow> {
    let mut worst = 0.0_f64;
    let mut count = 0usize;
    let mut record = |sol: &RbsdeSolution| {
        for level in sol.ladder().iter().skip(1) {
            worst = worst.min(level.min_gap);
            count += 1;
        }
    };
    let c = 1.0;
    let (model, driver, obstacle, xi) = stationary_instance(c);
    let policy = LadderPolicy {
        max_level: exp.solver.ladder_max_level,
        tol: Some(exp.solver.tol),
        max_rate_per_step: 1.0,
    };
    record(&solve_rbsde_with(&model, &driver, &obstacle, &xi, exp.solver.steps, policy)?);
    // generated instances run the full fixed ladder: the check is about
    // level ordering, not convergence depth
    let fixed = LadderPolicy::fixed(10);
    for i in 0..8u64 {
        let seed = substream_seed(exp.mc.seed, 100 + i);
        let constraints = Constraints {
            obstacle_active: true,
            states: (2, 4),
            two_segments: i % 3 == 0,
            ..Constraints::default()
        };
        let inst = with_seed(seed, generate_instance(seed, &constraints))?;
        let sol = with_seed(
            seed,
            solve_rbsde_with(&inst.model, &inst.driver, &inst.obstacle, &inst.xi, 128, fixed),
        )?;
        record(&sol);
    }
    Ok(CheckRow::new(
        SuiteId::Monotonicity,
        "ladder levels never decrease",
        "penalized solutions increase to the reflection",
        worst,
        -1e-10,
        Direction::AtLeast,
        exp.mc.seed,
    )
    .with_detail(format!("{count} level transitions inspected")))
}

// --- comparison ---------------------------------------------------------------

fn solve_pair(
    pair: &ComparisonPair,
    steps: usize,
    policy: LadderPolicy,
) -> Result<(RbsdeSolution, RbsdeSolution)> {
    let lower = solve_rbsde_with(
        &pair.base.model,
        &pair.base.driver,
        &pair.base.obstacle,
        &pair.base.xi,
        steps,
        policy,
    )?;
    let upper = solve_rbsde_with(
        &pair.base.model,
        &pair.upper_driver,
        &pair.base.obstacle,
        &pair.upper_xi,
        steps,
        policy,
    )?;
    Ok((lower, upper))
}

fn comparison_suite(exp: &Experiment) -> Result<CheckRow> {
    let policy = LadderPolicy::fixed(6);
    let steps = 128;
    let mut worst_value = f64::INFINITY;
    let mut worst_k = f64::INFINITY;
    for i in 0..50u64 {
        let seed = substream_seed(exp.mc.seed, 200 + i);
        let constraints = Constraints {
            obstacle_active: i % 2 == 0,
            states: (2, 4),
            ..Constraints::default()
        };
        let pair = with_seed(seed, generate_comparison_pair(seed, &constraints))?;
        let (lower, upper) = with_seed(seed, solve_pair(&pair, steps, policy))?;
        let gaps = compare_rbsde(&lower, &upper)?;
        worst_value = worst_value.min(gaps.min_value_gap);
        worst_k = worst_k.min(gaps.min_k_gap);
    }
    // control: invert the terminal ordering and expect a clear violation
    let seed = substream_seed(exp.mc.seed, 299);
    let pair = with_seed(
        seed,
        generate_comparison_pair(
            seed,
            &Constraints {
                states: (2, 3),
                ..Constraints::default()
            },
        ),
    )?;
    let inverted_xi =
        TerminalCondition::new(pair.base.xi.values() + DVector::from_element(pair.base.model.n(), 0.5))
            .expect("finite");
    let inverted = ComparisonPair {
        base: crate::harness::generate::GeneratedInstance {
            xi: inverted_xi,
            ..pair.base.clone()
        },
        upper_driver: pair.base.driver.clone(),
        upper_xi: pair.base.xi.clone(),
    };
    let (lower, upper) = with_seed(seed, solve_pair(&inverted, steps, policy))?;
    let control = compare_rbsde(&lower, &upper)?;
    let control_ok = control.min_value_gap < -1e-6;
    Ok(CheckRow::new(
        SuiteId::Comparison,
        "ordered data orders values and pushes",
        "reflected comparison theorem",
        worst_value.min(worst_k),
        -1e-6,
        Direction::AtLeast,
        exp.mc.seed,
    )
    .also_require(control_ok)
    .with_detail(format!(
        "50 pairs: min value gap {worst_value:.2e}, min push gap {worst_k:.2e}; inverted control gap {:.2e}",
        control.min_value_gap
    )))
}

// --- a priori estimate ----------------------------------------------------------

fn int_e_seminorm(model: &ChainModel, grid: &ValueGrid, law: &[DVector<f64>]) -> f64 {
    let times = grid.times();
    let mut values = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let z = grid.node_values(k);
        let mut e = 0.0;
        for i in 0..model.n() {
            e += law[k][i] * model.seminorm_sq(times[k], i, &z);
        }
        values.push(e);
    }
    let mut acc = 0.0;
    for k in 0..times.len() - 1 {
        acc += 0.5 * (times[k + 1] - times[k]) * (values[k] + values[k + 1]);
    }
    acc
}

struct EstimateSides {
    lhs: f64,
    rhs: f64,
}

/// Both sides of the a priori bound for one reflected instance.
fn estimate_sides(
    model: &ChainModel,
    driver: &Driver,
    obstacle: &Obstacle,
    xi: &TerminalCondition,
    x0: usize,
    paths: usize,
    seed: u64,
) -> Result<EstimateSides> {
    let sol = solve_rbsde_with(model, driver, obstacle, xi, 256, LadderPolicy::fixed(8))?;
    let times = sol.values().times().to_vec();
    let law = model.forward_law(&unit_vector(model.n(), x0), &times)?;

    let sup_v = {
        let values = sol.values();
        expectation_on_paths(
            model,
            |path| {
                let mut sup = 0.0_f64;
                for (k, &t) in times.iter().enumerate() {
                    let v = values.value(k, path.state_at(t));
                    sup = sup.max(v * v);
                }
                sup
            },
            x0,
            paths,
            seed,
        )
        .mean
    };
    let int_z = int_e_seminorm(model, sol.values(), &law);
    let k_t_sq = expectation_on_paths(
        model,
        |path| {
            let kk = k_on_path(&sol, path).expect("horizons match");
            let last = kk[kk.len() - 1];
            last * last
        },
        x0,
        paths,
        seed,
    )
    .mean;
    let lhs = sup_v + int_z + k_t_sq;

    let e_xi_sq: f64 = (0..model.n())
        .map(|i| law[times.len() - 1][i] * xi.values()[i] * xi.values()[i])
        .sum();
    let mut sup_g_plus_sq = 0.0_f64;
    for &t in &times {
        for i in 0..model.n() {
            let g = obstacle.eval(t, i).max(0.0);
            sup_g_plus_sq = sup_g_plus_sq.max(g * g);
        }
    }
    let f0_sq = expectation_on_paths(
        model,
        |path| {
            let mut acc = 0.0;
            for w in times.windows(2) {
                for (a, b, st) in model.pieces(path, w[0], w[1]) {
                    // left-node quadrature of |f(t, 0, 0)| along the path
                    acc += (b - a) * driver.zero_level(model, a, st).abs();
                }
            }
            acc * acc
        },
        x0,
        paths,
        seed,
    )
    .mean;
    Ok(EstimateSides {
        lhs,
        rhs: e_xi_sq + sup_g_plus_sq + f0_sq,
    })
}

fn estimate_suite(exp: &Experiment) -> Result<CheckRow> {
    let model = two_state_symmetric();
    let x0 = start_state(exp, 2);
    // zero data: the solution and the push must vanish identically
    let zero_sol = solve_rbsde_with(
        &model,
        &Driver::linear(-0.2, 0.1),
        &Obstacle::constant(-0.3),
        &TerminalCondition::constant(2, 0.0),
        128,
        LadderPolicy::fixed(6),
    )?;
    let zero_v = zero_sol.values().sup_abs();
    let zero_k = zero_sol.k_intensity().abs().max();
    let zero_ok = zero_v <= 1e-12 && zero_k <= 1e-12;

    // scaling: all data scaled by lambda scales the solution linearly, so
    // the two sides of the bound keep a stable ratio
    let xi0 = DVector::from_vec(vec![0.8, -0.4]);
    let offsets = Forcing::constant_per_state(DVector::from_vec(vec![0.6, 0.3]));
    let levels = DVector::from_vec(vec![0.75, -0.45]);
    let mut ratios = Vec::new();
    for &lambda in &[1.0, 1e-1, 1e-2] {
        let driver = Driver::linear_with_offset(-0.5, 0.1, offsets.scaled(lambda));
        let xi = TerminalCondition::new(&xi0 * lambda).unwrap();
        let obstacle = Obstacle::ramp(&levels * lambda, 2.0 * lambda, model.horizon());
        let sides = estimate_sides(
            &model,
            &driver,
            &obstacle,
            &xi,
            x0,
            512,
            substream_seed(exp.mc.seed, 50),
        )?;
        ratios.push(sides.lhs / sides.rhs);
    }
    let spread = ratios.iter().fold(0.0_f64, |a, &r| a.max(r))
        / ratios.iter().fold(f64::INFINITY, |a, &r| a.min(r));
    Ok(CheckRow::new(
        SuiteId::Estimate,
        "bounded data bounds the solution",
        "a priori estimate for reflected solutions",
        spread,
        10.0,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(zero_ok)
    .with_detail(format!(
        "zero data: |V| <= {zero_v:.1e}, |k| <= {zero_k:.1e}; ratios at lambda 1, 0.1, 0.01: {:.3}, {:.3}, {:.3}",
        ratios[0], ratios[1], ratios[2]
    )))
}

// --- continuous dependence --------------------------------------------------------

fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(ly.iter()) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

fn dependence_suite(exp: &Experiment) -> Result<CheckRow> {
    let model = two_state_symmetric();
    let x0 = start_state(exp, 2);
    let eps_sweep = [1e-1, 1e-2, 1e-3, 1e-4];
    let seed = substream_seed(exp.mc.seed, 60);

    // terminal perturbation of a linear instance: quadratic response
    let base = RbsdeInstance {
        driver: Driver::linear(-0.3, 0.1),
        obstacle: Obstacle::inactive(),
        xi: TerminalCondition::new(DVector::from_vec(vec![0.5, -0.2])).unwrap(),
    };
    let mut lhs_values = Vec::new();
    for &eps in &eps_sweep {
        let perturbed = RbsdeInstance {
            driver: base.driver.clone(),
            obstacle: base.obstacle.clone(),
            xi: TerminalCondition::new(
                base.xi.values() + DVector::from_element(2, eps),
            )
            .unwrap(),
        };
        let gap = continuous_dependence_gap(
            &model,
            &base,
            &perturbed,
            128,
            LadderPolicy::fixed(4),
            x0,
            128,
            seed,
        )?;
        lhs_values.push(gap.lhs());
    }
    let slope = loglog_slope(&eps_sweep, &lhs_values);

    // joint (xi, phi, G) perturbation of an active-obstacle instance:
    // the two sides keep a stable ratio across the sweep
    let xi_a = DVector::from_vec(vec![0.8, -0.4]);
    let active = RbsdeInstance {
        driver: Driver::linear_with_offset(
            -0.4,
            0.1,
            Forcing::constant_per_state(DVector::from_vec(vec![0.5, 0.2])),
        ),
        obstacle: Obstacle::ramp(DVector::from_vec(vec![0.7, -0.5]), 2.5, model.horizon()),
        xi: TerminalCondition::new(xi_a.clone()).unwrap(),
    };
    let dxi = DVector::from_vec(vec![0.4, 0.2]);
    let mut ratios = Vec::new();
    for &eps in &eps_sweep {
        let bump = Forcing::affine(
            DVector::from_element(2, 0.3 * eps),
            DVector::from_element(2, -0.3 * eps / model.horizon()),
        )
        .unwrap();
        let perturbed = RbsdeInstance {
            driver: active
                .driver
                .clone()
                .with_forcing(Forcing::constant_per_state(
                    DVector::from_vec(vec![0.3, 0.5]) * eps,
                )),
            obstacle: active.obstacle.shifted(bump),
            xi: TerminalCondition::new(&xi_a + &dxi * eps).unwrap(),
        };
        let gap = continuous_dependence_gap(
            &model,
            &active,
            &perturbed,
            128,
            LadderPolicy::fixed(5),
            x0,
            128,
            seed,
        )?;
        ratios.push(gap.ratio());
    }
    let spread = ratios.iter().fold(0.0_f64, |a, &r| a.max(r))
        / ratios.iter().fold(f64::INFINITY, |a, &r| a.min(r));
    Ok(CheckRow::new(
        SuiteId::ContinuousDependence,
        "perturbation response is quadratic and bounded",
        "continuous dependence on the data",
        (slope - 2.0).abs(),
        0.1,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(spread < 10.0)
    .with_detail(format!(
        "log-log slope {slope:.3}; joint-sweep ratio spread {spread:.2}"
    )))
}

// --- Skorokhod condition ------------------------------------------------------------

fn skorokhod_ratio(sol: &RbsdeSolution, obstacle: &Obstacle) -> f64 {
    let residual = skorokhod_residual(sol, obstacle);
    let k_t = sol
        .cumulative_k()
        .row(sol.values().n_nodes() - 1)
        .iter()
        .fold(0.0_f64, |a, &x| a.max(x));
    let budget = 1e-3 * (1.0 + sol.values().sup_abs() * k_t);
    residual / budget
}

fn skorokhod_suite(exp: &Experiment) -> Result<CheckRow> {
    let c = 1.0;
    let (model, driver, obstacle, xi) = stationary_instance(c);
    let policy = LadderPolicy {
        max_level: exp.solver.ladder_max_level,
        tol: Some(exp.solver.tol),
        max_rate_per_step: 1.0,
    };
    let mut worst = 0.0_f64;
    let penalized = solve_rbsde_with(&model, &driver, &obstacle, &xi, exp.solver.steps, policy)?;
    worst = worst.max(skorokhod_ratio(&penalized, &obstacle));
    let projected = solve_rbsde_projected(&model, &driver, &obstacle, &xi, 1024)?;
    worst = worst.max(skorokhod_ratio(&projected, &obstacle));
    for i in 0..4u64 {
        let seed = substream_seed(exp.mc.seed, 300 + i);
        let constraints = Constraints {
            obstacle_active: true,
            states: (2, 4),
            ..Constraints::default()
        };
        let inst = with_seed(seed, generate_instance(seed, &constraints))?;
        let sol = with_seed(
            seed,
            solve_rbsde_projected(&inst.model, &inst.driver, &inst.obstacle, &inst.xi, 1024),
        )?;
        worst = worst.max(skorokhod_ratio(&sol, &inst.obstacle));
    }
    // control: shifting the obstacle after solving breaks complementarity
    let raised = obstacle.shifted(Forcing::uniform(2, 1.0));
    let control = skorokhod_ratio(&projected, &raised);
    Ok(CheckRow::new(
        SuiteId::Skorokhod,
        "push acts only on the contact set",
        "Skorokhod complementarity",
        worst,
        1.0,
        Direction::AtMost,
        exp.mc.seed,
    )
    .also_require(control > 1.0)
    .with_detail(format!(
        "corrupted-obstacle control ratio {control:.1} (must exceed 1)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::shipped_default();
        cfg.mc.paths = 2000;
        cfg.suite.run = vec!["seminorm".into(), "pseudoinverse".into()];
        cfg
    }

    #[test]
    fn empty_selection_passes_with_zero_rows() {
        let mut cfg = ExperimentConfig::shipped_default();
        cfg.suite.run = vec![];
        let report = run_suite(&cfg).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.passed);
    }

    #[test]
    fn reports_are_deterministic() {
        let cfg = quick_config();
        let a = run_suite(&cfg).unwrap();
        let b = run_suite(&cfg).unwrap();
        assert_eq!(a.json(), b.json());
    }

    #[test]
    fn algebra_suites_pass_quickly() {
        let report = run_suite(&quick_config()).unwrap();
        assert!(report.passed, "{}", report.text());
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn loglog_slope_recovers_quadratic() {
        let xs = [1e-1, 1e-2, 1e-3];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }
}
