//! Random problem instances satisfying the standing hypotheses: Lipschitz
//! linear drivers with the `z`-coupling capped so the assumption margin stays
//! below one, valid rate matrices, compatible obstacles, and ordered data for
//! comparison pairs. Deterministic under the seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bsde::{Driver, Forcing, TerminalCondition};
use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::rbsde::{solve_penalized, Obstacle};

/// What the generator must produce.
#[derive(Debug, Clone)]
pub struct Constraints {
    /// Inclusive range of state counts.
    pub states: (usize, usize),
    /// Off-diagonal rates are uniform on `(0, rate_scale)`.
    pub rate_scale: f64,
    /// Demand an obstacle the solution actually touches.
    pub obstacle_active: bool,
    /// Requested `z`-coupling `b`; `None` samples one with margin below 0.9.
    pub z_coupling: Option<f64>,
    /// Use a two-segment schedule with a break at `T/2`.
    pub two_segments: bool,
    pub horizon: f64,
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints {
            states: (2, 5),
            rate_scale: 2.0,
            obstacle_active: false,
            z_coupling: None,
            two_segments: false,
            horizon: 1.0,
        }
    }
}

/// A generated problem: model, driver, obstacle and terminal data.
#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub model: ChainModel,
    pub driver: Driver,
    pub obstacle: Obstacle,
    pub xi: TerminalCondition,
    pub seed: u64,
}

pub(crate) fn random_rates<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    random_rates_in(rng, n, 0.0, scale)
}

/// Rate matrix with off-diagonal entries uniform on `(lo, hi)`; a positive
/// `lo` keeps the bracket density well conditioned.
pub(crate) fn random_rates_in<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for col in 0..n {
        let mut out = 0.0;
        for row in 0..n {
            if row == col {
                continue;
            }
            let r = lo + rng.random::<f64>() * (hi - lo);
            a[(row, col)] = r;
            out += r;
        }
        a[(col, col)] = -out;
    }
    a
}

/// Builds one instance satisfying the declared invariants.
pub fn generate_instance(seed: u64, constraints: &Constraints) -> Result<GeneratedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = constraints.states;
    if lo < 1 || hi < lo {
        return Err(Error::ConstraintUnsatisfiable(
            "state range must be nonempty".into(),
        ));
    }
    if !(constraints.rate_scale > 0.0) {
        return Err(Error::ConstraintUnsatisfiable(
            "rate scale must be positive".into(),
        ));
    }
    let n = rng.random_range(lo..=hi);
    let horizon = constraints.horizon;
    let schedule = if constraints.two_segments {
        vec![
            (0.0, random_rates(&mut rng, n, constraints.rate_scale)),
            (
                0.5 * horizon,
                random_rates(&mut rng, n, constraints.rate_scale),
            ),
        ]
    } else {
        vec![(0.0, random_rates(&mut rng, n, constraints.rate_scale))]
    };
    let model = ChainModel::new(n, schedule, horizon)?;

    let a = rng.random_range(-0.8..0.8);
    let margin_per_unit = model.assumption_margin(1.0);
    let b = match constraints.z_coupling {
        Some(b) => {
            if model.assumption_margin(b) >= 1.0 {
                return Err(Error::ConstraintUnsatisfiable(format!(
                    "z-coupling {b} gives margin {:.3} >= 1",
                    model.assumption_margin(b)
                )));
            }
            b
        }
        None => {
            if margin_per_unit == 0.0 {
                0.0
            } else {
                rng.random_range(0.1..1.0) * 0.9 / margin_per_unit
            }
        }
    };
    let offsets = Forcing::constant_per_state(DVector::from_fn(n, |_, _| {
        rng.random_range(-1.0..1.0)
    }));
    let driver = Driver::linear_with_offset(a, b, offsets);
    let xi = TerminalCondition::new(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .expect("finite terminal values");

    let obstacle = if constraints.obstacle_active {
        active_obstacle(&model, &driver, &xi, &mut rng)?
    } else {
        Obstacle::inactive()
    };

    Ok(GeneratedInstance {
        model,
        driver,
        obstacle,
        xi,
        seed,
    })
}

/// Ramp obstacle sitting just under the terminal value and rising backward in
/// time steeply enough to bind; verified on a coarse penalized solve, with
/// the slope doubled on failure.
fn active_obstacle<R: Rng>(
    model: &ChainModel,
    driver: &Driver,
    xi: &TerminalCondition,
    rng: &mut R,
) -> Result<Obstacle> {
    let n = model.n();
    let margin = 0.02 + rng.random::<f64>() * 0.05;
    let levels = DVector::from_fn(n, |i, _| xi.values()[i] - margin);

    // bound the backward velocity of the unreflected solution to pick a
    // slope that overtakes it
    let coarse = crate::bsde::solve_bsde(model, driver, xi, 64)?;
    let mut speed = 0.0_f64;
    for k in 0..coarse.n_nodes() - 1 {
        let dt = coarse.times()[k + 1] - coarse.times()[k];
        for i in 0..n {
            speed = speed.max(((coarse.value(k + 1, i) - coarse.value(k, i)) / dt).abs());
        }
    }
    let mut slope = 2.0 * speed + 0.5;
    for _ in 0..5 {
        let candidate = Obstacle::ramp(levels.clone(), slope, model.horizon());
        if candidate.check_compatible(xi, model.horizon()).is_ok() {
            let probe = solve_penalized(model, driver, &candidate, xi, 64, 64)?;
            if probe.k_intensity.max() > 0.0 {
                return Ok(candidate);
            }
        }
        slope *= 2.0;
    }
    Err(Error::ConstraintUnsatisfiable(
        "could not construct an active obstacle".into(),
    ))
}

/// A comparison pair: the base instance carries the smaller data `(f, xi_1)`;
/// the upper driver adds a nonnegative bump `delta_i(t)` and the upper
/// terminal adds a nonnegative `eta`. Both share the obstacle.
#[derive(Debug, Clone)]
pub struct ComparisonPair {
    pub base: GeneratedInstance,
    pub upper_driver: Driver,
    pub upper_xi: TerminalCondition,
}

pub fn generate_comparison_pair(seed: u64, constraints: &Constraints) -> Result<ComparisonPair> {
    let base = generate_instance(seed, constraints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00_D15E_A5E5);
    let n = base.model.n();
    let (a, b) = base
        .base_linear_coefficients()
        .expect("generator produces linear drivers");
    // delta_i(t) = c_i + s_i t with c_i > 0 and s_i >= 0 stays nonnegative
    let delta = Forcing::affine(
        DVector::from_fn(n, |_, _| rng.random_range(0.05..0.5)),
        DVector::from_fn(n, |_, _| rng.random_range(0.0..0.3)),
    )
    .expect("finite bump");
    let eta = DVector::from_fn(n, |_, _| rng.random_range(0.05..0.5));
    let upper_offsets = base
        .driver_offset()
        .map(|off| off.plus(&delta))
        .unwrap_or(delta);
    let upper_driver = Driver::linear_with_offset(a, b, upper_offsets);
    let upper_xi = TerminalCondition::new(base.xi.values() + eta).expect("finite terminal");
    Ok(ComparisonPair {
        base,
        upper_driver,
        upper_xi,
    })
}

impl GeneratedInstance {
    fn base_linear_coefficients(&self) -> Option<(f64, f64)> {
        self.driver.linear_coefficients()
    }

    fn driver_offset(&self) -> Option<Forcing> {
        // the generator always builds linear drivers whose offset is the
        // per-state constant field; recover it by evaluating at y = 0, z = 0
        let n = self.model.n();
        let z = DVector::zeros(n);
        let constants = DVector::from_fn(n, |i, _| self.driver.eval(&self.model, 0.0, 0.0, &z, i));
        let at_one = DVector::from_fn(n, |i, _| {
            self.driver
                .eval(&self.model, self.model.horizon(), 0.0, &z, i)
        });
        let slopes = (at_one - &constants) / self.model.horizon();
        Some(Forcing::affine(constants, slopes).expect("finite offsets"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_give_identical_instances() {
        let c = Constraints::default();
        let a = generate_instance(7, &c).unwrap();
        let b = generate_instance(7, &c).unwrap();
        assert_eq!(a.model.n(), b.model.n());
        assert_eq!(a.xi, b.xi);
        assert_eq!(
            a.model.rates_at(0.0).as_slice(),
            b.model.rates_at(0.0).as_slice()
        );
    }

    #[test]
    fn margins_stay_below_one() {
        let c = Constraints::default();
        for seed in 0..20 {
            let inst = generate_instance(seed, &c).unwrap();
            let margin = inst.model.assumption_margin(inst.driver.c_z());
            assert!(margin < 1.0, "seed {seed} margin {margin}");
        }
    }

    #[test]
    fn zero_coupling_gives_zero_margin() {
        let c = Constraints {
            z_coupling: Some(0.0),
            ..Constraints::default()
        };
        let inst = generate_instance(3, &c).unwrap();
        assert_eq!(inst.model.assumption_margin(inst.driver.c_z()), 0.0);
    }

    #[test]
    fn oversized_coupling_is_unsatisfiable() {
        let c = Constraints {
            z_coupling: Some(1.0e6),
            ..Constraints::default()
        };
        assert!(matches!(
            generate_instance(3, &c),
            Err(Error::ConstraintUnsatisfiable(_))
        ));
    }

    #[test]
    fn active_obstacle_constraint_is_respected() {
        let c = Constraints {
            obstacle_active: true,
            states: (2, 3),
            ..Constraints::default()
        };
        let inst = generate_instance(11, &c).unwrap();
        let sol = crate::rbsde::solve_rbsde(
            &inst.model,
            &inst.driver,
            &inst.obstacle,
            &inst.xi,
            128,
            1e-2,
        )
        .unwrap();
        assert!(sol.k_intensity().max() > 0.0, "obstacle never binds");
    }

    #[test]
    fn comparison_pair_orders_the_data() {
        let pair = generate_comparison_pair(5, &Constraints::default()).unwrap();
        let n = pair.base.model.n();
        for i in 0..n {
            assert!(pair.upper_xi.values()[i] >= pair.base.xi.values()[i]);
        }
        // driver bump is nonnegative along the horizon
        let z = DVector::zeros(n);
        for k in 0..=10 {
            let t = pair.base.model.horizon() * k as f64 / 10.0;
            for i in 0..n {
                let f = pair.base.driver.eval(&pair.base.model, t, 0.3, &z, i);
                let g = pair.upper_driver.eval(&pair.base.model, t, 0.3, &z, i);
                assert!(g >= f, "bump went negative at t={t}, state {i}");
            }
        }
    }
}
