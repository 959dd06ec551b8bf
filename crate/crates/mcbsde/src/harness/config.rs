//! Experiment configuration: one structured TOML file describing the model,
//! the data, solver and Monte Carlo knobs, and the suite selection.
//!
//! Matrices are nested row-major arrays. The full schema is documented in the
//! repository README; `configs/default.toml` ships the canonical example.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bsde::{Driver, Forcing, TerminalCondition};
use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::harness::report::SuiteId;
use crate::rbsde::Obstacle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub driver: DriverSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<ForcingSpec>,
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub obstacle: ObstacleSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub mc: McSpec,
    #[serde(default)]
    pub suite: SuiteSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub states: usize,
    pub horizon: f64,
    pub segments: Vec<SegmentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub start: f64,
    /// Row-major `states x states` rate matrix (column sums zero).
    pub rates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSpec {
    /// `zero` or `linear` (`a y + b ||z|| + offset_i(t)`).
    pub family: String,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_slopes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSpec {
    pub constants: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slopes: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSpec {
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    /// `none`, `constant`, `per-state` or `ramp`.
    pub family: String,
    #[serde(default)]
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    #[serde(default)]
    pub slope: f64,
}

impl Default for ObstacleSpec {
    fn default() -> Self {
        ObstacleSpec {
            family: "none".into(),
            level: 0.0,
            levels: None,
            slope: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub steps: usize,
    pub tol: f64,
    pub ladder_max_level: u32,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            steps: 256,
            tol: 1e-3,
            ladder_max_level: 12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSpec {
    pub paths: usize,
    pub seed: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            paths: 100_000,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSpec {
    /// Suites to run, in kebab-case; empty list runs nothing.
    pub run: Vec<String>,
    /// Initial state for simulations, 1-based.
    pub x0: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            run: SuiteId::all().iter().map(|s| s.name().to_string()).collect(),
            x0: 1,
        }
    }
}

/// The shipped default configuration.
pub fn shipped_default_toml() -> &'static str {
    include_str!("../../configs/default.toml")
}

/// A validated experiment built from a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: ChainModel,
    pub driver: Driver,
    /// `None` when the obstacle family is `none`: plain BSDE territory.
    pub obstacle: Option<Obstacle>,
    pub xi: TerminalCondition,
    pub solver: SolverSpec,
    pub mc: McSpec,
    pub suites: Vec<SuiteId>,
    /// 0-based initial state.
    pub x0: usize,
    /// The margin `c_z ||Psi+|| sqrt(6m)`; the comparison results need it
    /// below one.
    pub assumption_margin: f64,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn shipped_default() -> Self {
        ExperimentConfig::from_toml_str(shipped_default_toml())
            .expect("shipped default config must parse")
    }

    /// Validates everything and assembles solver-ready objects.
    pub fn build(&self) -> Result<Experiment> {
        let n = self.model.states;
        let mut schedule = Vec::with_capacity(self.model.segments.len());
        for seg in &self.model.segments {
            if seg.rates.len() != n || seg.rates.iter().any(|r| r.len() != n) {
                return Err(Error::Config(format!(
                    "segment rate matrix must be {n} x {n}"
                )));
            }
            let flat: Vec<f64> = seg.rates.iter().flatten().copied().collect();
            schedule.push((seg.start, DMatrix::from_row_slice(n, n, &flat)));
        }
        let model = ChainModel::new(n, schedule, self.model.horizon)?;

        let driver = self.build_driver(n)?;
        let xi = TerminalCondition::new(DVector::from_vec(self.terminal.xi.clone()))?;
        if xi.len() != n {
            return Err(Error::Config("terminal.xi length must equal states".into()));
        }
        let obstacle = self.build_obstacle(n)?;
        if let Some(ob) = &obstacle {
            ob.check_compatible(&xi, model.horizon())?;
        }

        let mut suites = Vec::new();
        for name in &self.suite.run {
            suites.push(
                name.parse::<SuiteId>()
                    .map_err(|_| Error::Config(format!("unknown suite `{name}`")))?,
            );
        }
        if self.suite.x0 == 0 || self.suite.x0 > n {
            return Err(Error::Config("suite.x0 must be a 1-based state index".into()));
        }
        if self.solver.steps == 0 {
            return Err(Error::Config("solver.steps must be positive".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::Config("solver.tol must be positive".into()));
        }
        if self.mc.paths == 0 {
            return Err(Error::Config("mc.paths must be positive".into()));
        }

        let assumption_margin = model.assumption_margin(driver.c_z());
        let mut warnings = Vec::new();
        if assumption_margin >= 1.0 {
            warnings.push(format!(
                "assumption margin {assumption_margin:.3} >= 1: comparison results need not hold"
            ));
        }
        Ok(Experiment {
            model,
            driver,
            obstacle,
            xi,
            solver: self.solver,
            mc: self.mc,
            suites,
            x0: self.suite.x0 - 1,
            assumption_margin,
            warnings,
        })
    }

    fn build_driver(&self, n: usize) -> Result<Driver> {
        let offsets = match (&self.driver.offsets, &self.driver.offset_slopes) {
            (None, None) => None,
            (c, s) => {
                let constants = c.clone().unwrap_or_else(|| vec![0.0; n]);
                let slopes = s.clone().unwrap_or_else(|| vec![0.0; n]);
                if constants.len() != n || slopes.len() != n {
                    return Err(Error::Config("driver offsets must have one entry per state".into()));
                }
                Some(Forcing::affine(
                    DVector::from_vec(constants),
                    DVector::from_vec(slopes),
                )?)
            }
        };
        let mut driver = match self.driver.family.as_str() {
            "zero" => Driver::zero(),
            "linear" => match offsets {
                Some(off) => Driver::linear_with_offset(self.driver.a, self.driver.b, off),
                None => Driver::linear(self.driver.a, self.driver.b),
            },
            other => return Err(Error::Config(format!("unknown driver family `{other}`"))),
        };
        if let Some(spec) = &self.forcing {
            if spec.constants.len() != n {
                return Err(Error::Config("forcing must have one entry per state".into()));
            }
            let slopes = spec.slopes.clone().unwrap_or_else(|| vec![0.0; n]);
            if slopes.len() != n {
                return Err(Error::Config("forcing slopes must have one entry per state".into()));
            }
            driver = driver.with_forcing(Forcing::affine(
                DVector::from_vec(spec.constants.clone()),
                DVector::from_vec(slopes),
            )?);
        }
        Ok(driver)
    }

    fn build_obstacle(&self, n: usize) -> Result<Option<Obstacle>> {
        match self.obstacle.family.as_str() {
            "none" => Ok(None),
            "constant" => Ok(Some(Obstacle::constant(self.obstacle.level))),
            "per-state" => {
                let levels = self
                    .obstacle
                    .levels
                    .clone()
                    .ok_or_else(|| Error::Config("per-state obstacle needs `levels`".into()))?;
                if levels.len() != n {
                    return Err(Error::Config("obstacle levels must have one entry per state".into()));
                }
                Ok(Some(Obstacle::ramp(
                    DVector::from_vec(levels),
                    0.0,
                    self.model.horizon,
                )))
            }
            "ramp" => {
                let levels = self
                    .obstacle
                    .levels
                    .clone()
                    .ok_or_else(|| Error::Config("ramp obstacle needs `levels`".into()))?;
                if levels.len() != n {
                    return Err(Error::Config("obstacle levels must have one entry per state".into()));
                }
                Ok(Some(Obstacle::ramp(
                    DVector::from_vec(levels),
                    self.obstacle.slope,
                    self.model.horizon,
                )))
            }
            other => Err(Error::Config(format!("unknown obstacle family `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_parses_and_builds() {
        let cfg = ExperimentConfig::shipped_default();
        let exp = cfg.build().unwrap();
        assert!(exp.assumption_margin < 1.0);
        assert!(exp.warnings.is_empty());
        assert_eq!(exp.suites.len(), SuiteId::all().len());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::shipped_default();
        let text = cfg.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        let mut cfg = ExperimentConfig::shipped_default();
        cfg.suite.run = vec!["nonsense".into()];
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_driver_family_is_a_config_error() {
        let mut cfg = ExperimentConfig::shipped_default();
        cfg.driver.family = "quadratic".into();
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn row_sum_convention_is_rejected_loudly() {
        let mut cfg = ExperimentConfig::shipped_default();
        // rows sum to zero here, columns do not
        cfg.model.segments[0].rates = vec![vec![-1.0, 1.0], vec![2.0, -2.0]];
        assert!(matches!(cfg.build(), Err(Error::BadColumnSum { .. })));
    }
}
