//! Suite identifiers, check rows and the report they aggregate into.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One verification suite. Each maps to one check row in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteId {
    Seminorm,
    Pseudoinverse,
    BsdeOracle,
    Isometry,
    Bracket,
    StationaryObstacle,
    Monotonicity,
    Comparison,
    Estimate,
    ContinuousDependence,
    Skorokhod,
}

impl SuiteId {
    pub fn all() -> &'static [SuiteId] {
        use SuiteId::*;
        &[
            Seminorm,
            Pseudoinverse,
            BsdeOracle,
            Isometry,
            Bracket,
            StationaryObstacle,
            Monotonicity,
            Comparison,
            Estimate,
            ContinuousDependence,
            Skorokhod,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SuiteId::Seminorm => "seminorm",
            SuiteId::Pseudoinverse => "pseudoinverse",
            SuiteId::BsdeOracle => "bsde-oracle",
            SuiteId::Isometry => "isometry",
            SuiteId::Bracket => "bracket",
            SuiteId::StationaryObstacle => "stationary-obstacle",
            SuiteId::Monotonicity => "monotonicity",
            SuiteId::Comparison => "comparison",
            SuiteId::Estimate => "estimate",
            SuiteId::ContinuousDependence => "continuous-dependence",
            SuiteId::Skorokhod => "skorokhod",
        }
    }
}

impl fmt::Display for SuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteId::all()
            .iter()
            .copied()
            .find(|id| id.name() == s)
            .ok_or(())
    }
}

/// Direction of a check: the statistic must stay at or below / above the
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    AtMost,
    AtLeast,
}

impl Direction {
    pub fn symbol(&self) -> &'static str {
        match self {
            Direction::AtMost => "<=",
            Direction::AtLeast => ">=",
        }
    }

    pub fn holds(&self, statistic: f64, threshold: f64) -> bool {
        match self {
            Direction::AtMost => statistic <= threshold,
            Direction::AtLeast => statistic >= threshold,
        }
    }
}

/// One verified property with its measured statistic and pinned threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRow {
    pub suite: String,
    pub name: String,
    /// The mathematical result the check exercises.
    pub anchor: String,
    pub statistic: f64,
    pub threshold: f64,
    pub direction: Direction,
    pub pass: bool,
    /// Secondary numbers folded into the same check (controls, ratios).
    pub detail: String,
    pub seed: u64,
}

impl CheckRow {
    pub fn new(
        suite: SuiteId,
        name: &str,
        anchor: &str,
        statistic: f64,
        threshold: f64,
        direction: Direction,
        seed: u64,
    ) -> Self {
        CheckRow {
            suite: suite.name().to_string(),
            name: name.to_string(),
            anchor: anchor.to_string(),
            statistic,
            threshold,
            direction,
            pass: direction.holds(statistic, threshold),
            detail: String::new(),
            seed,
        }
    }

    pub fn with_detail(mut self, detail: String) -> Self {
        self.detail = detail;
        self
    }

    /// Marks the row failed regardless of the primary statistic (used when a
    /// folded secondary condition breaks).
    pub fn also_require(mut self, ok: bool) -> Self {
        self.pass = self.pass && ok;
        self
    }
}

/// Deterministic suite report: rows sorted by `(suite, seed, name)`, an
/// overall flag and the environment stamp. Contains no timestamps, so equal
/// configs and seeds produce byte-identical reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
    pub passed: bool,
    pub seed: u64,
    pub version: String,
}

impl SuiteReport {
    pub fn from_rows(mut rows: Vec<CheckRow>, seed: u64) -> Self {
        rows.sort_by(|a, b| {
            (a.suite.as_str(), a.seed, a.name.as_str())
                .cmp(&(b.suite.as_str(), b.seed, b.name.as_str()))
        });
        let passed = rows.iter().all(|r| r.pass);
        SuiteReport {
            rows,
            passed,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:<38} {:<28} {:>12}    {:<12} result\n",
            "suite", "check", "anchor", "statistic", "threshold"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<22} {:<38} {:<28} {:>12.4e} {} {:<9.4e} {}\n",
                row.suite,
                row.name,
                row.anchor,
                row.statistic,
                row.direction.symbol(),
                row.threshold,
                if row.pass { "pass" } else { "FAIL" }
            ));
            if !row.detail.is_empty() {
                out.push_str(&format!("{:<22}   {}\n", "", row.detail));
            }
        }
        out.push_str(&format!(
            "overall: {} ({} checks, seed {}, version {})\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.rows.len(),
            self.seed,
            self.version
        ));
        out
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_ids_round_trip_their_names() {
        for id in SuiteId::all() {
            assert_eq!(id.name().parse::<SuiteId>().unwrap(), *id);
        }
        assert!("bogus".parse::<SuiteId>().is_err());
    }

    #[test]
    fn rows_sort_and_aggregate() {
        let a = CheckRow::new(SuiteId::Seminorm, "x", "", 1.0, 2.0, Direction::AtMost, 1);
        let b = CheckRow::new(SuiteId::Bracket, "y", "", 5.0, 2.0, Direction::AtMost, 1);
        let report = SuiteReport::from_rows(vec![a, b], 1);
        assert_eq!(report.rows[0].suite, "bracket");
        assert!(!report.passed);
        assert!(report.text().contains("FAIL"));
    }

    #[test]
    fn also_require_can_only_tighten() {
        let row = CheckRow::new(SuiteId::Isometry, "z", "", 1.0, 2.0, Direction::AtMost, 0);
        assert!(row.pass);
        assert!(!row.clone().also_require(false).pass);
        assert!(row.also_require(true).pass);
    }
}
