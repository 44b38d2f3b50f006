//! Shared configuration vocabulary for the four learners.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Kcfd,
    Ucfd,
    Kcdd,
    Ucdd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Kcfd, Algorithm::Ucfd, Algorithm::Kcdd, Algorithm::Ucdd];

    pub fn known_dynamics(self) -> bool {
        matches!(self, Algorithm::Kcfd | Algorithm::Kcdd)
    }

    pub fn context_free(self) -> bool {
        matches!(self, Algorithm::Kcfd | Algorithm::Ucfd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Algorithm::Kcfd => "kcfd",
            Algorithm::Ucfd => "ucfd",
            Algorithm::Kcdd => "kcdd",
            Algorithm::Ucdd => "ucdd",
        };
        f.write_str(name)
    }
}

impl FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kcfd" => Ok(Algorithm::Kcfd),
            "ucfd" => Ok(Algorithm::Ucfd),
            "kcdd" => Ok(Algorithm::Kcdd),
            "ucdd" => Ok(Algorithm::Ucdd),
            other => Err(LabError::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// A tunable learner parameter: the theoretical setting, an explicit
/// value, or the theoretical setting times a factor.
///
/// In JSON: `"default"`, `{"value": 0.1}` or `{"scaled": 50}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    #[default]
    Default,
    Value(f64),
    Scaled(f64),
}

impl Param {
    pub fn resolve(self, theoretical: f64) -> f64 {
        match self {
            Param::Default => theoretical,
            Param::Value(v) => v,
            Param::Scaled(k) => k * theoretical,
        }
    }
}

/// `|S|`, `|A|` and `H` as they enter the parameter formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sizes {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
}

impl Sizes {
    pub fn of(layout: &crate::mdp::Layout) -> Self {
        Self {
            states: layout.n_states(),
            actions: layout.n_actions(),
            horizon: layout.horizon(),
        }
    }

    pub(crate) fn s(&self) -> f64 {
        self.states as f64
    }

    pub(crate) fn a(&self) -> f64 {
        self.actions as f64
    }

    pub(crate) fn h(&self) -> f64 {
        self.horizon as f64
    }
}

pub(crate) fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(LabError::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_json_forms() {
        let p: Param = serde_json::from_str(r#""default""#).unwrap();
        assert_eq!(p.resolve(0.3), 0.3);
        let p: Param = serde_json::from_str(r#"{"value":0.1}"#).unwrap();
        assert_eq!(p.resolve(0.3), 0.1);
        let p: Param = serde_json::from_str(r#"{"scaled":10}"#).unwrap();
        assert!((p.resolve(0.03) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert!("xyz".parse::<Algorithm>().is_err());
    }
}
