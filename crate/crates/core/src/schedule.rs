//! Step-size and coefficient schedules indexed by the iteration counter.

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Coefficient sequence `k -> value`, `k = 0, 1, ...`.
///
/// In JSON a bare number is a constant, the strings `"harmonic"`,
/// `"anchor"` and `"sql_momentum"` name the fixed sequences, and
/// `{"scale": s, "exponent": e}` is `s (k+1)^-e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Repr", try_from = "Repr")]
pub enum Schedule {
    Constant(f64),
    /// `scale * (k+1)^-exponent`
    Power { scale: f64, exponent: f64 },
    /// `1/(k+1)`
    Harmonic,
    /// `1/(k+2)`
    Anchor,
    /// `(k-1)/(k+1)`, the momentum weight that turns the generalized
    /// speedy update into the classic one.
    SqlMomentum,
}

impl Schedule {
    pub fn power(exponent: f64) -> Self {
        Schedule::Power { scale: 1.0, exponent }
    }

    pub fn at(&self, k: usize) -> f64 {
        let kf = k as f64;
        match *self {
            Schedule::Constant(c) => c,
            Schedule::Power { scale, exponent } => scale * (kf + 1.0).powf(-exponent),
            Schedule::Harmonic => 1.0 / (kf + 1.0),
            Schedule::Anchor => 1.0 / (kf + 2.0),
            Schedule::SqlMomentum => (kf - 1.0) / (kf + 1.0),
        }
    }

    /// Decay exponent when the sequence behaves like `(k+1)^-e`; constants
    /// report 0 (or infinity for the zero sequence).
    pub fn decay_exponent(&self) -> Option<f64> {
        match *self {
            Schedule::Constant(c) if c == 0.0 => Some(f64::INFINITY),
            Schedule::Constant(_) => Some(0.0),
            Schedule::Power { scale, exponent } if scale > 0.0 => Some(exponent),
            Schedule::Power { .. } => None,
            Schedule::Harmonic | Schedule::Anchor => Some(1.0),
            Schedule::SqlMomentum => Some(0.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Number(f64),
    Named(String),
    Power { scale: f64, exponent: f64 },
}

impl From<Schedule> for Repr {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Constant(c) => Repr::Number(c),
            Schedule::Power { scale, exponent } => Repr::Power { scale, exponent },
            Schedule::Harmonic => Repr::Named("harmonic".into()),
            Schedule::Anchor => Repr::Named("anchor".into()),
            Schedule::SqlMomentum => Repr::Named("sql_momentum".into()),
        }
    }
}

impl TryFrom<Repr> for Schedule {
    type Error = Error;

    fn try_from(r: Repr) -> Result<Self, Error> {
        match r {
            Repr::Number(c) => Ok(Schedule::Constant(c)),
            Repr::Power { scale, exponent } => Ok(Schedule::Power { scale, exponent }),
            Repr::Named(name) => match name.as_str() {
                "harmonic" => Ok(Schedule::Harmonic),
                "anchor" => Ok(Schedule::Anchor),
                "sql_momentum" => Ok(Schedule::SqlMomentum),
                _ => Err(Error::UnknownName { kind: "schedule", name }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert_eq!(Schedule::Anchor.at(0), 0.5);
        assert_eq!(Schedule::Harmonic.at(1), 0.5);
        assert_eq!(Schedule::SqlMomentum.at(1), 0.0);
        assert_eq!(Schedule::power(0.5).at(3), 0.5);
    }

    #[test]
    fn json_forms() {
        let s: Schedule = serde_json::from_str("0.3").unwrap();
        assert_eq!(s, Schedule::Constant(0.3));
        let s: Schedule = serde_json::from_str("\"anchor\"").unwrap();
        assert_eq!(s, Schedule::Anchor);
        let s: Schedule = serde_json::from_str(r#"{"scale": 1.0, "exponent": 0.75}"#).unwrap();
        assert_eq!(s, Schedule::power(0.75));
        assert!(serde_json::from_str::<Schedule>("\"cosine\"").is_err());
        let back = serde_json::to_string(&Schedule::power(0.75)).unwrap();
        assert_eq!(serde_json::from_str::<Schedule>(&back).unwrap(), Schedule::power(0.75));
    }
}
