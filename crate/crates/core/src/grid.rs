//! The method × parameter-setting grid every candidate image is indexed by.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const METHOD_COUNT: usize = 7;
pub const PARAM_COUNT: usize = 8;

pub type ImageId = u32;

/// Short labels used in leaderboards, in method-index order.
pub const METHOD_LABELS: [&str; METHOD_COUNT] = [
    "SD filter",
    "L0 smooth",
    "FGS",
    "TreeFilter",
    "WMF",
    "L1 smooth",
    "LLF",
];

/// Named settings of each classical filter for parameter indices 1..=8.
/// Kept for labelling; the filters themselves are not implemented here.
pub const PARAMETER_SETTINGS: [&[(&str, [f64; PARAM_COUNT])]; METHOD_COUNT] = [
    &[("lambda", [1.0, 5.0, 15.0, 30.0, 50.0, 70.0, 90.0, 110.0])],
    &[("lambda", [0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08])],
    &[
        ("sigma_c", [0.02, 0.02, 0.025, 0.025, 0.03, 0.03, 0.04, 0.04]),
        ("lambda", [400.0, 900.0, 600.0, 900.0, 500.0, 900.0, 400.0, 1200.0]),
    ],
    &[
        ("sigma", [0.05, 0.05, 0.1, 0.1, 0.2, 0.2, 0.4, 0.4]),
        ("sigma_s", [8.0, 4.0, 8.0, 4.0, 8.0, 4.0, 8.0, 4.0]),
    ],
    &[("sigma", [10.0, 30.0, 50.0, 70.0, 90.0, 110.0, 130.0, 150.0])],
    &[
        ("alpha", [10.0, 10.0, 20.0, 20.0, 100.0, 100.0, 200.0, 200.0]),
        ("theta", [200.0, 50.0, 200.0, 50.0, 200.0, 50.0, 200.0, 50.0]),
    ],
    &[
        ("sigma_r", [0.1, 0.1, 0.2, 0.2, 0.4, 0.4, 0.6, 0.6]),
        ("alpha", [2.0, 4.0, 2.0, 4.0, 2.0, 4.0, 2.0, 4.0]),
    ],
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("method index {0} outside 1..={METHOD_COUNT}")]
    Method(u32),
    #[error("parameter index {0} outside 1..={PARAM_COUNT}")]
    Param(u32),
}

/// One (method, parameter-setting) cell, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawChoice", into = "RawChoice")]
pub struct Choice {
    method: u8,
    param: u8,
}

#[derive(Serialize, Deserialize)]
struct RawChoice {
    method: u32,
    param: u32,
}

impl TryFrom<RawChoice> for Choice {
    type Error = GridError;
    fn try_from(r: RawChoice) -> Result<Self, GridError> {
        Choice::new(r.method, r.param)
    }
}

impl From<Choice> for RawChoice {
    fn from(c: Choice) -> Self {
        RawChoice {
            method: c.method as u32,
            param: c.param as u32,
        }
    }
}

impl Choice {
    pub fn new(method: u32, param: u32) -> Result<Self, GridError> {
        if !(1..=METHOD_COUNT as u32).contains(&method) {
            return Err(GridError::Method(method));
        }
        if !(1..=PARAM_COUNT as u32).contains(&param) {
            return Err(GridError::Param(param));
        }
        Ok(Self {
            method: method as u8,
            param: param as u8,
        })
    }

    pub fn method(self) -> u32 {
        self.method as u32
    }

    pub fn param(self) -> u32 {
        self.param as u32
    }

    /// Row-major position in a 7×8 table.
    pub fn index(self) -> usize {
        (self.method as usize - 1) * PARAM_COUNT + self.param as usize - 1
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < METHOD_COUNT * PARAM_COUNT);
        Self {
            method: (i / PARAM_COUNT + 1) as u8,
            param: (i % PARAM_COUNT + 1) as u8,
        }
    }

    pub fn all() -> impl Iterator<Item = Choice> {
        (0..METHOD_COUNT * PARAM_COUNT).map(Self::from_index)
    }

    /// File stem used by the dataset layout, e.g. `m6_p4`.
    pub fn stem(self) -> String {
        format!("m{}_p{}", self.method, self.param)
    }

    /// Human-readable setting, e.g. `alpha=20, theta=50`.
    pub fn setting_label(self) -> String {
        PARAMETER_SETTINGS[self.method as usize - 1]
            .iter()
            .map(|(name, values)| format!("{name}={}", values[self.param as usize - 1]))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

pub fn method_label(method: u32) -> &'static str {
    METHOD_LABELS[method as usize - 1]
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(m{}, p{})", self.method, self.param)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip_covers_grid() {
        let all: Vec<_> = Choice::all().collect();
        assert_eq!(all.len(), 56);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
        assert_eq!(all[0], Choice::new(1, 1).unwrap());
        assert_eq!(all[55], Choice::new(7, 8).unwrap());
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert_eq!(Choice::new(9, 1), Err(GridError::Method(9)));
        assert_eq!(Choice::new(0, 1), Err(GridError::Method(0)));
        assert_eq!(Choice::new(1, 9), Err(GridError::Param(9)));
        assert!(serde_json::from_str::<Choice>(r#"{"method":8,"param":1}"#).is_err());
    }

    #[test]
    fn labels() {
        let c = Choice::new(6, 4).unwrap();
        assert_eq!(c.stem(), "m6_p4");
        assert_eq!(c.setting_label(), "alpha=20, theta=50");
        assert_eq!(method_label(6), "L1 smooth");
    }
}
