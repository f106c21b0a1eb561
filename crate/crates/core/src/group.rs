use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};

/// Smallest and largest isotropic scale factor accepted by scaling actions.
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupAction {
    /// Counterclockwise rotation of filter content by `tau` radians, `tau` in `[-pi, pi)`.
    Rotation,
    /// Isotropic scaling of the Gaussian scale `sigma -> tau * sigma`, `tau` in `[0.8, 1.5]`.
    Scaling,
    /// Rotation followed by scaling; parameters `[angle, scale]`.
    RotationScaling,
}

impl GroupAction {
    pub fn param_count(self) -> usize {
        match self {
            GroupAction::Rotation | GroupAction::Scaling => 1,
            GroupAction::RotationScaling => 2,
        }
    }

    pub fn identity(self) -> Vec<f64> {
        match self {
            GroupAction::Rotation => vec![0.0],
            GroupAction::Scaling => vec![1.0],
            GroupAction::RotationScaling => vec![0.0, 1.0],
        }
    }

    pub fn involves_scaling(self) -> bool {
        !matches!(self, GroupAction::Rotation)
    }

    /// Checks the parameter vector against the action's range.
    pub fn validate(self, tau: &[f64]) -> Result<()> {
        if tau.len() != self.param_count() {
            return contract(format!(
                "{self} takes {} parameter(s), got {}",
                self.param_count(),
                tau.len()
            ));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return contract(format!("non-finite group parameter {tau:?}"));
        }
        let angle_ok = |a: f64| (-PI..PI).contains(&a);
        let scale_ok = |s: f64| (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s);
        let ok = match self {
            GroupAction::Rotation => angle_ok(tau[0]),
            GroupAction::Scaling => scale_ok(tau[0]),
            GroupAction::RotationScaling => angle_ok(tau[0]) && scale_ok(tau[1]),
        };
        if !ok {
            return contract(format!("group parameter {tau:?} outside the range of {self}"));
        }
        Ok(())
    }

    /// Evenly spaced parameter samples covering the range, endpoints handled
    /// per action (the half-open rotation range excludes `+pi`).
    pub fn samples(self, count: usize) -> Vec<Vec<f64>> {
        let angles = |n: usize| -> Vec<f64> {
            (0..n).map(|i| -PI + 2.0 * PI * i as f64 / n as f64).collect()
        };
        let scales = |n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![1.0];
            }
            (0..n)
                .map(|i| SCALE_RANGE.0 + (SCALE_RANGE.1 - SCALE_RANGE.0) * i as f64 / (n - 1) as f64)
                .collect()
        };
        match self {
            GroupAction::Rotation => angles(count).into_iter().map(|a| vec![a]).collect(),
            GroupAction::Scaling => scales(count).into_iter().map(|s| vec![s]).collect(),
            GroupAction::RotationScaling => {
                let side = (count as f64).sqrt().ceil().max(2.0) as usize;
                let mut out = Vec::new();
                for a in angles(side) {
                    for s in scales(side) {
                        out.push(vec![a, s]);
                    }
                }
                out
            }
        }
    }
}

/// Maps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r >= PI {
        -PI
    } else {
        r
    }
}

impl fmt::Display for GroupAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupAction::Rotation => "rotation",
            GroupAction::Scaling => "scaling",
            GroupAction::RotationScaling => "rotation_scaling",
        })
    }
}

impl FromStr for GroupAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rotation" => Ok(GroupAction::Rotation),
            "scaling" | "scale" => Ok(GroupAction::Scaling),
            "rotation_scaling" => Ok(GroupAction::RotationScaling),
            other => Err(Error::Config(format!("unknown group action '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_enforced() {
        assert!(GroupAction::Rotation.validate(&[0.0]).is_ok());
        assert!(GroupAction::Rotation.validate(&[-PI]).is_ok());
        assert!(GroupAction::Rotation.validate(&[PI]).is_err());
        assert!(GroupAction::Scaling.validate(&[0.79]).is_err());
        assert!(GroupAction::Scaling.validate(&[1.5]).is_ok());
        assert!(GroupAction::RotationScaling.validate(&[0.1]).is_err());
        assert!(GroupAction::Rotation.validate(&[f64::NAN]).is_err());
    }

    #[test]
    fn wrap_and_samples() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), -PI);
        for s in GroupAction::Rotation.samples(16) {
            GroupAction::Rotation.validate(&s).unwrap();
        }
        let sc = GroupAction::Scaling.samples(15);
        assert_eq!(sc.first().unwrap()[0], 0.8);
        assert!((sc.last().unwrap()[0] - 1.5).abs() < 1e-12);
        assert_eq!("rotation".parse::<GroupAction>().unwrap(), GroupAction::Rotation);
    }
}
