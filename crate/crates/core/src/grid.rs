use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Spatial grid and variable metadata shared by every snapshot of a trajectory.
///
/// Fields are stored `T x W x H x C`: `W` indexes the first spatial axis,
/// `H` the second, `C` the physical variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub variables: Vec<String>,
    /// Time between stored snapshots, in solver units.
    pub dt: f64,
    /// Physical extent (x_len, y_len) of the domain.
    pub domain_extent: (f64, f64),
}

impl GridSpec {
    pub fn new(
        width: usize,
        height: usize,
        variables: Vec<String>,
        dt: f64,
        domain_extent: (f64, f64),
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CoreError::Invalid {
                what: "grid",
                message: format!("grid must be at least 1x1, got {width}x{height}"),
            });
        }
        if variables.is_empty() {
            return Err(CoreError::Invalid {
                what: "grid",
                message: "at least one variable required".into(),
            });
        }
        for (i, a) in variables.iter().enumerate() {
            if variables[i + 1..].contains(a) {
                return Err(CoreError::Invalid {
                    what: "grid",
                    message: format!("duplicate variable name '{a}'"),
                });
            }
        }
        if !(dt > 0.0) {
            return Err(CoreError::Invalid {
                what: "grid",
                message: format!("dt must be positive, got {dt}"),
            });
        }
        if !(domain_extent.0 > 0.0 && domain_extent.1 > 0.0) {
            return Err(CoreError::Invalid {
                what: "grid",
                message: format!("domain extent must be positive, got {domain_extent:?}"),
            });
        }
        Ok(Self {
            width,
            height,
            variables,
            dt,
            domain_extent,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// Number of values in one snapshot.
    pub fn snapshot_len(&self) -> usize {
        self.width * self.height * self.n_vars()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_variables() {
        let err = GridSpec::new(4, 4, vec!["u".into(), "u".into()], 0.1, (1.0, 1.0));
        assert!(err.is_err());
    }

    #[test]
    fn rejects_zero_dt() {
        assert!(GridSpec::new(4, 4, vec!["u".into()], 0.0, (1.0, 1.0)).is_err());
    }
}
