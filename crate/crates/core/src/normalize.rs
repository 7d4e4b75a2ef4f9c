use ndarray::{Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::trajectory::Trajectory;

/// Per-variable z-score statistics, fit on training trajectories only and
/// recorded in checkpoints so evaluation reproduces the exact transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Apply,
    Invert,
}

impl NormalizationStats {
    /// Fit global per-variable mean/std over every point of every trajectory.
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories.first().ok_or_else(|| CoreError::Invalid {
            what: "normalization",
            message: "need at least one trajectory".into(),
        })?;
        let c = first.grid.n_vars();
        let mut sum = vec![0f64; c];
        let mut sum_sq = vec![0f64; c];
        let mut count = vec![0f64; c];
        for traj in trajectories {
            if traj.grid.n_vars() != c {
                return Err(CoreError::MixedGrids {
                    message: format!(
                        "normalization fit saw {} and {} variables",
                        c,
                        traj.grid.n_vars()
                    ),
                });
            }
            for (idx, &v) in traj.data.iter().enumerate() {
                let var = idx % c;
                let v = v as f64;
                sum[var] += v;
                sum_sq[var] += v * v;
                count[var] += 1.0;
            }
        }
        let mut mean = vec![0f64; c];
        let mut std = vec![0f64; c];
        for var in 0..c {
            mean[var] = sum[var] / count[var];
            let variance = (sum_sq[var] / count[var] - mean[var] * mean[var]).max(0.0);
            std[var] = variance.sqrt();
            if std[var] <= 0.0 {
                return Err(CoreError::ZeroVariance {
                    variable: first.grid.variables[var].clone(),
                });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    /// Z-score or inverse z-score, last axis indexes the variable.
    pub fn transform_f64<D: ndarray::Dimension>(
        &self,
        field: &ndarray::Array<f64, D>,
        direction: Direction,
    ) -> ndarray::Array<f64, D> {
        let c = self.n_vars();
        let mut out = field.clone();
        for (idx, v) in out.iter_mut().enumerate() {
            let var = idx % c;
            *v = match direction {
                Direction::Apply => (*v - self.mean[var]) / self.std[var],
                Direction::Invert => *v * self.std[var] + self.mean[var],
            };
        }
        out
    }

    /// Scale a difference of normalized fields back to physical units.
    /// Means cancel in differences, so only the std factor applies.
    pub fn scale_delta_to_physical<D: ndarray::Dimension>(
        &self,
        delta: &ndarray::Array<f64, D>,
    ) -> ndarray::Array<f64, D> {
        let c = self.n_vars();
        let mut out = delta.clone();
        for (idx, v) in out.iter_mut().enumerate() {
            *v *= self.std[idx % c];
        }
        out
    }

    pub fn apply_f32(&self, field: ArrayView4<'_, f32>) -> Array4<f64> {
        let c = self.n_vars();
        let mut out = field.mapv(|v| v as f64);
        for (idx, v) in out.iter_mut().enumerate() {
            let var = idx % c;
            *v = (*v - self.mean[var]) / self.std[var];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use ndarray::Array4;

    fn traj_with(values: &[(f32, f32)]) -> Trajectory {
        // Two variables, constant per snapshot.
        let grid = GridSpec::new(2, 2, vec!["a".into(), "b".into()], 0.1, (1.0, 1.0)).unwrap();
        let t = values.len();
        let mut data = Array4::<f32>::zeros((t, 2, 2, 2));
        for (i, &(a, b)) in values.iter().enumerate() {
            for x in 0..2 {
                for y in 0..2 {
                    data[[i, x, y, 0]] = a;
                    data[[i, x, y, 1]] = b;
                }
            }
        }
        Trajectory::new(grid, data, 0).unwrap()
    }

    #[test]
    fn means_match_constants() {
        let traj = traj_with(&[(4.0, 0.0), (6.0, 2.0)]);
        let stats = NormalizationStats::fit(&[traj]).unwrap();
        assert!((stats.mean[0] - 5.0).abs() < 1e-12);
        assert!((stats.mean[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_rejected() {
        let traj = traj_with(&[(5.0, 1.0), (5.0, 2.0)]);
        let err = NormalizationStats::fit(&[traj]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("zero variance"), "message was: {msg}");
        assert!(msg.contains('a'));
    }

    #[test]
    fn round_trip_identity() {
        let traj = traj_with(&[(4.0, 0.0), (6.0, 2.0), (5.0, -1.0)]);
        let stats = NormalizationStats::fit(&[traj.clone()]).unwrap();
        let field = traj.data.mapv(|v| v as f64);
        let normalized = stats.transform_f64(&field, Direction::Apply);
        let back = stats.transform_f64(&normalized, Direction::Invert);
        for (a, b) in field.iter().zip(back.iter()) {
            let rel = (a - b).abs() / a.abs().max(1.0);
            assert!(rel < 1e-6);
        }
    }
}
