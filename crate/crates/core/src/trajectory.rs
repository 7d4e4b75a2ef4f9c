use ndarray::{Array4, ArrayView3, Axis};

use crate::error::{CoreError, Result};
use crate::grid::GridSpec;

/// A stored trajectory: `T x W x H x C` snapshots on one grid.
///
/// Data is always finite; constructors reject NaN/Inf so downstream code can
/// assume clean inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: GridSpec,
    pub data: Array4<f32>,
    /// Index of the first stored snapshot in its source run.
    pub t0: i64,
}

impl Trajectory {
    pub fn new(grid: GridSpec, data: Array4<f32>, t0: i64) -> Result<Self> {
        let (t, w, h, c) = data.dim();
        if t == 0 {
            return Err(CoreError::Invalid {
                what: "trajectory",
                message: "need at least one snapshot".into(),
            });
        }
        if w != grid.width || h != grid.height || c != grid.n_vars() {
            return Err(CoreError::ShapeMismatch {
                what: "trajectory data".into(),
                expected: format!("{}x{}x{} per snapshot", grid.width, grid.height, grid.n_vars()),
                actual: format!("{w}x{h}x{c}"),
            });
        }
        check_finite(data.as_slice().expect("contiguous"), "trajectory data")?;
        Ok(Self { grid, data, t0 })
    }

    pub fn n_snapshots(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn snapshot(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), t)
    }

    /// History window ending at snapshot `t_end` (inclusive), length `k`,
    /// ordered oldest-first so the most recent snapshot comes last.
    pub fn window(&self, t_end: usize, k: usize) -> Result<HistoryWindow> {
        if k == 0 || t_end + 1 < k || t_end >= self.n_snapshots() {
            return Err(CoreError::Invalid {
                what: "history window",
                message: format!(
                    "window of length {k} ending at {t_end} out of range for {} snapshots",
                    self.n_snapshots()
                ),
            });
        }
        let data = self
            .data
            .slice(ndarray::s![t_end + 1 - k..=t_end, .., .., ..])
            .to_owned();
        Ok(HistoryWindow {
            grid: self.grid.clone(),
            data,
        })
    }
}

/// The `k` most recent snapshots fed to the one-step model, most-recent-last.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub grid: GridSpec,
    pub data: Array4<f32>,
}

impl HistoryWindow {
    pub fn new(grid: GridSpec, data: Array4<f32>) -> Result<Self> {
        let (k, w, h, c) = data.dim();
        if k == 0 {
            return Err(CoreError::Invalid {
                what: "history window",
                message: "history length must be at least 1".into(),
            });
        }
        if w != grid.width || h != grid.height || c != grid.n_vars() {
            return Err(CoreError::ShapeMismatch {
                what: "history window".into(),
                expected: format!("{}x{}x{}", grid.width, grid.height, grid.n_vars()),
                actual: format!("{w}x{h}x{c}"),
            });
        }
        check_finite(data.as_slice().expect("contiguous"), "history window")?;
        Ok(Self { grid, data })
    }

    pub fn k(&self) -> usize {
        self.data.shape()[0]
    }

    /// Drop the oldest snapshot and append `next` as the most recent one.
    pub fn advance(&mut self, next: ArrayView3<'_, f32>) {
        let k = self.k();
        for t in 1..k {
            let src = self.data.index_axis(Axis(0), t).to_owned();
            self.data.index_axis_mut(Axis(0), t - 1).assign(&src);
        }
        self.data.index_axis_mut(Axis(0), k - 1).assign(&next);
    }
}

pub(crate) fn check_finite(values: &[f32], what: &str) -> Result<()> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            what: what.to_string(),
            index,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn grid() -> GridSpec {
        GridSpec::new(2, 2, vec!["u".into()], 0.1, (1.0, 1.0)).unwrap()
    }

    #[test]
    fn rejects_nan() {
        let mut data = Array4::<f32>::zeros((1, 2, 2, 1));
        data[[0, 1, 0, 0]] = f32::NAN;
        assert!(Trajectory::new(grid(), data, 0).is_err());
    }

    #[test]
    fn window_is_most_recent_last() {
        let mut data = Array4::<f32>::zeros((4, 2, 2, 1));
        for t in 0..4 {
            data.index_axis_mut(Axis(0), t).fill(t as f32);
        }
        let traj = Trajectory::new(grid(), data, 0).unwrap();
        let win = traj.window(2, 2).unwrap();
        assert_eq!(win.data[[0, 0, 0, 0]], 1.0);
        assert_eq!(win.data[[1, 0, 0, 0]], 2.0);
    }

    #[test]
    fn advance_slides_window() {
        let mut data = Array4::<f32>::zeros((3, 2, 2, 1));
        for t in 0..3 {
            data.index_axis_mut(Axis(0), t).fill(t as f32);
        }
        let traj = Trajectory::new(grid(), data, 0).unwrap();
        let mut win = traj.window(1, 2).unwrap();
        let next = traj.snapshot(2);
        win.advance(next);
        assert_eq!(win.data[[0, 0, 0, 0]], 1.0);
        assert_eq!(win.data[[1, 0, 0, 0]], 2.0);
    }
}
