//! On-disk trajectory container: one human-readable JSON manifest plus one
//! raw binary file per trajectory.
//!
//! Binary layout is little-endian IEEE-754 f32, C-order `T x W x H x C`
//! (snapshot-major, then the first spatial axis, the second, then variables).
//! The manifest records everything needed to interpret the files; see
//! `DatasetManifest` for the key set. Round trips are bit-exact.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::grid::GridSpec;
use crate::trajectory::Trajectory;

pub const MANIFEST_NAME: &str = "manifest.json";
const FORMAT_NAME: &str = "stft-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub file: String,
    pub n_snapshots: usize,
    pub t0: i64,
    /// Generator-sampled parameters, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub byte_order: String,
    pub element_type: String,
    pub layout: String,
    pub variables: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub dt: f64,
    pub domain_extent: (f64, f64),
    pub count: usize,
    pub trajectories: Vec<TrajectoryEntry>,
    /// Free-form generator metadata (system name, seed, CLI parameters).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.width,
            self.height,
            self.variables.clone(),
            self.dt,
            self.domain_extent,
        )
    }
}

/// Incremental writer so generators can stream trajectories to disk as they
/// finish. Single-writer by construction (`&mut self`).
pub struct DatasetWriter {
    dir: PathBuf,
    grid: GridSpec,
    entries: Vec<TrajectoryEntry>,
    generator: Option<serde_json::Value>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, grid: GridSpec) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|source| CoreError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            grid,
            entries: Vec::new(),
            generator: None,
        })
    }

    pub fn set_generator(&mut self, meta: serde_json::Value) {
        self.generator = Some(meta);
    }

    pub fn append(
        &mut self,
        trajectory: &Trajectory,
        params: Option<serde_json::Value>,
    ) -> Result<()> {
        if trajectory.grid != self.grid {
            return Err(CoreError::MixedGrids {
                message: format!(
                    "dataset grid is {}x{} {:?}, trajectory has {}x{} {:?}",
                    self.grid.width,
                    self.grid.height,
                    self.grid.variables,
                    trajectory.grid.width,
                    trajectory.grid.height,
                    trajectory.grid.variables
                ),
            });
        }
        let file = format!("traj_{:05}.bin", self.entries.len());
        let path = self.dir.join(&file);
        write_binary(&path, trajectory)?;
        self.entries.push(TrajectoryEntry {
            file,
            n_snapshots: trajectory.n_snapshots(),
            t0: trajectory.t0,
            params,
        });
        Ok(())
    }

    pub fn finalize(self) -> Result<DatasetManifest> {
        let manifest = DatasetManifest {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            byte_order: "little_endian".to_string(),
            element_type: "f32".to_string(),
            layout: "t_w_h_c".to_string(),
            variables: self.grid.variables.clone(),
            width: self.grid.width,
            height: self.grid.height,
            dt: self.grid.dt,
            domain_extent: self.grid.domain_extent,
            count: self.entries.len(),
            trajectories: self.entries,
            generator: self.generator,
        };
        let path = self.dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(manifest)
    }
}

/// Write all trajectories (which must share a grid) into `dir`.
pub fn write_dataset(trajectories: &[Trajectory], dir: &Path) -> Result<DatasetManifest> {
    let first = trajectories.first().ok_or_else(|| CoreError::Invalid {
        what: "dataset",
        message: "write_dataset needs at least one trajectory; use DatasetWriter for empty sets"
            .into(),
    })?;
    let mut writer = DatasetWriter::create(dir, first.grid.clone())?;
    for trajectory in trajectories {
        writer.append(trajectory, None)?;
    }
    writer.finalize()
}

/// Lazy dataset handle: the manifest is parsed and every binary file's size
/// is checked up front; trajectory payloads load on demand.
#[derive(Debug)]
pub struct DatasetReader {
    dir: PathBuf,
    manifest: DatasetManifest,
    grid: GridSpec,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&manifest_path).map_err(|source| CoreError::Io {
            path: manifest_path.display().to_string(),
            source,
        })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| CoreError::Manifest {
                path: manifest_path.display().to_string(),
                message: format!("parse failed: {e}"),
            })?;
        if manifest.format != FORMAT_NAME {
            return Err(CoreError::Manifest {
                path: manifest_path.display().to_string(),
                message: format!("unknown format '{}'", manifest.format),
            });
        }
        if manifest.byte_order != "little_endian" || manifest.element_type != "f32" {
            return Err(CoreError::Manifest {
                path: manifest_path.display().to_string(),
                message: format!(
                    "unsupported encoding {} / {}",
                    manifest.byte_order, manifest.element_type
                ),
            });
        }
        if manifest.count != manifest.trajectories.len() {
            return Err(CoreError::Manifest {
                path: manifest_path.display().to_string(),
                message: format!(
                    "count {} does not match {} trajectory entries",
                    manifest.count,
                    manifest.trajectories.len()
                ),
            });
        }
        let grid = manifest.grid()?;
        let reader = Self {
            dir: dir.to_path_buf(),
            manifest,
            grid,
        };
        for i in 0..reader.len() {
            reader.check_size(i)?;
        }
        Ok(reader)
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn check_size(&self, index: usize) -> Result<()> {
        let entry = &self.manifest.trajectories[index];
        let path = self.dir.join(&entry.file);
        let expected = (entry.n_snapshots * self.grid.snapshot_len() * 4) as u64;
        let actual = std::fs::metadata(&path)
            .map_err(|source| CoreError::Io {
                path: path.display().to_string(),
                source,
            })?
            .len();
        if expected != actual {
            return Err(CoreError::SizeMismatch {
                file: entry.file.clone(),
                expected,
                actual,
            });
        }
        Ok(())
    }

    pub fn load(&self, index: usize) -> Result<Trajectory> {
        let entry = &self.manifest.trajectories[index];
        let path = self.dir.join(&entry.file);
        let data = read_binary(
            &path,
            entry.n_snapshots,
            self.grid.width,
            self.grid.height,
            self.grid.n_vars(),
        )?;
        Trajectory::new(self.grid.clone(), data, entry.t0)
    }

    pub fn load_all(&self) -> Result<Vec<Trajectory>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Convenience eager read of a whole dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Vec<Trajectory>> {
    DatasetReader::open(dir)?.load_all()
}

fn write_binary(path: &Path, trajectory: &Trajectory) -> Result<()> {
    let io_err = |source| CoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    let values = trajectory.data.as_slice().expect("contiguous");
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf).map_err(io_err)?;
    writer.flush().map_err(io_err)
}

fn read_binary(path: &Path, t: usize, w: usize, h: usize, c: usize) -> Result<Array4<f32>> {
    let io_err = |source| CoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    let expected = t * w * h * c * 4;
    if bytes.len() != expected {
        return Err(CoreError::SizeMismatch {
            file: path.display().to_string(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(t * w * h * c);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Array4::from_shape_vec((t, w, h, c), values).map_err(|e| CoreError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize, vars: &[&str]) -> GridSpec {
        GridSpec::new(
            w,
            h,
            vars.iter().map(|s| s.to_string()).collect(),
            0.5,
            (1.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn binary_size_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::<f32>::from_shape_fn((3, 2, 2, 1), |(t, w, h, _)| {
            (t * 4 + w * 2 + h) as f32
        });
        let traj = Trajectory::new(grid(2, 2, &["u"]), data, 0).unwrap();
        write_dataset(&[traj], dir.path()).unwrap();
        let size = std::fs::metadata(dir.path().join("traj_00000.bin"))
            .unwrap()
            .len();
        assert_eq!(size, 48);
    }

    #[test]
    fn truncated_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::<f32>::zeros((3, 2, 2, 1));
        let traj = Trajectory::new(grid(2, 2, &["u"]), data, 0).unwrap();
        write_dataset(&[traj], dir.path()).unwrap();
        let bin = dir.path().join("traj_00000.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..40]).unwrap();
        let err = DatasetReader::open(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("48") && msg.contains("40"), "message: {msg}");
        assert!(msg.contains("traj_00000.bin"));
    }

    #[test]
    fn variables_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array4::<f32>::zeros((2, 3, 3, 3));
        let traj = Trajectory::new(grid(3, 3, &["u", "v", "p"]), data, 0).unwrap();
        write_dataset(&[traj], dir.path()).unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        assert_eq!(reader.grid().variables, vec!["u", "v", "p"]);
    }

    #[test]
    fn mixed_grids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Trajectory::new(grid(2, 2, &["u"]), Array4::zeros((1, 2, 2, 1)), 0).unwrap();
        let b = Trajectory::new(grid(3, 3, &["u"]), Array4::zeros((1, 3, 3, 1)), 0).unwrap();
        let err = write_dataset(&[a, b], dir.path()).unwrap_err();
        assert!(err.to_string().contains("mixed grids"));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let writer = DatasetWriter::create(dir.path(), grid(2, 2, &["u"])).unwrap();
        writer.finalize().unwrap();
        let reader = DatasetReader::open(dir.path()).unwrap();
        assert!(reader.is_empty());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            t in 1usize..4,
            w in 1usize..5,
            h in 1usize..5,
            c in 1usize..3,
            seed in any::<u64>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                // Finite f32 spread over a wide range of magnitudes.
                let m = ((state >> 40) as f32 / 16777216.0) - 0.5;
                m * 10f32.powi(((state >> 8) % 61) as i32 - 30)
            };
            let vars: Vec<String> = (0..c).map(|i| format!("v{i}")).collect();
            let g = GridSpec::new(w, h, vars, 0.25, (1.0, 1.0)).unwrap();
            let data = Array4::from_shape_fn((t, w, h, c), |_| next());
            let traj = Trajectory::new(g, data, 3).unwrap();
            write_dataset(std::slice::from_ref(&traj), dir.path()).unwrap();
            let back = read_dataset(dir.path()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].data, &traj.data);
            prop_assert_eq!(back[0].t0, 3);
        }
    }
}
