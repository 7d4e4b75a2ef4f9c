//! Shared foundation for the StFT forecasting workspace: grid and trajectory
//! types, the on-disk dataset container, per-variable normalization, the
//! hierarchy configuration schema and seeded RNG streams.

pub mod config;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod normalize;
pub mod rng;
pub mod trajectory;

pub use config::{ConditionMode, FreqMode, LevelConfig, ModelConfig};
pub use dataset::{read_dataset, write_dataset, DatasetManifest, DatasetReader, DatasetWriter};
pub use error::{Classify, CoreError, ErrorClass, Result};
pub use grid::GridSpec;
pub use normalize::{Direction, NormalizationStats};
pub use rng::RngStream;
pub use trajectory::{HistoryWindow, Trajectory};
