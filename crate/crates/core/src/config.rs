use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CoreError, Result};

/// Which axes the frequency path transforms over: spatial only, or
/// space plus the stacked temporal axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreqMode {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

/// How level l >= 2 is conditioned: on the running sum of all previous level
/// predictions, or on the previous level's increment alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Cumulative,
    LastLevel,
}

/// One level of the hierarchy: patch geometry, spectral truncation and
/// transformer dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub p_h: usize,
    pub p_w: usize,
    pub o_h: usize,
    pub o_w: usize,
    /// Retained low-frequency modes per spatial axis of the token grid.
    pub m_h: usize,
    pub m_w: usize,
    /// Transformer layers per path.
    pub depth: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub use_freq_path: bool,
}

/// Full hierarchy description, coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// History length fed to the model.
    pub k: usize,
    pub levels: Vec<LevelConfig>,
    pub freq_mode: FreqMode,
    pub condition_mode: ConditionMode,
}

impl LevelConfig {
    fn validate(&self, index: usize) -> Result<()> {
        let fail = |message: String| {
            Err(CoreError::Invalid {
                what: "level config",
                message: format!("level {index}: {message}"),
            })
        };
        if self.p_h == 0 || self.p_w == 0 {
            return fail(format!("patch sizes must be positive, got {}x{}", self.p_h, self.p_w));
        }
        if self.o_h >= self.p_h || self.o_w >= self.p_w {
            return fail(format!(
                "overlap must be smaller than the patch, got o=({},{}) p=({},{})",
                self.o_h, self.o_w, self.p_h, self.p_w
            ));
        }
        if self.m_h == 0 || self.m_w == 0 {
            return fail("retained modes must be at least 1".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::Invalid {
                what: "model config",
                message: "history length k must be at least 1".into(),
            });
        }
        if self.levels.is_empty() {
            return Err(CoreError::Invalid {
                what: "model config",
                message: "at least one level required".into(),
            });
        }
        for (i, level) in self.levels.iter().enumerate() {
            level.validate(i)?;
        }
        for pair in self.levels.windows(2) {
            if pair[1].p_h >= pair[0].p_h || pair[1].p_w >= pair[0].p_w {
                return Err(CoreError::Invalid {
                    what: "model config",
                    message: format!(
                        "patch sizes must strictly decrease coarse to fine, got ({},{}) then ({},{})",
                        pair[0].p_h, pair[0].p_w, pair[1].p_h, pair[1].p_w
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Temporal stack depth seen by level `l` (0-based): the history alone at
    /// the coarsest level, plus one conditioning slice afterwards.
    pub fn stack_depth(&self, level: usize) -> usize {
        if level == 0 {
            self.k
        } else {
            self.k + 1
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| CoreError::Manifest {
                path: path.display().to_string(),
                message: format!("model config parse failed: {e}"),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| CoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(p: usize) -> LevelConfig {
        LevelConfig {
            p_h: p,
            p_w: p,
            o_h: 1,
            o_w: 1,
            m_h: 4,
            m_w: 4,
            depth: 2,
            hidden_dim: 32,
            n_heads: 4,
            use_freq_path: true,
        }
    }

    #[test]
    fn accepts_decreasing_patches() {
        let config = ModelConfig {
            k: 5,
            levels: vec![level(16), level(8)],
            freq_mode: FreqMode::TwoD,
            condition_mode: ConditionMode::Cumulative,
        };
        config.validate().unwrap();
        assert_eq!(config.stack_depth(0), 5);
        assert_eq!(config.stack_depth(1), 6);
    }

    #[test]
    fn rejects_nondecreasing_patches() {
        let config = ModelConfig {
            k: 5,
            levels: vec![level(8), level(8)],
            freq_mode: FreqMode::TwoD,
            condition_mode: ConditionMode::Cumulative,
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_keys_round_trip_verbatim() {
        let config = ModelConfig {
            k: 5,
            levels: vec![level(4)],
            freq_mode: FreqMode::ThreeD,
            condition_mode: ConditionMode::LastLevel,
        };
        let text = serde_json::to_string(&config).unwrap();
        for key in [
            "\"k\"", "\"levels\"", "\"freq_mode\"", "\"condition_mode\"", "\"p_h\"", "\"p_w\"",
            "\"o_h\"", "\"o_w\"", "\"m_h\"", "\"m_w\"", "\"depth\"", "\"hidden_dim\"",
            "\"n_heads\"", "\"use_freq_path\"",
        ] {
            assert!(text.contains(key), "missing key {key} in {text}");
        }
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
