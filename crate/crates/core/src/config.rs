//! Layered run configuration: defaults, then a TOML file, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{ImageFormatKind, DEFAULT_JPEG_QUALITY, DEFAULT_MAG_CAP};
use crate::flow::FarnebackParams;
use crate::ingest::Task;
use crate::net::{NetConfig, TrainConfig};

/// File name of the resolved configuration echoed into output directories.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot serialize configuration: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    pub mag_cap: f32,
    pub format: ImageFormatKind,
    pub jpeg_quality: u8,
    pub raw: bool,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            mag_cap: DEFAULT_MAG_CAP,
            format: ImageFormatKind::Png,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
            raw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
    pub frames: usize,
    pub seed: u64,
    pub task: Task,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_class: 40,
            size: 256,
            frames: 30,
            seed: 7,
            task: Task::Suturing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub flow: FarnebackParams,
    pub encode: EncodeConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Paths the command was run with, recorded for the echo.
    pub paths: BTreeMap<String, PathBuf>,
}

impl RunConfig {
    /// Defaults overlaid with `path` when given. Unknown keys are rejected
    /// with the list of valid keys.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_toml(&text).map_err(|message| ConfigError::Parse {
                    path: p.display().to_string(),
                    message,
                })
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.flow.validate().map_err(|e| invalid(&e))?;
        self.net.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if !(self.encode.mag_cap > 0.0 && self.encode.mag_cap.is_finite()) {
            return Err(ConfigError::Invalid("encode.mag_cap must be positive".into()));
        }
        if !(1..=100).contains(&self.encode.jpeg_quality) {
            return Err(ConfigError::Invalid("encode.jpeg_quality must lie in 1..=100".into()));
        }
        let s = &self.synth;
        if s.per_class == 0 || s.frames < 12 || s.size < 64 {
            return Err(ConfigError::Invalid(
                "synth needs per_class >= 1, frames >= 12 and size >= 64".into(),
            ));
        }
        Ok(())
    }

    /// Write the resolved configuration to `dir/run_config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|source| ConfigError::Read {
            path: dir.display().to_string(),
            source,
        })?;
        self.write_to(&dir.join(RUN_CONFIG_FILE))
    }

    /// For commands whose output is a single file: write
    /// `<file>.run_config.toml` next to it, so a shared directory keeps the
    /// echo of every stage.
    pub fn echo_beside(&self, file: &Path) -> Result<PathBuf, ConfigError> {
        let mut name = file.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(RUN_CONFIG_FILE);
        self.write_to(&file.with_file_name(name))
    }

    fn write_to(&self, path: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::write(path, self.to_toml()?).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path.to_path_buf())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let c = RunConfig::load(None).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.lr_base, 1e-3);
        assert_eq!(c.flow.window_size, 15);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::from_toml("[train]\nlr_base = 5e-4\n[net]\nbase_width = 8\n").unwrap();
        assert_eq!(c.train.lr_base, 5e-4);
        assert_eq!(c.train.batch_size, 30);
        assert_eq!(c.net.base_width, 8);
        assert_eq!(c.flow, FarnebackParams::default());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(err.contains("lr_base"), "{err}");
        let err = RunConfig::from_toml("[bogus]\n").unwrap_err();
        assert!(err.contains("train"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.train.seed = 99;
        c.encode.format = ImageFormatKind::Jpeg;
        c.paths.insert("out".into(), PathBuf::from("/tmp/x y"));
        let dir = tempfile::tempdir().unwrap();
        let path = c.echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.flow.poly_n = 4;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.encode.jpeg_quality = 0;
        assert!(c.validate().is_err());
    }
}
