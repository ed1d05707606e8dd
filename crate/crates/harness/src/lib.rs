//! Experiment orchestration for the racing agents: configuration files,
//! run manifests, races, result tables, learning curves and plots.

pub mod curves;
pub mod experiment;
pub mod plot;
pub mod results;

use std::path::{Path, PathBuf};

use arpo_core::env::RaceConfig;
use arpo_learn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] arpo_core::SimError),
    #[error(transparent)]
    Learn(#[from] arpo_learn::LearnError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

impl HarnessError {
    /// Short machine-readable category used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Io { .. } => "io",
            HarnessError::Config { .. } => "config",
            HarnessError::Invalid(_) => "invalid",
            HarnessError::Sim(_) => "sim",
            HarnessError::Learn(_) => "learn",
            HarnessError::Csv(_) => "csv",
            HarnessError::Json(_) => "json",
            HarnessError::Plot(_) => "plot",
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Race protocol settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceSettings {
    pub laps: u32,
    pub starts: usize,
    pub max_steps: u64,
}

impl Default for RaceSettings {
    fn default() -> Self {
        let r = RaceConfig::default();
        Self { laps: r.n_laps, starts: r.n_starts, max_steps: r.max_steps }
    }
}

impl From<RaceSettings> for RaceConfig {
    fn from(r: RaceSettings) -> Self {
        RaceConfig { n_laps: r.laps, n_starts: r.starts, max_steps: r.max_steps }
    }
}

/// Contents of a `--config` TOML file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub race: RaceSettings,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config {
            path: path.display().to_string(),
            msg: e.to_string().lines().collect::<Vec<_>>().join(" "),
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Written next to every output so a run can be repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub code_version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, inputs: &[PathBuf]) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seed,
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            config: serde_json::to_value(config)?,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Track files of a directory in name order, or the single file given.
pub fn track_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::Invalid(format!("no track files (*.csv) in {}", path.display())));
    }
    Ok(files)
}

pub fn load_track(path: &Path) -> Result<arpo_core::track::Track> {
    if !path.exists() {
        return Err(HarnessError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    Ok(arpo_core::track::Track::load_csv(path)?)
}
