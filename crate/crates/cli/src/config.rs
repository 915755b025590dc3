//! Settings resolution: flags, then environment, then the config file,
//! then built-in defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_UI_PORT: u16 = 8081;
pub const DEFAULT_SERVE_PORT: u16 = 8000;
pub const DEFAULT_HUMAN_INPUT_TIMEOUT_S: u64 = 300;

/// Contents of `config.toml`. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub db: Option<PathBuf>,
    pub pricing: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub host: Option<String>,
    pub ui_port: Option<u16>,
    pub serve_port: Option<u16>,
    pub human_input_timeout_s: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config file {}: {e}", path.display()))
    }

    /// Loads `explicit` if given, else the per-user file when it exists.
    pub fn discover(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>), String> {
        if let Some(path) = explicit {
            return Ok((Self::load(path)?, Some(path.to_path_buf())));
        }
        match default_config_path() {
            Some(path) if path.is_file() => Ok((Self::load(&path)?, Some(path))),
            _ => Ok((Self::default(), None)),
        }
    }
}

pub fn default_config_path() -> Option<PathBuf> {
    dirs::config_dir().map(|d| d.join("agentloom").join("config.toml"))
}

pub fn default_db_path() -> PathBuf {
    dirs::data_dir()
        .unwrap_or_else(|| PathBuf::from("."))
        .join("agentloom")
        .join("agentloom.db")
}

/// Values given on the command line or through the environment. Clap
/// already prefers a flag over its environment variable.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub db: Option<PathBuf>,
    pub pricing: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub host: Option<String>,
    pub ui_port: Option<u16>,
    pub serve_port: Option<u16>,
}

/// Effective settings after precedence is applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub config_file: Option<PathBuf>,
    pub db: PathBuf,
    pub pricing: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub host: String,
    pub ui_port: u16,
    pub serve_port: u16,
    pub human_input_timeout_s: u64,
}

impl Settings {
    pub fn resolve(over: Overrides, file: FileConfig, config_file: Option<PathBuf>) -> Self {
        // relative paths in the file are taken relative to the file itself
        let base = config_file.as_deref().and_then(Path::parent).map(Path::to_path_buf);
        let anchor = |p: PathBuf| match &base {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        };
        Settings {
            db: over
                .db
                .or_else(|| file.db.map(anchor))
                .unwrap_or_else(default_db_path),
            pricing: over.pricing.or_else(|| file.pricing.map(anchor)),
            static_dir: over.static_dir.or_else(|| file.static_dir.map(anchor)),
            host: over.host.or(file.host).unwrap_or_else(|| DEFAULT_HOST.into()),
            ui_port: over.ui_port.or(file.ui_port).unwrap_or(DEFAULT_UI_PORT),
            serve_port: over.serve_port.or(file.serve_port).unwrap_or(DEFAULT_SERVE_PORT),
            human_input_timeout_s: file.human_input_timeout_s.unwrap_or(DEFAULT_HUMAN_INPUT_TIMEOUT_S),
            config_file,
        }
    }
}
