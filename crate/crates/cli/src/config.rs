//! The TOML run configuration. Every field is optional; flags override it.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub pack_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitShares {
    pub train: Option<f64>,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    pub seed: Option<u64>,
    #[serde(default)]
    pub split: SplitShares,
    pub factor: Option<usize>,
    /// Augmentation pipeline as a JSON file.
    pub pipeline: Option<PathBuf>,
    /// Solver file in `key: value` form.
    pub solver: Option<PathBuf>,
    pub preset: Option<String>,
}

impl RunConfig {
    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut().filter(|v| v.is_relative()) {
                *v = base.join(&*v);
            }
        };
        fix(&mut cfg.paths.manifest);
        fix(&mut cfg.paths.pack_dir);
        fix(&mut cfg.paths.checkpoint_dir);
        fix(&mut cfg.paths.report_dir);
        fix(&mut cfg.pipeline);
        fix(&mut cfg.solver);
        if let Some(f) = [cfg.split.train, cfg.split.val, cfg.split.test].into_iter().flatten().find(|f| !(0.0..=1.0).contains(f)) {
            return Err(CliError::Usage(format!("config split fraction {f} outside [0, 1]")));
        }
        Ok(cfg)
    }
}
