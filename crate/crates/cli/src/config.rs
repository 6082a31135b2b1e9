//! Run configuration (JSON, versioned).

use std::path::{Path, PathBuf};

use mscos::model::{Arity, Hyperparams, ModelKind};
use mscos::sampler::McmcConfig;
use mscos::simulate::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::io::parse_json;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn default_r() -> usize {
    50
}

fn default_chains() -> usize {
    2
}

fn default_truth_scale() -> String {
    "partition".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "bivariate")]
    pub arity: Arity,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default)]
    pub knot_seed: u64,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

fn bivariate() -> Arity {
    Arity::Bivariate
}

/// Paths to the supports. `overlap1` maps partition units into D1 units,
/// `overlap2` into D2 units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportPaths {
    pub partition: PathBuf,
    pub d1: Option<PathBuf>,
    pub d2: Option<PathBuf>,
    pub overlap1: Option<PathBuf>,
    pub overlap2: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariablePaths {
    pub y1: Option<PathBuf>,
    pub y2: Option<PathBuf>,
}

/// Target support for prediction: its units and the overlap of partition
/// units with them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPaths {
    pub support: PathBuf,
    pub overlap: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Waic,
    GelmanRubin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: Option<ModelConfig>,
    pub supports: Option<SupportPaths>,
    pub data: Option<VariablePaths>,
    pub mcmc: Option<McmcConfig>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Directory holding a previous fit's draws and manifest.
    pub draws_dir: Option<PathBuf>,
    pub target: Option<TargetPaths>,
    /// Seed of the predictive noise streams.
    #[serde(default)]
    pub predict_seed: u64,
    /// Predict the noiseless mean surface rather than new observations.
    #[serde(default)]
    pub latent_mean: bool,
    /// Prediction CSV scored by `evaluate`.
    pub predictions: Option<PathBuf>,
    /// Truth values on the prediction units, for RMSE.
    pub truth: Option<VariablePaths>,
    /// Label of the truth's support in RMSE entries.
    #[serde(default = "default_truth_scale")]
    pub truth_scale: String,
    /// Metrics for `evaluate`; when absent, every metric whose inputs are
    /// configured.
    pub metrics: Option<Vec<Metric>>,
    pub scenario: Option<ScenarioConfig>,
    /// Also write each simulated dataset with a ready-to-run fit config.
    #[serde(default)]
    pub write_datasets: bool,
}

impl RunConfig {
    pub fn minimal() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: None,
            supports: None,
            data: None,
            mcmc: None,
            chains: default_chains(),
            draws_dir: None,
            target: None,
            predict_seed: 0,
            latent_mean: false,
            predictions: None,
            truth: None,
            truth_scale: default_truth_scale(),
            metrics: None,
            scenario: None,
            write_datasets: false,
        }
    }

    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = parse_json(&text, path)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "config.schema_version: expected {SCHEMA_VERSION}, found {}",
                cfg.schema_version
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        if let Some(s) = &mut self.supports {
            fix(&mut s.partition);
            fix_opt(&mut s.d1);
            fix_opt(&mut s.d2);
            fix_opt(&mut s.overlap1);
            fix_opt(&mut s.overlap2);
        }
        for v in [&mut self.data, &mut self.truth].into_iter().flatten() {
            fix_opt(&mut v.y1);
            fix_opt(&mut v.y2);
        }
        fix_opt(&mut self.draws_dir);
        fix_opt(&mut self.predictions);
        if let Some(t) = &mut self.target {
            fix(&mut t.support);
            fix(&mut t.overlap);
        }
    }
}

/// Field accessor with a config-path error message.
pub fn required<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("config.{field}: required for this command")))
}
