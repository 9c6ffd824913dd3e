use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survfuse::cvharness::CvConfig;
use survfuse::datamodel::Endpoint;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Feature CSV with a `patient_id` column.
    Table,
    /// Embedding container.
    Bags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityInput {
    pub name: String,
    pub kind: InputKind,
    pub path: PathBuf,
}

/// Cross-validation run description. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every random draw of the run derives from it.
    pub seed: u64,
    #[serde(default = "all_endpoints")]
    pub endpoints: Vec<Endpoint>,
    /// Cohort CSV with the outcome columns.
    pub outcomes: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(rename = "modality")]
    pub modalities: Vec<ModalityInput>,
    #[serde(default)]
    pub cv: CvConfig,
}

fn all_endpoints() -> Vec<Endpoint> {
    Endpoint::ALL.to_vec()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed: must not exceed 9223372036854775807".into());
        }
        if self.endpoints.is_empty() {
            return bad("endpoints: at least one endpoint is required".into());
        }
        if self.modalities.is_empty() {
            return bad("modality: at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.name.trim().is_empty() {
                return bad(format!("modality[{i}].name: must not be empty"));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("modality[{i}].name: duplicate name {:?}", m.name));
            }
        }
        let cv = &self.cv;
        if cv.n_folds < 2 {
            return bad(format!("cv.n_folds: must be at least 2, found {}", cv.n_folds));
        }
        if !(1..=survfuse::featsel::MAX_FEATURES).contains(&cv.max_features) {
            return bad(format!("cv.max_features: must lie in 1..=20, found {}", cv.max_features));
        }
        if !(cv.deep_val_fraction > 0.0 && cv.deep_val_fraction < 1.0) {
            return bad("cv.deep_val_fraction: must lie in (0, 1)".into());
        }
        if cv.n_bootstrap == 0 {
            return bad("cv.n_bootstrap: must be positive".into());
        }
        if cv.horizons_years.iter().any(|h| !(*h > 0.0)) {
            return bad("cv.horizons_years: horizons must be positive".into());
        }
        let p = &cv.preprocess;
        if !(0.0..=1.0).contains(&p.missing_threshold) {
            return bad("cv.preprocess.missing_threshold: must lie in [0, 1]".into());
        }
        if !(p.val_fraction > 0.0 && p.val_fraction < 1.0) {
            return bad("cv.preprocess.val_fraction: must lie in (0, 1)".into());
        }
        if p.n_splits == 0 {
            return bad("cv.preprocess.n_splits: must be positive".into());
        }
        cv.deep
            .validate()
            .map_err(|e| CliError::Config(format!("cv.deep: {e}")))
    }

    /// `path` if absolute, otherwise relative to `base`.
    pub fn resolve(base: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.join(path)
        }
    }

    /// Every input path, resolved; the first missing one is reported.
    pub fn check_inputs(&self, base: &Path) -> Result<(), CliError> {
        let mut paths = vec![("outcomes".to_string(), &self.outcomes)];
        for (i, m) in self.modalities.iter().enumerate() {
            paths.push((format!("modality[{i}].path"), &m.path));
        }
        for (field, p) in paths {
            let r = Self::resolve(base, p);
            if !r.is_file() {
                return Err(CliError::Config(format!("{field}: file not found: {}", r.display())));
            }
        }
        Ok(())
    }
}
