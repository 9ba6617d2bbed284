//! Experiment configuration: a strict JSON document (unknown keys are
//! rejected) bundling the dataset source, model shape, pretraining and
//! adaptation hyperparameters, and output settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use procal_core::adaptation::{AdaptationConfig, PretrainConfig};
use procal_core::data::{load_feature_table, make_gaussian_domains, GaussianSpec, LabeledDataset};
use procal_core::model::ModelConfig;
use procal_core::{ProcalError, Result};

/// Where the domain pair comes from: a synthetic generator spec or a
/// pair of feature-table CSV files. Exactly one must be set.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub gaussian: Option<GaussianSpec>,
    pub feature_tables: Option<FeatureTables>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeatureTables {
    pub source: PathBuf,
    pub target: PathBuf,
}

/// Network shape; input dimension and class count come from the data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dim: 32,
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub adaptation: AdaptationConfig,
    /// Seeds used by the ablation subcommand.
    pub ablation_seeds: Vec<u64>,
    /// Output directory; the --out flag takes precedence.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSection {
                gaussian: Some(GaussianSpec::default()),
                feature_tables: None,
            },
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            adaptation: AdaptationConfig::default(),
            ablation_seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// The full synthetic benchmark: blobs-rot60 data with its matching
    /// adaptation preset.
    pub fn blobs_rot60() -> Self {
        ExperimentConfig {
            dataset: DatasetSection {
                gaussian: Some(GaussianSpec::blobs_rot60(0)),
                feature_tables: None,
            },
            adaptation: AdaptationConfig::blobs_rot60(),
            out_dir: PathBuf::from("out/blobs_rot60"),
            ..ExperimentConfig::default()
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ProcalError::Parameter(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            ProcalError::Parameter(format!("invalid config {}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.gaussian, &self.dataset.feature_tables) {
            (Some(_), Some(_)) => Err(ProcalError::Parameter(
                "dataset section sets both `gaussian` and `feature_tables`; choose one".into(),
            )),
            (None, None) => Err(ProcalError::Parameter(
                "dataset section must set `gaussian` or `feature_tables`".into(),
            )),
            _ => Ok(()),
        }?;
        if self.model.hidden_dim == 0 || self.model.feature_dim == 0 {
            return Err(ProcalError::Parameter(
                "model dimensions must be positive".into(),
            ));
        }
        if self.ablation_seeds.is_empty() {
            return Err(ProcalError::Parameter(
                "ablation_seeds must not be empty".into(),
            ));
        }
        self.adaptation.validate()
    }

    /// Materializes the source/target pair.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        if let Some(spec) = &self.dataset.gaussian {
            return make_gaussian_domains(spec);
        }
        let tables = self
            .dataset
            .feature_tables
            .as_ref()
            .expect("validated: one dataset source is set");
        let source = load_feature_table(&tables.source).map_err(|e| match e {
            ProcalError::Io(io) => ProcalError::Parameter(format!(
                "cannot read source table {}: {io}",
                tables.source.display()
            )),
            other => other,
        })?;
        let target = load_feature_table(&tables.target).map_err(|e| match e {
            ProcalError::Io(io) => ProcalError::Parameter(format!(
                "cannot read target table {}: {io}",
                tables.target.display()
            )),
            other => other,
        })?;
        if source.dim() != target.dim() || source.classes() != target.classes() {
            return Err(ProcalError::ShapeMismatch(format!(
                "source table is {}d/{} classes but target table is {}d/{} classes",
                source.dim(),
                source.classes(),
                target.dim(),
                target.classes()
            )));
        }
        Ok((source, target))
    }

    /// The full network shape for a given dataset.
    pub fn model_config(&self, dataset: &LabeledDataset) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.dim(),
            hidden_dim: self.model.hidden_dim,
            feature_dim: self.model.feature_dim,
            classes: dataset.classes(),
        }
    }
}
