use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdaptConfig;
use crate::embed_store::{self, EmbeddingTable, SyntheticSpec, TableFormat};
use crate::error::{Result, ScrollError};
use crate::online_learner::ClassifierKind;
use crate::replay_buffer::BufferStrategy;
use crate::schedule::ScheduleSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_format")]
        format: TableFormat,
    },
}

fn default_format() -> TableFormat {
    TableFormat::Binary
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierConfig {
    Ncc,
    Ridge {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
}

impl ClassifierConfig {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            ClassifierConfig::Ncc => ClassifierKind::Ncc,
            ClassifierConfig::Ridge { .. } => ClassifierKind::Ridge,
        }
    }
}

fn default_strategy() -> BufferStrategy {
    BufferStrategy::Exemplar
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    /// Total slots; 0 runs memory-free.
    #[serde(default)]
    pub capacity: usize,
    #[serde(default = "default_strategy")]
    pub strategy: BufferStrategy,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 0,
            strategy: default_strategy(),
            seed: 0,
        }
    }
}

fn default_scenarios() -> Vec<(usize, usize)> {
    vec![(20, 20), (20, 80), (90, 10), (50, 50)]
}

fn default_study_strategies() -> Vec<BufferStrategy> {
    vec![BufferStrategy::Exemplar, BufferStrategy::Reservoir]
}

/// Per-class buffer study settings: `(buffer size, batch size)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<(usize, usize)>,
    #[serde(default = "default_study_strategies")]
    pub strategies: Vec<BufferStrategy>,
    /// Classes to study; all when absent.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenarios: default_scenarios(),
            strategies: default_study_strategies(),
            classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub schedule: ScheduleSpec,
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub buffer: BufferConfig,
    #[serde(default = "AdaptConfig::memory_free")]
    pub adapt: AdaptConfig,
    /// Stream positions (batches consumed) at which to evaluate
    /// intermediate predictors.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
    /// Base seed for sweep schedules and study shuffles.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = Self::from_json(&text)?;
        // Relative data paths resolve against the config file's directory.
        if let (DataSource::Files { train, test, .. }, Some(dir)) = (&mut cfg.data, path.as_ref().parent()) {
            for p in [train, test] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        self.schedule.validate()?;
        if let ClassifierConfig::Ridge { lambda } = self.classifier {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(ScrollError::Config("ridge lambda must be positive".into()));
            }
        }
        self.adapt.validate()?;
        if self.checkpoints.contains(&0) {
            return Err(ScrollError::Config("checkpoint positions start at 1".into()));
        }
        if let Some(study) = &self.study {
            if study.scenarios.iter().any(|&(b1, b2)| b1 == 0 || b2 == 0) {
                return Err(ScrollError::Config("study scenarios need positive sizes".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads (or generates) both splits and normalizes them.
pub fn load_data(source: &DataSource) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let (train, test) = match source {
        DataSource::Synthetic(spec) => embed_store::synthesize(spec)?,
        DataSource::Files { train, test, format } => {
            let loaded = embed_store::load_embeddings(train, *format)?;
            let test = embed_store::load_embeddings_with_mapping(test, *format, &loaded.label_mapping())?;
            (loaded.table, test)
        }
    };
    if train.dim() != test.dim() {
        return Err(ScrollError::Data(format!(
            "train width {} differs from test width {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok((embed_store::normalize(&train)?, embed_store::normalize(&test)?))
}
