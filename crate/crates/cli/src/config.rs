//! The JSON run configuration. Every field is optional; flags override it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survey_sentiment::analysis::ReportOptions;
use survey_sentiment::corpus::{CsvSchema, SatisfactionMap, SplitRatio};
use survey_sentiment::encoder::ModelConfig;
use survey_sentiment::training::TrainConfig;
use survey_sentiment::Polarity;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Fixed artifact names inside the output directory.
pub mod artifact {
    pub const VOCAB: &str = "vocab.txt";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const HISTORY_JSON: &str = "history.json";
    pub const HISTORY_TXT: &str = "history.txt";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const PROTOCOL_JSON: &str = "protocol.json";
    pub const PROTOCOL_TXT: &str = "protocol.txt";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Seeds the split, the model init and the training order.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub csv: CsvSchema,
    /// Satisfaction level to polarity, used when `csv.label_kind` is
    /// `satisfaction`. Defaults to the built-in Spanish/English table.
    pub satisfaction_levels: Option<BTreeMap<String, Polarity>>,
    pub vocab: VocabSettings,
    /// `vocab_size` and `seed` are filled in at run time.
    pub model: ModelConfig,
    /// `seed` is filled in at run time.
    pub train: TrainConfig,
    pub split: SplitSettings,
    pub protocol_ratios: Vec<String>,
    pub report: ReportSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_csv: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
    pub predict_csv: Option<PathBuf>,
    /// Written by `build-vocab`, read by everything else. Default `<out>/vocab.txt`.
    pub vocab: Option<PathBuf>,
    /// Written by `train`, read by `eval` and `predict`. Default `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Read by `report`. Default `<out>/predictions.csv`.
    pub predictions_csv: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSettings {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            max_size: 8000,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub ratio: String,
    pub stratified: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            ratio: "80:20".into(),
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub top_k: usize,
    pub min_chars: usize,
    pub collapse_neutral: Option<Polarity>,
}

impl Default for ReportSettings {
    fn default() -> Self {
        let d = ReportOptions::default();
        Self {
            top_k: d.top_k,
            min_chars: d.min_chars,
            collapse_neutral: d.collapse_neutral,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: PathBuf::from("out"),
            paths: Paths::default(),
            csv: CsvSchema {
                label_col: Some("label".into()),
                ..CsvSchema::default()
            },
            satisfaction_levels: None,
            vocab: VocabSettings::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSettings::default(),
            protocol_ratios: SplitRatio::PROTOCOL
                .iter()
                .map(ToString::to_string)
                .collect(),
            report: ReportSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::usage(format!("config {origin}: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::usage(format!(
                "config {origin}: unsupported version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::missing("config file", path)
            } else {
                CliError::usage(format!("cannot read config {}: {e}", path.display()))
            }
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths
            .vocab
            .clone()
            .unwrap_or_else(|| self.out_dir.join(artifact::VOCAB))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join(artifact::CHECKPOINT))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.paths
            .predictions_csv
            .clone()
            .unwrap_or_else(|| self.out_dir.join(artifact::PREDICTIONS))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn split_ratio(&self) -> Result<SplitRatio, CliError> {
        parse_ratio(&self.split.ratio)
    }

    pub fn protocol_ratios(&self) -> Result<Vec<SplitRatio>, CliError> {
        if self.protocol_ratios.is_empty() {
            return Err(CliError::usage("protocol_ratios is empty"));
        }
        self.protocol_ratios
            .iter()
            .map(|r| parse_ratio(r))
            .collect()
    }

    pub fn satisfaction_map(&self) -> SatisfactionMap {
        match &self.satisfaction_levels {
            Some(levels) => {
                SatisfactionMap::from_pairs(levels.iter().map(|(k, p)| (k.as_str(), *p)))
            }
            None => SatisfactionMap::default(),
        }
    }

    /// Schema for inputs that carry no gold labels.
    pub fn unlabeled_schema(&self) -> CsvSchema {
        CsvSchema {
            label_col: None,
            ..self.csv.clone()
        }
    }

    pub fn labeled_schema(&self) -> Result<CsvSchema, CliError> {
        if self.csv.label_col.is_none() {
            return Err(CliError::usage(
                "csv.label_col must be set for labeled input",
            ));
        }
        Ok(self.csv.clone())
    }

    /// Model config for a vocabulary of `vocab_size` tokens, seeded from the run seed.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            vocab_size,
            seed: self.seed,
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn report_options(&self) -> Result<ReportOptions, CliError> {
        if self.report.top_k == 0 {
            return Err(CliError::usage("report.top_k must be at least 1"));
        }
        Ok(ReportOptions {
            top_k: self.report.top_k,
            collapse_neutral: self.report.collapse_neutral,
            min_chars: self.report.min_chars,
        })
    }
}

pub fn parse_ratio(s: &str) -> Result<SplitRatio, CliError> {
    s.parse::<SplitRatio>()
        .map_err(|e| CliError::usage(format!("bad split ratio {s:?}: {e}")))
}
