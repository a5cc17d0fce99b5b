use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use survey_sentiment::Polarity;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "survey-sentiment",
    version,
    about = "Polarity classification and reporting for survey free text"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialization and batch order.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build vocab.txt from the texts of a CSV corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a classifier on the train part of a labeled CSV.
    Train(TrainArgs),
    /// Score a checkpoint on labeled data.
    Eval(EvalArgs),
    /// Train and score once per split ratio, then print the accuracy table.
    Protocol(ProtocolArgs),
    /// Classify every row of a CSV and write predictions plus a report.
    Predict(PredictArgs),
    /// Rebuild the report from an existing predictions CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Corpus CSV (overrides paths.train_csv).
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Output vocabulary file (default <out>/vocab.txt).
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub max_size: Option<usize>,
    #[arg(long, value_name = "N")]
    pub min_freq: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled CSV (overrides paths.train_csv).
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Output checkpoint (default <out>/model.ckpt).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Train:test ratio such as 80:20.
    #[arg(long, value_name = "A:B")]
    pub ratio: Option<String>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labeled CSV scored in full. Without it, the held-out part of
    /// paths.train_csv under the configured split is scored.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Comma-separated ratios, e.g. 70:30,80:20,90:10.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub ratios: Option<Vec<String>>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportFlags {
    /// Stopword list, one word per line (default: bundled Spanish list).
    #[arg(long, value_name = "PATH")]
    pub stopwords: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,
    /// Count Neutral predictions as this class in the distribution.
    #[arg(long, value_name = "CLASS")]
    pub collapse_neutral: Option<Polarity>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// CSV to classify (overrides paths.predict_csv).
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Predictions CSV (default <out>/predictions.csv).
    #[arg(long, value_name = "PATH")]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub report: ReportFlags,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl Common {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.out_dir, self.out.clone());
    }
}

impl ReportFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set_opt(&mut cfg.paths.stopwords, self.stopwords.clone());
        set(&mut cfg.report.top_k, self.top_k);
        set_opt(&mut cfg.report.collapse_neutral, self.collapse_neutral);
    }
}

impl Command {
    /// Writes command flags over the loaded config.
    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Command::BuildVocab(a) => {
                set_opt(&mut cfg.paths.train_csv, a.input.clone());
                set_opt(&mut cfg.paths.vocab, a.vocab.clone());
                set(&mut cfg.vocab.max_size, a.max_size);
                set(&mut cfg.vocab.min_freq, a.min_freq);
            }
            Command::Train(a) => {
                set_opt(&mut cfg.paths.train_csv, a.input.clone());
                set_opt(&mut cfg.paths.vocab, a.vocab.clone());
                set_opt(&mut cfg.paths.checkpoint, a.checkpoint.clone());
                set(&mut cfg.split.ratio, a.ratio.clone());
                set(&mut cfg.train.epochs, a.epochs);
                set(&mut cfg.train.batch_size, a.batch_size);
                set(&mut cfg.train.learning_rate, a.learning_rate);
            }
            Command::Eval(a) => {
                set_opt(&mut cfg.paths.eval_csv, a.input.clone());
                set_opt(&mut cfg.paths.vocab, a.vocab.clone());
                set_opt(&mut cfg.paths.checkpoint, a.checkpoint.clone());
            }
            Command::Protocol(a) => {
                set_opt(&mut cfg.paths.train_csv, a.input.clone());
                set_opt(&mut cfg.paths.vocab, a.vocab.clone());
                set(&mut cfg.protocol_ratios, a.ratios.clone());
                set(&mut cfg.train.epochs, a.epochs);
            }
            Command::Predict(a) => {
                set_opt(&mut cfg.paths.predict_csv, a.input.clone());
                set_opt(&mut cfg.paths.vocab, a.vocab.clone());
                set_opt(&mut cfg.paths.checkpoint, a.checkpoint.clone());
                a.report.apply(cfg);
            }
            Command::Report(a) => {
                set_opt(&mut cfg.paths.predictions_csv, a.predictions.clone());
                a.report.apply(cfg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_win_over_config() {
        let cli = Cli::parse_from([
            "survey-sentiment",
            "train",
            "--seed",
            "7",
            "--epochs",
            "2",
            "--ratio",
            "90:10",
            "--out",
            "o",
        ]);
        let mut cfg = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        cfg.train.epochs = 5;
        cli.common.apply(&mut cfg);
        cli.command.apply(&mut cfg);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.split.ratio, "90:10");
        assert_eq!(cfg.out_dir, PathBuf::from("o"));
    }

    #[test]
    fn ratio_list_and_polarity_parse() {
        let cli = Cli::parse_from(["x", "protocol", "--ratios", "70:30,90:10"]);
        let mut cfg = RunConfig::default();
        cli.command.apply(&mut cfg);
        assert_eq!(cfg.protocol_ratios, ["70:30", "90:10"]);
        let cli = Cli::parse_from(["x", "report", "--collapse-neutral", "negative"]);
        cli.command.apply(&mut cfg);
        assert_eq!(cfg.report.collapse_neutral, Some(Polarity::Negative));
    }
}
