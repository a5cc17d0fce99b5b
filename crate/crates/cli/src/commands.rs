use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{info, warn};
use survey_sentiment::analysis::{self, Stopwords};
use survey_sentiment::corpus::{self, CsvSchema, DatasetSplit};
use survey_sentiment::encoder::{Checkpoint, ModelConfig};
use survey_sentiment::tokenizer::{self, Vocabulary};
use survey_sentiment::training::{self, Example};
use survey_sentiment::SurveyRecord;

use crate::config::{artifact, RunConfig};
use crate::error::CliError;
use crate::fsutil::{require_file, write_atomic, write_json, write_text};

fn input_path(given: &Option<PathBuf>, what: &str, key: &str) -> Result<PathBuf, CliError> {
    let path = given
        .clone()
        .ok_or_else(|| CliError::usage(format!("no {what} given (use --input or paths.{key})")))?;
    require_file(what, &path)?;
    Ok(path)
}

fn load_records(
    cfg: &RunConfig,
    path: &Path,
    schema: &CsvSchema,
) -> Result<Vec<SurveyRecord>, CliError> {
    let loaded = corpus::load_csv(path, schema, &cfg.satisfaction_map())?;
    for e in &loaded.row_errors {
        warn!("{}:{}: skipped row: {}", path.display(), e.line, e.message);
    }
    if loaded.dropped_empty > 0 || !loaded.row_errors.is_empty() {
        println!(
            "{}: {} records, {} empty rows dropped, {} bad rows skipped",
            path.display(),
            loaded.records.len(),
            loaded.dropped_empty,
            loaded.row_errors.len()
        );
    }
    if loaded.records.is_empty() {
        return Err(CliError::usage(format!("no records in {}", path.display())));
    }
    Ok(loaded.records)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    let path = cfg.vocab_path();
    require_file("vocabulary", &path)?;
    Ok(Vocabulary::load(&path)?)
}

/// Loads the checkpoint and refuses it unless it was trained on `vocab`.
fn load_checkpoint(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint_path();
    require_file("checkpoint", &path)?;
    let ckpt = Checkpoint::load(&path)?;
    let fingerprint = vocab.fingerprint();
    if ckpt.vocab_sha256 != fingerprint {
        return Err(CliError::usage(format!(
            "vocabulary {} does not match checkpoint {}\n  checkpoint vocab sha256: {}\n  given vocab sha256:      {}",
            cfg.vocab_path().display(),
            path.display(),
            ckpt.vocab_sha256,
            fingerprint
        )));
    }
    Ok(ckpt)
}

fn load_stopwords(cfg: &RunConfig) -> Result<Stopwords, CliError> {
    match &cfg.paths.stopwords {
        None => Ok(Stopwords::spanish()),
        Some(path) => {
            require_file("stopword list", path)?;
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
            Ok(Stopwords::parse(&text))
        }
    }
}

fn split(cfg: &RunConfig, records: &[SurveyRecord]) -> Result<DatasetSplit, CliError> {
    let ratio = cfg.split_ratio()?;
    let split = if cfg.split.stratified {
        corpus::split_stratified(records, ratio, cfg.seed)?
    } else {
        corpus::split(records, ratio, cfg.seed)?
    };
    Ok(split)
}

fn encode(
    records: &[SurveyRecord],
    vocab: &Vocabulary,
    mcfg: &ModelConfig,
) -> Result<Vec<Example>, CliError> {
    Ok(training::encode_records(records, vocab, mcfg.max_len)?)
}

pub fn build_vocab(cfg: &RunConfig) -> Result<(), CliError> {
    let input = input_path(&cfg.paths.train_csv, "input CSV", "train_csv")?;
    let records = load_records(cfg, &input, &cfg.unlabeled_schema())?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let vocab = tokenizer::build_vocab(&texts, cfg.vocab.max_size, cfg.vocab.min_freq)?;
    let path = cfg.vocab_path();
    write_text(&path, &vocab.to_text())?;
    let coverage = tokenizer::coverage(&texts, &vocab);
    println!(
        "vocab: {} tokens, coverage {:.1}% of words over {} records -> {}",
        vocab.len(),
        100.0 * coverage,
        records.len(),
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let input = input_path(&cfg.paths.train_csv, "training CSV", "train_csv")?;
    let records = load_records(cfg, &input, &cfg.labeled_schema()?)?;
    let vocab = load_vocab(cfg)?;
    let mcfg = cfg.model_config(vocab.len())?;
    let tcfg = cfg.train_config()?;
    let split = split(cfg, &records)?;
    let train_set = encode(&split.train, &vocab, &mcfg)?;
    let heldout = encode(&split.test, &vocab, &mcfg)?;
    info!(
        "training on {} examples, holding out {} ({} split, seed {})",
        train_set.len(),
        heldout.len(),
        split.ratio,
        cfg.seed
    );
    let mut params = survey_sentiment::encoder::init_params(&mcfg)?;
    let history = training::train(&mut params, &mcfg, &train_set, &tcfg, Some(&heldout))?;

    let ckpt = Checkpoint {
        config: mcfg,
        params,
        vocab_sha256: vocab.fingerprint(),
    };
    let ckpt_path = cfg.checkpoint_path();
    write_atomic(&ckpt_path, |w| ckpt.write_to(w).map_err(CliError::from))?;
    write_json(&cfg.out(artifact::HISTORY_JSON), &history)?;
    write_text(&cfg.out(artifact::HISTORY_TXT), &history.to_table())?;

    print!("{}", history.to_table());
    if let Some(last) = history.epochs.last() {
        println!(
            "final: loss {:.6}, train accuracy {:.4}{} -> {}",
            last.mean_loss,
            last.train_accuracy,
            last.heldout_accuracy
                .map(|a| format!(", held-out accuracy {a:.4}"))
                .unwrap_or_default(),
            ckpt_path.display()
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    require_file("checkpoint", &cfg.checkpoint_path())?;
    let vocab = load_vocab(cfg)?;
    let ckpt = load_checkpoint(cfg, &vocab)?;
    let schema = cfg.labeled_schema()?;
    let records = match &cfg.paths.eval_csv {
        Some(path) => {
            require_file("evaluation CSV", path)?;
            load_records(cfg, path, &schema)?
        }
        None => {
            let input = input_path(
                &cfg.paths.train_csv,
                "evaluation CSV",
                "eval_csv or paths.train_csv",
            )?;
            let all = load_records(cfg, &input, &schema)?;
            let test = split(cfg, &all)?.test;
            info!(
                "scoring the {} held-out records of {}",
                test.len(),
                input.display()
            );
            test
        }
    };
    let data = encode(&records, &vocab, &ckpt.config)?;
    let metrics = training::evaluate(&ckpt.params, &ckpt.config, &data)?;
    write_json(&cfg.out(artifact::METRICS_JSON), &metrics)?;
    println!("{metrics}");
    Ok(())
}

pub fn protocol(cfg: &RunConfig) -> Result<(), CliError> {
    let input = input_path(&cfg.paths.train_csv, "training CSV", "train_csv")?;
    let records = load_records(cfg, &input, &cfg.labeled_schema()?)?;
    let vocab = load_vocab(cfg)?;
    let mcfg = cfg.model_config(vocab.len())?;
    let tcfg = cfg.train_config()?;
    let ratios = cfg.protocol_ratios()?;
    let table = training::run_protocol(
        &records,
        &vocab,
        &ratios,
        &mcfg,
        &tcfg,
        cfg.seed,
        cfg.split.stratified,
    )?;
    write_json(&cfg.out(artifact::PROTOCOL_JSON), &table)?;
    write_text(&cfg.out(artifact::PROTOCOL_TXT), &table.to_table())?;
    print!("{}", table.to_table());
    Ok(())
}

fn write_report(
    cfg: &RunConfig,
    records: &[SurveyRecord],
    preds: &[(usize, survey_sentiment::Polarity)],
) -> Result<(), CliError> {
    let stopwords = load_stopwords(cfg)?;
    let report = analysis::build_report(records, preds, &stopwords, &cfg.report_options()?)?;
    write_json(&cfg.out(artifact::REPORT_JSON), &report)?;
    let text = report.to_text();
    write_text(&cfg.out(artifact::REPORT_TXT), &text)?;
    print!("{text}");
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let input = input_path(&cfg.paths.predict_csv, "input CSV", "predict_csv")?;
    let vocab = load_vocab(cfg)?;
    let ckpt = load_checkpoint(cfg, &vocab)?;
    let records = load_records(cfg, &input, &cfg.unlabeled_schema())?;
    let preds = analysis::predict_corpus(&records, &vocab, &ckpt.params, &ckpt.config)?;
    let out = cfg.out(artifact::PREDICTIONS);
    write_atomic(&out, |w| {
        analysis::write_predictions_csv(w, &records, &preds).map_err(CliError::from)
    })?;
    info!("wrote {} predictions to {}", preds.len(), out.display());
    write_report(cfg, &records, &preds)
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.predictions_path();
    require_file("predictions CSV", &path)?;
    let file = File::open(&path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let (records, preds) = analysis::read_predictions_csv(BufReader::new(file))?;
    if records.is_empty() {
        return Err(CliError::usage(format!("no records in {}", path.display())));
    }
    write_report(cfg, &records, &preds)
}
