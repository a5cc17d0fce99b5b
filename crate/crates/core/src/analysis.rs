//! Scoring unlabeled survey text and summarizing the result: polarity
//! distribution, word frequencies (overall and per polarity) and the
//! per-record predictions CSV.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Polarity, SurveyRecord};
use crate::encoder::{self, EncoderParams, ModelConfig, ModelError};
use crate::tokenizer::{self, TokenizerError, Vocabulary};

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords_es.txt");
/// Tokens shorter than this many characters are not counted.
pub const MIN_WORD_CHARS: usize = 2;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no records")]
    Empty,
    #[error("{records} records but {predictions} predictions")]
    LengthMismatch { records: usize, predictions: usize },
    #[error("prediction for id {got} does not line up with record id {expected}")]
    IdMismatch { expected: usize, got: usize },
    #[error("top-k must be at least 1")]
    BadK,
    #[error("predictions csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("predictions csv line {line}: {message}")]
    BadRow { line: u64, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Normalized stopword set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    /// The bundled Spanish list.
    pub fn spanish() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    /// One word per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for Stopwords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(
            iter.into_iter()
                .map(|w| tokenizer::normalize(w.as_ref()))
                .collect(),
        )
    }
}

/// Inference-mode polarity for every record, in input order.
pub fn predict_corpus(
    records: &[SurveyRecord],
    vocab: &Vocabulary,
    params: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<Vec<(usize, Polarity)>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    records
        .iter()
        .map(|r| {
            let seq = tokenizer::encode(&r.text, vocab, cfg.max_len)?;
            Ok((r.id, encoder::predict(&seq, params, cfg)?))
        })
        .collect()
}

/// Counts and one-decimal percentages for all three classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub counts: BTreeMap<Polarity, usize>,
    pub percentages: BTreeMap<Polarity, f64>,
}

/// `100 * count / n` rounded half-up to one decimal, in integer arithmetic.
fn percent_tenths(count: usize, n: usize) -> f64 {
    let tenths = (2000 * count + n) / (2 * n);
    tenths as f64 / 10.0
}

pub fn distribution(predictions: &[Polarity]) -> Result<Distribution, AnalysisError> {
    if predictions.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let n = predictions.len();
    let mut counts: BTreeMap<Polarity, usize> = Polarity::ALL.iter().map(|&p| (p, 0)).collect();
    for p in predictions {
        *counts.get_mut(p).expect("all classes present") += 1;
    }
    let percentages = counts
        .iter()
        .map(|(&p, &c)| (p, percent_tenths(c, n)))
        .collect();
    Ok(Distribution {
        n,
        counts,
        percentages,
    })
}

/// Maps every Neutral prediction to `into`, for two-sided summaries.
pub fn collapse_neutral(predictions: &[Polarity], into: Polarity) -> Vec<Polarity> {
    predictions
        .iter()
        .map(|&p| if p == Polarity::Neutral { into } else { p })
        .collect()
}

fn is_pure_punct(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

/// Top-`k` normalized words by count (descending), ties broken
/// lexicographically, skipping stopwords, pure punctuation and tokens
/// shorter than `min_chars`.
pub fn word_frequencies_with<S: AsRef<str>>(
    texts: &[S],
    stopwords: &Stopwords,
    k: usize,
    min_chars: usize,
) -> Result<Vec<(String, usize)>, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::BadK);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in tokenizer::normalize(text.as_ref()).split(' ') {
            if tok.chars().count() < min_chars || is_pure_punct(tok) || stopwords.contains(tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    Ok(out)
}

pub fn word_frequencies<S: AsRef<str>>(
    texts: &[S],
    stopwords: &Stopwords,
    k: usize,
) -> Result<Vec<(String, usize)>, AnalysisError> {
    word_frequencies_with(texts, stopwords, k, MIN_WORD_CHARS)
}

/// Records whose prediction equals `polarity`, in input order. `predictions`
/// must line up with `records` one-to-one by id.
pub fn filter_by_polarity(
    records: &[SurveyRecord],
    predictions: &[(usize, Polarity)],
    polarity: Polarity,
) -> Result<Vec<SurveyRecord>, AnalysisError> {
    if records.len() != predictions.len() {
        return Err(AnalysisError::LengthMismatch {
            records: records.len(),
            predictions: predictions.len(),
        });
    }
    let mut out = Vec::new();
    for (r, &(id, p)) in records.iter().zip(predictions) {
        if r.id != id {
            return Err(AnalysisError::IdMismatch {
                expected: r.id,
                got: id,
            });
        }
        if p == polarity {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// The JSON report: distribution plus word-cloud data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentReport {
    pub n: usize,
    pub counts: BTreeMap<Polarity, usize>,
    pub percentages: BTreeMap<Polarity, f64>,
    pub top_words: Vec<(String, usize)>,
    pub per_polarity_top_words: BTreeMap<Polarity, Vec<(String, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collapsed_neutral_into: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub top_k: usize,
    pub collapse_neutral: Option<Polarity>,
    pub min_chars: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            top_k: 30,
            collapse_neutral: None,
            min_chars: MIN_WORD_CHARS,
        }
    }
}

pub fn build_report(
    records: &[SurveyRecord],
    predictions: &[(usize, Polarity)],
    stopwords: &Stopwords,
    opts: &ReportOptions,
) -> Result<SentimentReport, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let labels: Vec<Polarity> = predictions.iter().map(|&(_, p)| p).collect();
    let labels = match opts.collapse_neutral {
        Some(into) => collapse_neutral(&labels, into),
        None => labels,
    };
    let aligned: Vec<(usize, Polarity)> = predictions
        .iter()
        .map(|&(id, _)| id)
        .zip(labels.iter().copied())
        .collect();
    let dist = distribution(&labels)?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let top_words = word_frequencies_with(&texts, stopwords, opts.top_k, opts.min_chars)?;
    let mut per_polarity_top_words = BTreeMap::new();
    for p in Polarity::ALL {
        let subset = filter_by_polarity(records, &aligned, p)?;
        let texts: Vec<&str> = subset.iter().map(|r| r.text.as_str()).collect();
        per_polarity_top_words.insert(
            p,
            word_frequencies_with(&texts, stopwords, opts.top_k, opts.min_chars)?,
        );
    }
    Ok(SentimentReport {
        n: dist.n,
        counts: dist.counts,
        percentages: dist.percentages,
        top_words,
        per_polarity_top_words,
        collapsed_neutral_into: opts.collapse_neutral,
    })
}

impl SentimentReport {
    /// Plain-text summary with a word list scaled into five size classes.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} records\n", self.n);
        for p in Polarity::ALL {
            s.push_str(&format!(
                "  {:<9} {:>6}  {:>5.1}%\n",
                p.as_str(),
                self.counts.get(&p).copied().unwrap_or(0),
                self.percentages.get(&p).copied().unwrap_or(0.0)
            ));
        }
        s.push_str("word cloud (size 1-5, count):\n");
        let max = self.top_words.first().map_or(1, |w| w.1.max(1));
        for (word, count) in &self.top_words {
            let size = 1 + (4 * count) / max;
            s.push_str(&format!("  [{size}] {word} ({count})\n"));
        }
        s
    }
}

/// `id,text,polarity` rows with a header.
pub fn write_predictions_csv<W: Write>(
    w: W,
    records: &[SurveyRecord],
    predictions: &[(usize, Polarity)],
) -> Result<(), AnalysisError> {
    if records.len() != predictions.len() {
        return Err(AnalysisError::LengthMismatch {
            records: records.len(),
            predictions: predictions.len(),
        });
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["id", "text", "polarity"])?;
    for (r, &(id, p)) in records.iter().zip(predictions) {
        if r.id != id {
            return Err(AnalysisError::IdMismatch {
                expected: r.id,
                got: id,
            });
        }
        out.write_record([id.to_string().as_str(), &r.text, p.as_str()])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Records paired with their predictions, as stored in a predictions CSV.
pub type PredictionSet = (Vec<SurveyRecord>, Vec<(usize, Polarity)>);

/// Reads a file written by [`write_predictions_csv`].
pub fn read_predictions_csv<R: Read>(r: R) -> Result<PredictionSet, AnalysisError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut records = Vec::new();
    let mut preds = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| AnalysisError::BadRow { line, message };
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", row.len())));
        }
        let id: usize = row[0]
            .parse()
            .map_err(|_| bad(format!("bad id {:?}", &row[0])))?;
        let p: Polarity = row[2]
            .parse()
            .map_err(|_| bad(format!("bad polarity {:?}", &row[2])))?;
        records.push(SurveyRecord {
            id,
            text: row[1].to_string(),
            meta: None,
            label: None,
        });
        preds.push((id, p));
    }
    Ok((records, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Polarity::*;

    fn rec(id: usize, text: &str) -> SurveyRecord {
        SurveyRecord {
            id,
            text: text.into(),
            meta: None,
            label: None,
        }
    }

    #[test]
    fn distribution_examples() {
        let d = distribution(&[Negative, Negative, Negative, Positive]).unwrap();
        assert_eq!(d.percentages[&Negative], 75.0);
        assert_eq!(d.percentages[&Neutral], 0.0);
        assert_eq!(d.percentages[&Positive], 25.0);
        assert_eq!(d.counts[&Neutral], 0);

        let d = distribution(&[Neutral; 7]).unwrap();
        assert_eq!(d.percentages[&Neutral], 100.0);
        assert_eq!(d.n, 7);

        // 400 / 106 of 506
        let preds: Vec<_> = std::iter::repeat_n(Negative, 400)
            .chain(std::iter::repeat_n(Positive, 106))
            .collect();
        let d = distribution(&preds).unwrap();
        assert_eq!(d.percentages[&Negative], 79.1);
        assert_eq!(d.percentages[&Positive], 20.9);

        assert!(matches!(distribution(&[]), Err(AnalysisError::Empty)));
    }

    #[test]
    fn collapse_maps_neutral() {
        assert_eq!(
            collapse_neutral(&[Neutral, Positive, Negative], Negative),
            vec![Negative, Positive, Negative]
        );
    }

    #[test]
    fn word_frequency_examples() {
        let none = Stopwords::default();
        assert_eq!(
            word_frequencies(&["mejorar mejorar diapositivas"], &none, 2).unwrap(),
            vec![("mejorar".to_string(), 2), ("diapositivas".to_string(), 1)]
        );
        assert_eq!(
            word_frequencies_with(&["a b", "b a"], &none, 5, 1).unwrap(),
            vec![("a".to_string(), 2), ("b".to_string(), 2)]
        );
        let es = Stopwords::spanish();
        let got = word_frequencies(
            &["El curso de la docente, ¡Más diapositivas de práctica!"],
            &es,
            10,
        )
        .unwrap();
        assert!(got
            .iter()
            .all(|(w, _)| w != "de" && w != "mas" && w != "," && w != "¡"));
        assert_eq!(got.len(), 4);
        assert!(word_frequencies::<&str>(&[], &es, 3).unwrap().is_empty());
        assert!(matches!(
            word_frequencies(&["x"], &es, 0),
            Err(AnalysisError::BadK)
        ));
    }

    #[test]
    fn bundled_stopwords_are_normalized() {
        let es = Stopwords::spanish();
        assert!(es.len() >= 300);
        assert!(es.contains("de") && es.contains("tambien"));
        let custom = Stopwords::parse("# comment\nMÁS\n\n");
        assert!(custom.contains("mas") && custom.len() == 1);
    }

    #[test]
    fn filter_examples() {
        let records: Vec<_> = (0..6).map(|i| rec(i, &format!("t{i}"))).collect();
        let preds: Vec<_> = [Positive, Negative, Neutral, Positive, Negative, Positive]
            .into_iter()
            .enumerate()
            .collect();
        let neg = filter_by_polarity(&records, &preds, Negative).unwrap();
        assert_eq!(neg.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 4]);
        let all_pos: Vec<_> = (0..6).map(|i| (i, Positive)).collect();
        assert!(filter_by_polarity(&records, &all_pos, Negative)
            .unwrap()
            .is_empty());
        assert!(matches!(
            filter_by_polarity(&records, &preds[..5], Negative),
            Err(AnalysisError::LengthMismatch { .. })
        ));
        let mut shifted = preds.clone();
        shifted[2].0 = 9;
        assert!(matches!(
            filter_by_polarity(&records, &shifted, Negative),
            Err(AnalysisError::IdMismatch {
                expected: 2,
                got: 9
            })
        ));
    }

    #[test]
    fn report_and_csv_round_trip() {
        let records = vec![
            rec(0, "Mejorar las diapositivas"),
            rec(1, "Excelente taller, muy útil"),
            rec(2, "Más puntualidad, mejorar"),
        ];
        let preds = vec![(0, Negative), (1, Positive), (2, Neutral)];
        let report = build_report(
            &records,
            &preds,
            &Stopwords::spanish(),
            &ReportOptions::default(),
        )
        .unwrap();
        assert_eq!(report.n, 3);
        assert_eq!(report.top_words[0], ("mejorar".to_string(), 2));
        assert_eq!(report.per_polarity_top_words[&Positive].len(), 3);

        let collapsed = build_report(
            &records,
            &preds,
            &Stopwords::spanish(),
            &ReportOptions {
                collapse_neutral: Some(Negative),
                ..ReportOptions::default()
            },
        )
        .unwrap();
        assert_eq!(collapsed.counts[&Negative], 2);
        assert!(collapsed.per_polarity_top_words[&Neutral].is_empty());

        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &records, &preds).unwrap();
        let (back_records, back_preds) = read_predictions_csv(buf.as_slice()).unwrap();
        assert_eq!(back_preds, preds);
        assert_eq!(back_records, records);
        assert!(report.to_text().contains("negative"));
    }
}
