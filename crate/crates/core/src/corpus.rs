//! Survey CSV ingestion, satisfaction-level labeling and train/test splits.
//!
//! Splits are drawn with `ChaCha8Rng::seed_from_u64(seed)` followed by a
//! Fisher-Yates shuffle (`rand` 0.9 `SliceRandom::shuffle`), so a given
//! `(dataset, ratio, seed)` always yields the same partition.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {column:?} not found in header {header:?}")]
    MissingColumn { column: String, header: Vec<String> },
    #[error("unknown satisfaction level {0:?}")]
    UnknownLevel(String),
    #[error("unrecognized label {0:?}")]
    UnknownLabel(String),
    #[error("split ratio {0}:{1} must have positive parts summing to 100")]
    BadRatio(u32, u32),
    #[error("dataset has {0} records; a split needs at least 2")]
    TooSmall(usize),
    #[error("record {0} has no gold label")]
    Unlabeled(usize),
}

/// Sentiment class. The discriminant doubles as the classifier output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "negative" | "negativo" | "neg" | "0" => Ok(Polarity::Negative),
            "neutral" | "neutro" | "neu" | "1" => Ok(Polarity::Neutral),
            "positive" | "positivo" | "pos" | "2" => Ok(Polarity::Positive),
            _ => Err(CorpusError::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub id: usize,
    pub text: String,
    pub meta: Option<String>,
    pub label: Option<Polarity>,
}

/// How the label column is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Polarity names or class indices (`negative`, `2`, ...).
    #[default]
    Polarity,
    /// Satisfaction levels resolved through a [`SatisfactionMap`].
    Satisfaction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub text_col: String,
    pub label_col: Option<String>,
    pub meta_col: Option<String>,
    pub delimiter: char,
    pub label_kind: LabelKind,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            text_col: "text".to_string(),
            label_col: None,
            meta_col: None,
            delimiter: ',',
            label_kind: LabelKind::Polarity,
        }
    }
}

/// A data row that could not be turned into a record. Not fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCsv {
    pub records: Vec<SurveyRecord>,
    pub dropped_empty: usize,
    pub row_errors: Vec<RowError>,
}

/// Case- and whitespace-insensitive lookup from satisfaction level to polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionMap(BTreeMap<String, Polarity>);

impl Default for SatisfactionMap {
    fn default() -> Self {
        let pairs = [
            ("muy satisfecho", Polarity::Positive),
            ("very satisfied", Polarity::Positive),
            ("satisfecho", Polarity::Positive),
            ("satisfied", Polarity::Positive),
            ("poco satisfecho", Polarity::Negative),
            ("little satisfied", Polarity::Negative),
            ("insatisfecho", Polarity::Negative),
            ("unsatisfied", Polarity::Negative),
            ("neutral", Polarity::Neutral),
            ("regular", Polarity::Neutral),
        ];
        Self(pairs.iter().map(|(k, p)| (k.to_string(), *p)).collect())
    }
}

impl SatisfactionMap {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Polarity)>,
        S: AsRef<str>,
    {
        Self(
            pairs
                .into_iter()
                .map(|(k, p)| (normalize_level(k.as_ref()), p))
                .collect(),
        )
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn lookup(&self, level: &str) -> Result<Polarity, CorpusError> {
        self.0
            .get(&normalize_level(level))
            .copied()
            .ok_or_else(|| CorpusError::UnknownLevel(level.to_string()))
    }
}

fn normalize_level(level: &str) -> String {
    level
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Maps a satisfaction level through the default bilingual table.
pub fn map_satisfaction_to_polarity(level: &str) -> Result<Polarity, CorpusError> {
    SatisfactionMap::default().lookup(level)
}

/// Loads survey rows from a headered CSV file.
///
/// Rows whose text is blank are dropped and counted; rows that fail to parse
/// (ragged, undecodable, bad label) are collected in `row_errors` with their
/// line number. Ids are assigned to admitted records in file order from 0.
pub fn load_csv(
    path: &Path,
    schema: &CsvSchema,
    levels: &SatisfactionMap,
) -> Result<LoadedCsv, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(BufReader::new(file), schema, levels)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &CsvSchema,
    levels: &SatisfactionMap,
) -> Result<LoadedCsv, CorpusError> {
    let delimiter = u8::try_from(schema.delimiter)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| CorpusError::UnknownLabel(format!("delimiter {:?}", schema.delimiter)))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name.trim())
            .ok_or_else(|| CorpusError::MissingColumn {
                column: name.to_string(),
                header: header.clone(),
            })
    };
    let text_idx = find(&schema.text_col)?;
    let label_idx = schema.label_col.as_deref().map(&find).transpose()?;
    let meta_idx = schema.meta_col.as_deref().map(&find).transpose()?;

    let mut out = LoadedCsv::default();
    for result in rdr.records() {
        let row = match result {
            Ok(row) => row,
            Err(err) => {
                let line = err.position().map(|p| p.line()).unwrap_or(0);
                out.row_errors.push(RowError {
                    line,
                    message: err.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let text = row.get(text_idx).unwrap_or_default();
        if text.trim().is_empty() {
            out.dropped_empty += 1;
            continue;
        }
        let meta = meta_idx.and_then(|i| row.get(i)).map(str::to_string);
        let label = match label_idx.and_then(|i| row.get(i)) {
            None => None,
            Some(raw) if raw.trim().is_empty() => None,
            Some(raw) => {
                let parsed = match schema.label_kind {
                    LabelKind::Polarity => raw.parse::<Polarity>(),
                    LabelKind::Satisfaction => levels.lookup(raw),
                };
                match parsed {
                    Ok(p) => Some(p),
                    Err(err) => {
                        out.row_errors.push(RowError {
                            line,
                            message: err.to_string(),
                        });
                        continue;
                    }
                }
            }
        };
        out.records.push(SurveyRecord {
            id: out.records.len(),
            text: text.to_string(),
            meta,
            label,
        });
    }
    Ok(out)
}

/// Writes records as `id,text,meta,label` with a header row.
pub fn write_csv<W: Write>(writer: W, records: &[SurveyRecord]) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "text", "meta", "label"])?;
    for r in records {
        w.write_record([
            r.id.to_string().as_str(),
            &r.text,
            r.meta.as_deref().unwrap_or(""),
            r.label.map(Polarity::as_str).unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub test: u32,
}

impl SplitRatio {
    pub const PROTOCOL: [SplitRatio; 3] = [
        SplitRatio {
            train: 70,
            test: 30,
        },
        SplitRatio {
            train: 80,
            test: 20,
        },
        SplitRatio {
            train: 90,
            test: 10,
        },
    ];

    pub fn new(train: u32, test: u32) -> Result<Self, CorpusError> {
        if train == 0 || test == 0 || train + test != 100 {
            return Err(CorpusError::BadRatio(train, test));
        }
        Ok(Self { train, test })
    }

    /// `floor(n * train / 100)`.
    pub fn train_len(self, n: usize) -> usize {
        n * self.train as usize / 100
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.train, self.test)
    }
}

impl FromStr for SplitRatio {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::UnknownLabel(format!("ratio {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        SplitRatio::new(a, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SurveyRecord>,
    pub test: Vec<SurveyRecord>,
    pub ratio: SplitRatio,
    pub seed: u64,
}

/// Seeded shuffle-then-cut split.
pub fn split(
    dataset: &[SurveyRecord],
    ratio: SplitRatio,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let ratio = SplitRatio::new(ratio.train, ratio.test)?;
    if dataset.len() < 2 {
        return Err(CorpusError::TooSmall(dataset.len()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ratio.train_len(dataset.len());
    let take = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: take(&order[..cut]),
        test: take(&order[cut..]),
        ratio,
        seed,
    })
}

/// Split that preserves label proportions: each class is shuffled and cut by
/// the floor formula, and the remainder needed to reach the global train size
/// is taken from the leftover pool. Every record must carry a label.
pub fn split_stratified(
    dataset: &[SurveyRecord],
    ratio: SplitRatio,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let ratio = SplitRatio::new(ratio.train, ratio.test)?;
    if dataset.len() < 2 {
        return Err(CorpusError::TooSmall(dataset.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: HashMap<Polarity, Vec<usize>> = HashMap::new();
    for (i, r) in dataset.iter().enumerate() {
        let label = r.label.ok_or(CorpusError::Unlabeled(r.id))?;
        by_class.entry(label).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut rest = Vec::new();
    for p in Polarity::ALL {
        if let Some(mut idx) = by_class.remove(&p) {
            idx.shuffle(&mut rng);
            let cut = ratio.train_len(idx.len());
            train_idx.extend_from_slice(&idx[..cut]);
            rest.extend_from_slice(&idx[cut..]);
        }
    }
    rest.shuffle(&mut rng);
    let need = ratio.train_len(dataset.len()) - train_idx.len();
    train_idx.extend(rest.drain(..need));
    train_idx.shuffle(&mut rng);
    Ok(DatasetSplit {
        train: train_idx.iter().map(|&i| dataset[i].clone()).collect(),
        test: rest.iter().map(|&i| dataset[i].clone()).collect(),
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_table2() -> CsvSchema {
        CsvSchema {
            text_col: "Suggestions".into(),
            label_col: Some("Level of satisfaction".into()),
            meta_col: Some("Level of satisfaction".into()),
            label_kind: LabelKind::Satisfaction,
            ..CsvSchema::default()
        }
    }

    fn records(n: usize) -> Vec<SurveyRecord> {
        (0..n)
            .map(|id| SurveyRecord {
                id,
                text: format!("t{id}"),
                meta: None,
                label: Some(Polarity::ALL[id % 3]),
            })
            .collect()
    }

    #[test]
    fn table2_row() {
        let data = "Level of satisfaction,Suggestions\nSatisfied,Share the material with us\n";
        let loaded = read_csv(
            data.as_bytes(),
            &schema_table2(),
            &SatisfactionMap::default(),
        )
        .unwrap();
        assert_eq!(loaded.records.len(), 1);
        let r = &loaded.records[0];
        assert_eq!(r.text, "Share the material with us");
        assert_eq!(r.meta.as_deref(), Some("Satisfied"));
        assert_eq!(r.label, Some(Polarity::Positive));
        assert_eq!(r.id, 0);
    }

    #[test]
    fn header_only() {
        let loaded = read_csv(
            "Level of satisfaction,Suggestions\n".as_bytes(),
            &schema_table2(),
            &SatisfactionMap::default(),
        )
        .unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.dropped_empty, 0);
    }

    #[test]
    fn drops_empty_text_rows() {
        let mut data = String::from("dept,text\n");
        for i in 0..10 {
            if i == 3 || i == 7 {
                data.push_str("DERECHO,   \n");
            } else {
                data.push_str(&format!("DERECHO,comentario {i}\n"));
            }
        }
        let schema = CsvSchema {
            meta_col: Some("dept".into()),
            ..CsvSchema::default()
        };
        let loaded = read_csv(data.as_bytes(), &schema, &SatisfactionMap::default()).unwrap();
        assert_eq!(loaded.records.len(), 8);
        assert_eq!(loaded.dropped_empty, 2);
        let ids: Vec<_> = loaded.records.iter().map(|r| r.id).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn missing_column_is_named() {
        let err = read_csv(
            "a,b\n1,2\n".as_bytes(),
            &CsvSchema::default(),
            &SatisfactionMap::default(),
        )
        .unwrap_err();
        match err {
            CorpusError::MissingColumn { column, .. } => assert_eq!(column, "text"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_rows_collected_with_line() {
        let data = "text,label\nbien,positive\nmal,negative,extra\nregular,whatever\nok,neutral\n";
        let schema = CsvSchema {
            label_col: Some("label".into()),
            ..CsvSchema::default()
        };
        let loaded = read_csv(data.as_bytes(), &schema, &SatisfactionMap::default()).unwrap();
        assert_eq!(loaded.records.len(), 2);
        let lines: Vec<_> = loaded.row_errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![3, 4]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_csv(
            Path::new("/nonexistent/survey.csv"),
            &CsvSchema::default(),
            &SatisfactionMap::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn satisfaction_levels() {
        assert_eq!(
            map_satisfaction_to_polarity("Very satisfied").unwrap(),
            Polarity::Positive
        );
        assert_eq!(
            map_satisfaction_to_polarity("little satisfied").unwrap(),
            Polarity::Negative
        );
        assert_eq!(
            map_satisfaction_to_polarity("  SATISFIED ").unwrap(),
            Polarity::Positive
        );
        assert_eq!(
            map_satisfaction_to_polarity("Muy  Satisfecho").unwrap(),
            Polarity::Positive
        );
        assert_eq!(
            map_satisfaction_to_polarity("regular").unwrap(),
            Polarity::Neutral
        );
        match map_satisfaction_to_polarity("ecstatic") {
            Err(CorpusError::UnknownLevel(s)) => assert_eq!(s, "ecstatic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_map_overrides() {
        let map = SatisfactionMap::from_pairs([("Satisfied", Polarity::Neutral)]);
        assert_eq!(map.lookup("satisfied").unwrap(), Polarity::Neutral);
        assert!(map.lookup("very satisfied").is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split(&records(10), SplitRatio::new(80, 20).unwrap(), 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = split(&records(506), SplitRatio::new(70, 30).unwrap(), 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (354, 152));
    }

    #[test]
    fn split_is_deterministic() {
        let data = records(50);
        let r = SplitRatio::new(80, 20).unwrap();
        let a = split(&data, r, 42).unwrap();
        let b = split(&data, r, 42).unwrap();
        assert_eq!(a, b);
        let c = split(&data, r, 43).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            SplitRatio::new(80, 30),
            Err(CorpusError::BadRatio(80, 30))
        ));
        assert!(matches!(
            SplitRatio::new(0, 100),
            Err(CorpusError::BadRatio(0, 100))
        ));
        let bad = SplitRatio {
            train: 50,
            test: 40,
        };
        assert!(matches!(
            split(&records(10), bad, 0),
            Err(CorpusError::BadRatio(..))
        ));
        let r = SplitRatio::new(80, 20).unwrap();
        assert!(matches!(
            split(&records(1), r, 0),
            Err(CorpusError::TooSmall(1))
        ));
    }

    #[test]
    fn stratified_keeps_class_balance() {
        let data = records(300);
        let s = split_stratified(&data, SplitRatio::new(80, 20).unwrap(), 9).unwrap();
        assert_eq!(s.train.len(), 240);
        for p in Polarity::ALL {
            let n = s.train.iter().filter(|r| r.label == Some(p)).count();
            assert_eq!(n, 80);
        }
    }

    #[test]
    fn ratio_parse() {
        assert_eq!(
            "80:20".parse::<SplitRatio>().unwrap(),
            SplitRatio {
                train: 80,
                test: 20
            }
        );
        assert!("80-20".parse::<SplitRatio>().is_err());
    }
}
