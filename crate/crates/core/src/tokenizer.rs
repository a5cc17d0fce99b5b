//! Uncased Spanish normalization, vocabulary construction and WordPiece
//! segmentation into fixed-length id sequences.
//!
//! Normalization strips every combining mark after NFD decomposition, which
//! includes the tilde of `ñ`: "año" and "ano" map to the same token.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const CONTINUATION: &str = "##";
/// Words longer than this (in chars) become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_size {max_size} cannot hold {needed} special and character tokens")]
    VocabTooSmall { max_size: usize, needed: usize },
    #[error("min_freq must be at least 1")]
    BadMinFreq,
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("vocabulary file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¿' | '¡'
                | '«'
                | '»'
                | '“'
                | '”'
                | '‘'
                | '’'
                | '…'
                | '–'
                | '—'
                | '·'
                | '°'
                | '€'
        )
}

/// Lowercases, strips accents, turns control characters into spaces, splits
/// punctuation into separate tokens and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let mut spaced = String::with_capacity(text.len());
    let stripped = text
        .to_lowercase()
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .collect::<String>();
    for c in stripped.nfc() {
        if c.is_control() || c.is_whitespace() {
            spaced.push(' ');
        } else if is_punct(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Bidirectional token/id map. Ids are contiguous from 0 and the four
/// special tokens occupy ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds from an ordered token list (line number = id).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let id_to_token: Vec<String> = tokens.into_iter().map(Into::into).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::Invalid(format!("id {i} must be {s}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if t.is_empty() || t.contains(['\n', '\r']) {
                return Err(TokenizerError::Invalid(format!("bad token at id {i}")));
            }
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `vocab.txt` rendering: one token per line, newline terminated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(text.lines())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the `vocab.txt` rendering; checkpoints record it.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Specials, then every observed character in word-initial form (sorted),
/// then the `##` forms, then whole words by descending frequency (ties
/// lexicographic) with count `>= min_freq` until `max_size` is reached.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    max_size: usize,
    min_freq: usize,
) -> Result<Vocabulary, TokenizerError> {
    if min_freq == 0 {
        return Err(TokenizerError::BadMinFreq);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in normalize(text.as_ref())
            .split(' ')
            .filter(|w| !w.is_empty())
        {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut alphabet: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    let needed = SPECIALS.len() + 2 * alphabet.len();
    if max_size < needed {
        return Err(TokenizerError::VocabTooSmall { max_size, needed });
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    tokens.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));

    let mut words: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, n)| *n >= min_freq && w.chars().count() > 1)
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = max_size - tokens.len();
    tokens.extend(words.into_iter().take(room).map(|(w, _)| w));

    Vocabulary::from_tokens(tokens)
}

/// Greedy longest-match WordPiece over one word. Returns `None` when some
/// position has no matching piece.
fn wordpiece(word: &str, vocab: &Vocabulary) -> Option<Vec<String>> {
    let chars: Vec<char> = word.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.extend(&chars[start..end]);
            if vocab.contains(&candidate) {
                found = Some(candidate.clone());
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Normalizes `text` and segments each word; unsegmentable or overlong words
/// become `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<String> {
    let mut out = Vec::new();
    for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
        if word.chars().count() > MAX_WORD_CHARS {
            out.push(UNK.to_string());
            continue;
        }
        match wordpiece(word, vocab) {
            Some(pieces) => out.extend(pieces),
            None => out.push(UNK.to_string()),
        }
    }
    out
}

/// Fraction of normalized corpus words that segment without `[UNK]`.
pub fn coverage<S: AsRef<str>>(corpus: &[S], vocab: &Vocabulary) -> f64 {
    let mut total = 0usize;
    let mut known = 0usize;
    for text in corpus {
        for word in normalize(text.as_ref())
            .split(' ')
            .filter(|w| !w.is_empty())
        {
            total += 1;
            if word.chars().count() <= MAX_WORD_CHARS && wordpiece(word, vocab).is_some() {
                known += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        known as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub true_len: usize,
}

impl TokenizedSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The unpadded prefix. Padded keys receive zero attention weight, so
    /// the `[CLS]` output is the same as for the full sequence.
    pub fn trimmed(&self) -> Self {
        Self {
            ids: self.ids[..self.true_len].to_vec(),
            mask: vec![1; self.true_len],
            true_len: self.true_len,
        }
    }

    /// Builds a sequence from raw ids (`[CLS]`/`[SEP]` already included),
    /// truncating or padding to `max_len`.
    pub fn from_ids(ids: &[u32], max_len: usize) -> Self {
        let true_len = ids.len().min(max_len);
        let mut out = vec![PAD_ID; max_len];
        out[..true_len].copy_from_slice(&ids[..true_len]);
        let mut mask = vec![0u8; max_len];
        mask[..true_len].fill(1);
        Self {
            ids: out,
            mask,
            true_len,
        }
    }
}

/// `[CLS] pieces [SEP]`, keeping the leftmost `max_len - 2` pieces, padded
/// with `[PAD]` (id 0).
pub fn encode(
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenizedSequence, TokenizerError> {
    if max_len < 3 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(
        tokenize(text, vocab)
            .iter()
            .take(max_len - 2)
            .map(|p| vocab.id(p).unwrap_or(UNK_ID)),
    );
    ids.push(SEP_ID);
    Ok(TokenizedSequence::from_ids(&ids, max_len))
}
