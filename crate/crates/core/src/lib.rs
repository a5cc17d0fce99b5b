//! Survey sentiment pipeline: CSV ingestion, WordPiece tokenization, a small
//! bidirectional self-attention encoder trained from scratch with tape-based
//! reverse-mode differentiation, and polarity/word-frequency reporting.

pub mod analysis;
pub mod corpus;
pub mod encoder;
pub mod nn;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use corpus::{DatasetSplit, Polarity, SurveyRecord};
pub use encoder::{EncoderParams, ModelConfig};
pub use tokenizer::{TokenizedSequence, Vocabulary};
