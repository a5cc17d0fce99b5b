//! Writes a seeded, balanced synthetic survey corpus as CSV.
//!
//! cargo run -p survey-sentiment --example synth_corpus -- 3000 0 > corpus.csv

use std::io::stdout;

use survey_sentiment::{corpus, synthetic};

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args
        .next()
        .map_or(3000, |s| s.parse().expect("n must be an integer"));
    let seed: u64 = args
        .next()
        .map_or(0, |s| s.parse().expect("seed must be an integer"));
    let records = synthetic::generate(n, seed);
    corpus::write_csv(stdout().lock(), &records).expect("write csv");
}
