//! Seeded three-class lexicon grammar for end-to-end checks.
//!
//! Every sentence mixes two to four class-indicative content words with
//! filler words shared by all classes. Classes are balanced (record `i` has
//! class `i % 3` before the final shuffle).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Polarity, SurveyRecord};

const NEGATIVE: &[&str] = &[
    "confuso",
    "impuntual",
    "aburrido",
    "desorganizado",
    "lento",
    "injusto",
    "ausente",
    "monótono",
    "tedioso",
    "deficiente",
    "improvisado",
    "desmotivado",
];
const NEUTRAL: &[&str] = &[
    "regular",
    "normal",
    "aceptable",
    "promedio",
    "estándar",
    "suficiente",
    "habitual",
    "común",
    "moderado",
    "básico",
    "intermedio",
    "ordinario",
];
const POSITIVE: &[&str] = &[
    "excelente",
    "claro",
    "dinámico",
    "puntual",
    "amable",
    "organizado",
    "interesante",
    "útil",
    "motivador",
    "paciente",
    "didáctico",
    "especialista",
];
const FILLER: &[&str] = &[
    "el",
    "docente",
    "curso",
    "la",
    "clase",
    "es",
    "muy",
    "sesiones",
    "fueron",
    "en",
    "general",
    "las",
    "explicaciones",
    "del",
    "profesor",
    "parece",
    "material",
    "semestre",
    "considero",
    "que",
    "tema",
    "su",
    "área",
    "taller",
    "con",
    "los",
    "estudiantes",
    "y",
    "desarrolla",
    "de",
    "manera",
];

pub fn lexicon(p: Polarity) -> &'static [&'static str] {
    match p {
        Polarity::Negative => NEGATIVE,
        Polarity::Neutral => NEUTRAL,
        Polarity::Positive => POSITIVE,
    }
}

pub fn filler() -> &'static [&'static str] {
    FILLER
}

/// One sentence of 8 to 14 words for class `p`.
pub fn sentence<R: Rng + ?Sized>(p: Polarity, rng: &mut R) -> String {
    let len = rng.random_range(8..=14);
    let content = rng.random_range(2..=4);
    let mut words: Vec<&str> = (0..len - content)
        .map(|_| *FILLER.choose(rng).expect("non-empty"))
        .collect();
    for _ in 0..content {
        let at = rng.random_range(0..=words.len());
        words.insert(at, lexicon(p).choose(rng).expect("non-empty"));
    }
    words.join(" ")
}

/// `n` labeled records with ids `0..n`, classes balanced to within one.
pub fn generate(n: usize, seed: u64) -> Vec<SurveyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Polarity> = (0..n).map(|i| Polarity::ALL[i % 3]).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(id, p)| SurveyRecord {
            id,
            text: sentence(p, &mut rng),
            meta: None,
            label: Some(p),
        })
        .collect()
}
