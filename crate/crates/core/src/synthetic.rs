//! Seeded synthetic corpora with planted keyphrases, for learning checks
//! that need labels whose signal source is known exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::DatasetRecord;
use crate::visual::{VisualVector, NODE_FEATURES, VISUAL_DIM};
use crate::weak::QueryLogRecord;

const FONT: usize = 0;
const BOLD: usize = 5;

/// Where the keyphrase signal lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cue {
    /// Keyphrase words come from their own vocabulary; visual rows are
    /// identical for every token.
    Lexical,
    /// Keyphrase and filler words share one vocabulary; keyphrase tokens
    /// are bold and set in the largest font.
    Visual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub documents: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_phrase: usize,
    pub max_phrase: usize,
    pub keyphrase_words: usize,
    pub filler_words: usize,
    /// Size of a vocabulary of rare non-keyphrase words; when non-zero each
    /// document also carries a distractor phrase built from it, shaped like
    /// the keyphrase.
    pub distractor_words: usize,
    pub cue: Cue,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            documents: 32,
            min_len: 16,
            max_len: 28,
            min_phrase: 1,
            max_phrase: 3,
            keyphrase_words: 40,
            filler_words: 30,
            distractor_words: 0,
            cue: Cue::Lexical,
            id_prefix: "syn".into(),
            seed: 0,
        }
    }
}

pub fn keyphrase_word(i: usize) -> String {
    format!("kw{i:03}")
}

pub fn filler_word(i: usize) -> String {
    format!("fw{i:03}")
}

pub fn distractor_word(i: usize) -> String {
    format!("dw{i:03}")
}

fn plain_visual(rng: &mut ChaCha8Rng, position: usize, len: usize) -> VisualVector {
    let mut v = [0.0; VISUAL_DIM];
    for block in [0, NODE_FEATURES] {
        v[block + FONT] = 0.5;
        v[block + 1] = 0.05 + 0.02 * rng.gen::<f64>();
        v[block + 2] = 0.02;
        v[block + 3] = position as f64 / len as f64;
        v[block + 4] = 0.3 + 0.01 * rng.gen::<f64>();
        v[block + 7] = 1.0;
        v[block + 8] = 1.0;
    }
    v
}

/// Generates `spec.documents` labeled records. Each record has one planted
/// keyphrase, listed in `keyphrases`.
pub fn generate(spec: &SyntheticSpec) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.documents)
        .map(|d| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let phrase_len = rng.gen_range(spec.min_phrase..=spec.max_phrase);
            let mut tokens: Vec<String> = (0..len).map(|_| filler_word(rng.gen_range(0..spec.filler_words))).collect();
            let phrase: Vec<String> = (0..phrase_len)
                .map(|_| match spec.cue {
                    Cue::Lexical => keyphrase_word(rng.gen_range(0..spec.keyphrase_words)),
                    Cue::Visual => filler_word(rng.gen_range(0..spec.filler_words)),
                })
                .collect();

            // pick non-overlapping slots for the keyphrase and the optional distractor
            let distractor_len = if spec.distractor_words > 0 { phrase_len } else { 0 };
            let (start, dstart) = loop {
                let s = rng.gen_range(0..=len - phrase_len);
                if distractor_len == 0 {
                    break (s, None);
                }
                let ds = rng.gen_range(0..=len - distractor_len);
                if ds + distractor_len + 1 <= s || s + phrase_len + 1 <= ds {
                    break (s, Some(ds));
                }
            };
            tokens.splice(start..start + phrase_len, phrase.iter().cloned());
            if let Some(ds) = dstart {
                for t in &mut tokens[ds..ds + distractor_len] {
                    *t = distractor_word(rng.gen_range(0..spec.distractor_words));
                }
            }

            let mut visual: Vec<VisualVector> = (0..len).map(|i| plain_visual(&mut rng, i, len)).collect();
            if spec.cue == Cue::Lexical {
                let shared = plain_visual(&mut ChaCha8Rng::seed_from_u64(0), 0, 1);
                visual.iter_mut().for_each(|v| *v = shared);
            } else {
                for v in &mut visual[start..start + phrase_len] {
                    v[FONT] = 1.0;
                    v[BOLD] = 1.0;
                }
            }
            DatasetRecord {
                id: format!("{}-{d:04}", spec.id_prefix),
                text: tokens.join(" "),
                visual: Some(visual.iter().map(|v| v.to_vec()).collect()),
                keyphrases: Some(vec![phrase.join(" ")]),
                source: None,
            }
        })
        .collect()
}

/// Click-log lines whose queries are the planted keyphrases plus one query
/// that never occurs in any document.
pub fn click_log(records: &[DatasetRecord], seed: u64) -> Vec<QueryLogRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log: Vec<QueryLogRecord> = records
        .iter()
        .map(|r| {
            let mut queries = r.keyphrases.clone().unwrap_or_default();
            queries.push(format!("absent query {}", rng.gen_range(0..1000)));
            QueryLogRecord {
                id: r.id.clone(),
                queries,
                clicks: None,
            }
        })
        .collect();
    log.shuffle(&mut rng);
    log
}
