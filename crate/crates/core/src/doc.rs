//! Documents, candidate spans, gold-label alignment and truncation.

use crate::error::{Error, Result};
use crate::visual::{VisualVector, VISUAL_DIM};

/// Lowercases, splits on whitespace and detaches every punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Canonical form of a phrase: its tokens joined by single spaces.
pub fn normalize_phrase(phrase: &str) -> String {
    tokenize(phrase).join(" ")
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && !token.chars().any(char::is_alphanumeric)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub visual: Vec<VisualVector>,
}

impl Document {
    /// Builds a document from raw text with all-zero visual features.
    pub fn from_text(id: impl Into<String>, text: &str) -> Result<Self> {
        let id = id.into();
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyDocument(id));
        }
        let visual = vec![[0.0; VISUAL_DIM]; tokens.len()];
        Ok(Self { id, tokens, visual })
    }

    pub fn new(id: impl Into<String>, tokens: Vec<String>, visual: Vec<VisualVector>) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::EmptyDocument(id));
        }
        if visual.len() != tokens.len() {
            return Err(Error::Visual {
                id,
                reason: format!("{} visual rows for {} tokens", visual.len(), tokens.len()),
            });
        }
        Ok(Self { id, tokens, visual })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn phrase(&self, span: Span) -> String {
        self.tokens[span.start..span.end()].join(" ")
    }

    /// Tokens `start..end` with their visual rows.
    pub fn slice(&self, start: usize, end: usize) -> Document {
        Document {
            id: self.id.clone(),
            tokens: self.tokens[start..end].to_vec(),
            visual: self.visual[start..end].to_vec(),
        }
    }
}

/// Keeps the first `max_len` tokens and their visual rows.
pub fn truncate(document: &Document, max_len: usize) -> Document {
    if document.len() <= max_len {
        document.clone()
    } else {
        document.slice(0, max_len)
    }
}

/// A candidate n-gram: `len` tokens starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(self) -> usize {
        self.start + self.len
    }
}

/// Number of candidate spans of a length-`n` document with lengths up to `max_ngram`.
pub fn span_count(n: usize, max_ngram: usize) -> usize {
    (1..=max_ngram.min(n)).map(|k| n - k + 1).sum()
}

/// All candidate spans ordered by length, then start.
pub fn enumerate_spans(n: usize, max_ngram: usize) -> Vec<Span> {
    let mut spans = Vec::with_capacity(span_count(n, max_ngram));
    for k in 1..=max_ngram.min(n) {
        spans.extend((0..=n - k).map(|i| Span::new(i, k)));
    }
    spans
}

/// Position of `span` in the order produced by [`enumerate_spans`].
pub fn span_index(n: usize, max_ngram: usize, span: Span) -> Option<usize> {
    if span.len == 0 || span.len > max_ngram || span.end() > n {
        return None;
    }
    let offset: usize = (1..span.len).map(|k| n - k + 1).sum();
    Some(offset + span.start)
}

/// Every occurrence of `phrase` as an exact token sequence.
pub fn match_phrase(document: &Document, phrase: &str, max_ngram: usize) -> Result<Vec<Span>> {
    let needle = tokenize(phrase);
    match_tokens(document, &needle, max_ngram).map_err(|e| match e {
        Error::PhraseTooLong { len, max, .. } => Error::PhraseTooLong {
            phrase: phrase.to_string(),
            len,
            max,
        },
        other => other,
    })
}

pub(crate) fn match_tokens(document: &Document, needle: &[String], max_ngram: usize) -> Result<Vec<Span>> {
    if needle.is_empty() {
        return Err(Error::EmptyPhrase);
    }
    if needle.len() > max_ngram {
        return Err(Error::PhraseTooLong {
            phrase: needle.join(" "),
            len: needle.len(),
            max: max_ngram,
        });
    }
    Ok(document
        .tokens
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| Span::new(i, needle.len()))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocument {
    pub document: Document,
    pub keyphrases: Vec<String>,
}

impl LabeledDocument {
    pub fn new(document: Document, keyphrases: Vec<String>) -> Result<Self> {
        if keyphrases.is_empty() {
            return Err(Error::InvalidTarget(format!(
                "document `{}` has no keyphrases",
                document.id
            )));
        }
        if keyphrases.iter().any(|k| tokenize(k).is_empty()) {
            return Err(Error::EmptyPhrase);
        }
        Ok(Self {
            document,
            keyphrases,
        })
    }
}

/// Training target over all candidate spans of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanTarget {
    pub n: usize,
    pub max_ngram: usize,
    /// Sorted, distinct.
    pub positives: Vec<Span>,
    /// Uniform over `positives`, indexed as [`enumerate_spans`].
    pub target: Vec<f64>,
    /// Gold phrases longer than `max_ngram`.
    pub unmatchable: Vec<String>,
}

impl SpanTarget {
    pub fn from_positives(n: usize, max_ngram: usize, mut positives: Vec<Span>) -> Result<Self> {
        positives.sort();
        positives.dedup();
        if positives.is_empty() {
            return Err(Error::InvalidTarget("no positive spans".into()));
        }
        let mut target = vec![0.0; span_count(n, max_ngram)];
        let mass = 1.0 / positives.len() as f64;
        for &span in &positives {
            let idx = span_index(n, max_ngram, span)
                .ok_or_else(|| Error::InvalidTarget(format!("span {span:?} outside document")))?;
            target[idx] = mass;
        }
        Ok(Self {
            n,
            max_ngram,
            positives,
            target,
            unmatchable: Vec::new(),
        })
    }
}

/// Positives are every occurrence of every gold keyphrase, each with equal
/// mass. The document should already be truncated.
pub fn build_labels(labeled: &LabeledDocument, max_ngram: usize) -> Result<SpanTarget> {
    let doc = &labeled.document;
    let mut positives = Vec::new();
    let mut unmatchable = Vec::new();
    for phrase in &labeled.keyphrases {
        match match_phrase(doc, phrase, max_ngram) {
            Ok(spans) => positives.extend(spans),
            Err(Error::PhraseTooLong { .. }) => unmatchable.push(phrase.clone()),
            Err(e) => return Err(e),
        }
    }
    if positives.is_empty() {
        return Err(Error::NoMatch(doc.id.clone()));
    }
    let mut target = SpanTarget::from_positives(doc.len(), max_ngram, positives)?;
    target.unmatchable = unmatchable;
    Ok(target)
}
