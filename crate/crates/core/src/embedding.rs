//! Hybrid word embeddings: contextual token vector, sinusoidal position
//! vector and visual features, concatenated per token.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{ParamId, Tape, Tensor, Var};
use crate::dataset::read_jsonl;
use crate::doc::Document;
use crate::error::{Error, Result};
use crate::visual::VISUAL_DIM;

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";
pub const UNKNOWN_INDEX: usize = 0;
pub const MASK_INDEX: usize = 1;

/// Sinusoidal position vector: `sin(i / 10000^(2p/P))` at `2p`, `cos` at `2p+1`.
pub fn position_encoding(position: usize, dims: usize) -> Result<Vec<f64>> {
    if dims % 2 != 0 {
        return Err(Error::Config(format!("position dimension {dims} must be even")));
    }
    let i = position as f64;
    let mut out = Vec::with_capacity(dims);
    for p in 0..dims / 2 {
        let angle = i / 10000f64.powf(2.0 * p as f64 / dims as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

pub fn position_matrix(n: usize, dims: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dims);
    for i in 0..n {
        data.extend(position_encoding(i, dims)?);
    }
    Tensor::matrix(n, dims, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    #[default]
    TrainableLookup,
    FrozenFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub token_dim: usize,
    pub position_dim: usize,
    pub source: SourceMode,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            position_dim: 32,
            source: SourceMode::TrainableLookup,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.position_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "position dimension {} must be even",
                self.position_dim
            )));
        }
        if self.token_dim == 0 {
            return Err(Error::Config("token dimension must be positive".into()));
        }
        Ok(())
    }

    /// Width of one hybrid row given which slices are present.
    pub fn hybrid_dim(&self, with_position: bool, with_visual: bool) -> usize {
        self.token_dim
            + if with_position { self.position_dim } else { 0 }
            + if with_visual { VISUAL_DIM } else { 0 }
    }
}

/// Token to index map with reserved unknown and mask entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TokenVocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<TokenVocabulary> for Vec<String> {
    fn from(v: TokenVocabulary) -> Self {
        v.tokens
    }
}

impl Default for TokenVocabulary {
    fn default() -> Self {
        Self::from(vec![UNKNOWN_TOKEN.to_string(), MASK_TOKEN.to_string()])
    }
}

impl TokenVocabulary {
    /// Keeps tokens seen at least `min_freq` times, most frequent first,
    /// ties broken alphabetically.
    pub fn build<'a>(documents: impl IntoIterator<Item = &'a Document>, min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in documents {
            for t in &doc.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && t != UNKNOWN_TOKEN && t != MASK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = Vec::<String>::from(Self::default());
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }
}

#[derive(Debug, Deserialize)]
struct SidecarLine {
    id: String,
    vectors: Vec<Vec<f64>>,
}

/// Precomputed, frozen per-token vectors keyed by document id.
#[derive(Clone, Debug, Default)]
pub struct FrozenVectors {
    pub dim: usize,
    by_id: HashMap<String, Tensor>,
}

impl FrozenVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            by_id: HashMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, rows: &[Vec<f64>]) -> Result<()> {
        let id = id.into();
        if let Some(bad) = rows.iter().position(|r| r.len() != self.dim) {
            return Err(Error::Shape(format!(
                "vectors for `{id}`: row {bad} has width {}, expected {}",
                rows[bad].len(),
                self.dim
            )));
        }
        let tensor = Tensor::from_rows(rows)?;
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("vectors for `{id}`")));
        }
        self.by_id.insert(id, tensor);
        Ok(())
    }

    pub fn read_sidecar(path: &Path, dim: usize) -> Result<Self> {
        let lines: Vec<SidecarLine> = read_jsonl(path)?;
        let mut out = Self::new(dim);
        for line in lines {
            out.insert(line.id, &line.vectors)?;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// First `n` rows of the vectors for `id`.
    pub fn rows_for(&self, id: &str, n: usize) -> Result<Tensor> {
        let t = self
            .by_id
            .get(id)
            .ok_or_else(|| Error::MissingVectors(id.to_string()))?;
        if t.rows() < n {
            return Err(Error::MissingVectors(format!(
                "{id} ({} rows for {n} tokens)",
                t.rows()
            )));
        }
        Tensor::matrix(n, self.dim, t.data()[..n * self.dim].to_vec())
    }
}

/// Where the contextual slice of the hybrid embedding comes from.
#[derive(Clone, Debug)]
pub enum ContextualSource<'a> {
    Lookup {
        table: ParamId,
        vocab: &'a TokenVocabulary,
    },
    Frozen(&'a FrozenVectors),
}

impl ContextualSource<'_> {
    pub fn embed(&self, tape: &mut Tape, doc: &Document) -> Result<Var> {
        match self {
            ContextualSource::Lookup { table, vocab } => {
                let indices: Vec<usize> = doc.tokens.iter().map(|t| vocab.lookup(t)).collect();
                let table = tape.param(*table);
                tape.gather_rows(table, &indices)
            }
            ContextualSource::Frozen(vectors) => {
                Ok(tape.constant(vectors.rows_for(&doc.id, doc.len())?))
            }
        }
    }
}

/// Rows `h_i ⌢ pos_i ⌢ v_i`, omitting the position or visual slice when
/// the corresponding flag is off.
pub fn embed_document(
    tape: &mut Tape,
    doc: &Document,
    config: &EmbeddingConfig,
    source: &ContextualSource,
    with_position: bool,
    with_visual: bool,
) -> Result<Var> {
    let mut parts = vec![source.embed(tape, doc)?];
    if with_position {
        parts.push(tape.constant(position_matrix(doc.len(), config.position_dim)?));
    }
    if with_visual {
        let rows: Vec<Vec<f64>> = doc.visual.iter().map(|v| v.to_vec()).collect();
        parts.push(tape.constant(Tensor::from_rows(&rows)?));
    }
    let out = tape.concat_cols(&parts)?;
    tape.check_finite(out, "hybrid embedding")
}
