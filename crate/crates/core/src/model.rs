//! The span-scoring network: per-length convolution banks, one shared
//! transformer, one shared feedforward scorer and a single softmax over
//! every candidate span of the document.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::checkpoint::{decode_checkpoint, Checkpoint};
use crate::compute::{masked_softmax, Conv1d, Linear, ParamId, ParamStore, Tape, TransformerBlock, Var};
use crate::doc::{enumerate_spans, Document, Span, SpanTarget};
use crate::embedding::{
    embed_document, ContextualSource, EmbeddingConfig, FrozenVectors, SourceMode, TokenVocabulary,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_transformer: bool,
    pub no_position: bool,
    pub no_visual: bool,
}

impl Ablation {
    /// Parses a comma-separated list such as `"no_visual,no_position"`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut out = Self::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.replace('-', "_").as_str() {
                "no_transformer" => out.no_transformer = true,
                "no_position" => out.no_position = true,
                "no_visual" => out.no_visual = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub max_ngram: usize,
    pub filters: usize,
    pub heads: usize,
    pub layers: usize,
    /// Inner width of the transformer's position-wise feedforward sublayer.
    pub ffn_dim: usize,
    pub dropout: f64,
    pub embedding: EmbeddingConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            max_ngram: 5,
            filters: 64,
            heads: 2,
            layers: 1,
            ffn_dim: 64,
            dropout: 0.2,
            embedding: EmbeddingConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// 512 filters, 8 heads, 256-dim positions over frozen 1024-dim
    /// contextual vectors.
    pub fn full_scale() -> Self {
        Self {
            max_ngram: 5,
            filters: 512,
            heads: 8,
            layers: 1,
            ffn_dim: 512,
            dropout: 0.2,
            embedding: EmbeddingConfig {
                token_dim: 1024,
                position_dim: 256,
                source: SourceMode::FrozenFile,
            },
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        if self.max_ngram == 0 {
            return Err(Error::Config("max_ngram must be at least 1".into()));
        }
        if self.filters == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("filters and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.ablation.no_transformer {
            if self.layers == 0 {
                return Err(Error::InvalidDepth);
            }
            if self.heads == 0 || self.filters % self.heads != 0 {
                return Err(Error::Config(format!(
                    "hidden dimension {} is not divisible by {} heads",
                    self.filters, self.heads
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.embedding
            .hybrid_dim(!self.ablation.no_position, !self.ablation.no_visual)
    }
}

/// Probabilities over every candidate span, ordered as [`enumerate_spans`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpanDistribution {
    pub n: usize,
    pub max_ngram: usize,
    pub spans: Vec<Span>,
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Output of a forward pass still attached to its tape.
#[derive(Clone, Debug)]
pub struct SpanLogits {
    pub logits: Var,
    pub spans: Vec<Span>,
    pub mask: Vec<bool>,
}

/// How many independent parameter sets of each kind the registry holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub cnn_sets: usize,
    pub transformer_sets: usize,
    pub scorer_sets: usize,
    pub embedding_tables: usize,
    pub other: Vec<String>,
}

/// Everything needed to rebuild a model: stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub model: ModelConfig,
    pub vocabulary: TokenVocabulary,
}

#[derive(Clone, Debug)]
pub struct SpanModel {
    pub config: ModelConfig,
    pub vocabulary: TokenVocabulary,
    pub params: ParamStore,
    token_table: Option<ParamId>,
    cnn: Vec<Conv1d>,
    transformer: Vec<TransformerBlock>,
    scorer: [Linear; 3],
    frozen: Option<FrozenVectors>,
}

impl SpanModel {
    pub fn new(config: ModelConfig, vocabulary: TokenVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let token_table = match config.embedding.source {
            SourceMode::TrainableLookup => Some(params.add_xavier(
                "embedding.tokens",
                vocabulary.len(),
                config.embedding.token_dim,
                &mut rng,
            )?),
            SourceMode::FrozenFile => None,
        };
        let input_dim = config.input_dim();
        let f = config.filters;
        let cnn = (1..=config.max_ngram)
            .map(|k| Conv1d::register(&mut params, &format!("cnn.k{k}"), k, input_dim, f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let transformer = if config.ablation.no_transformer {
            Vec::new()
        } else {
            (0..config.layers)
                .map(|l| {
                    TransformerBlock::register(
                        &mut params,
                        &format!("transformer.layer{l}"),
                        f,
                        config.heads,
                        config.ffn_dim,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        };
        let scorer = [
            Linear::register(&mut params, "scorer.hidden1", f, f, &mut rng)?,
            Linear::register(&mut params, "scorer.hidden2", f, f, &mut rng)?,
            Linear::register(&mut params, "scorer.output", f, 1, &mut rng)?,
        ];
        Ok(Self {
            config,
            vocabulary,
            params,
            token_table,
            cnn,
            transformer,
            scorer,
            frozen: None,
        })
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            model: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
        }
    }

    pub fn snapshot_json(&self) -> String {
        serde_json::to_string(&self.snapshot()).expect("model config serializes")
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let snapshot: ModelSnapshot = serde_json::from_str(&checkpoint.config_json)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let mut model = Self::new(snapshot.model, snapshot.vocabulary, 0)?;
        model.params.load_values(&checkpoint.params)?;
        Ok(model)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&decode_checkpoint(bytes)?)
    }

    /// Copies every parameter value from `other`; shapes and names must agree.
    pub fn warm_start(&mut self, other: &ParamStore) -> Result<()> {
        self.params.load_values(other)
    }

    pub fn attach_frozen(&mut self, vectors: FrozenVectors) -> Result<()> {
        if vectors.dim != self.config.embedding.token_dim {
            return Err(Error::Shape(format!(
                "frozen vectors have width {}, model expects {}",
                vectors.dim, self.config.embedding.token_dim
            )));
        }
        self.frozen = Some(vectors);
        Ok(())
    }

    pub fn frozen(&self) -> Option<&FrozenVectors> {
        self.frozen.as_ref()
    }

    pub fn census(&self) -> ParamCensus {
        census_of(self.params.names())
    }

    fn source(&self) -> Result<ContextualSource<'_>> {
        match (self.token_table, &self.frozen) {
            (Some(table), _) => Ok(ContextualSource::Lookup {
                table,
                vocab: &self.vocabulary,
            }),
            (None, Some(v)) => Ok(ContextualSource::Frozen(v)),
            (None, None) => Err(Error::MissingVectors(
                "no frozen vectors attached to the model".into(),
            )),
        }
    }

    pub fn embed(&self, tape: &mut Tape, doc: &Document) -> Result<Var> {
        let a = self.config.ablation;
        embed_document(
            tape,
            doc,
            &self.config.embedding,
            &self.source()?,
            !a.no_position,
            !a.no_visual,
        )
    }

    /// `ReLU(conv_k(x))` for each `k` up to `min(K, n)`.
    pub fn compose_ngrams(&self, tape: &mut Tape, embedded: Var) -> Result<Vec<Var>> {
        let n = tape.value(embedded).rows();
        let mut out = Vec::new();
        for conv in self.cnn.iter().take(n.min(self.config.max_ngram)) {
            let g = conv.forward(tape, embedded)?;
            let g = tape.relu(g);
            out.push(tape.dropout(g, self.config.dropout));
        }
        Ok(out)
    }

    /// Runs the shared transformer stack over one k-gram sequence; identity
    /// when the transformer is ablated.
    pub fn contextualize(&self, tape: &mut Tape, grams: Var) -> Result<Var> {
        let mut x = grams;
        for block in &self.transformer {
            x = block.forward(tape, x, self.config.dropout)?;
        }
        Ok(x)
    }

    /// One logit per span, all lengths stacked in [`enumerate_spans`] order.
    pub fn score_spans(&self, tape: &mut Tape, contextual: &[Var]) -> Result<Var> {
        let stacked = tape.concat_rows(contextual)?;
        let h = self.scorer[0].forward(tape, stacked)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.config.dropout);
        let h = self.scorer[1].forward(tape, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.config.dropout);
        let s = self.scorer[2].forward(tape, h)?;
        tape.check_finite(s, "span scorer")
    }

    /// Forward pass; spans ending past `valid_len` are masked out.
    pub fn forward(&self, tape: &mut Tape, doc: &Document, valid_len: usize) -> Result<SpanLogits> {
        if doc.is_empty() {
            return Err(Error::EmptyDocument(doc.id.clone()));
        }
        let embedded = self.embed(tape, doc)?;
        let grams = self.compose_ngrams(tape, embedded)?;
        let contextual = grams
            .into_iter()
            .map(|g| self.contextualize(tape, g))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.score_spans(tape, &contextual)?;
        let spans = enumerate_spans(doc.len(), self.config.max_ngram);
        let mask: Vec<bool> = spans.iter().map(|s| s.end() <= valid_len).collect();
        Ok(SpanLogits { logits, spans, mask })
    }

    /// Inference: dropout off, whole document valid.
    pub fn distribution(&self, doc: &Document) -> Result<SpanDistribution> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, doc, doc.len())?;
        let probs = masked_softmax(tape.value(out.logits).data(), &out.mask)?;
        Ok(SpanDistribution {
            n: doc.len(),
            max_ngram: self.config.max_ngram,
            spans: out.spans,
            probs,
            mask: out.mask,
        })
    }

    /// Cross-entropy of the model's span distribution against `target`,
    /// recorded on `tape` for backpropagation.
    pub fn loss(&self, tape: &mut Tape, doc: &Document, target: &SpanTarget) -> Result<Var> {
        if target.n != doc.len() || target.max_ngram != self.config.max_ngram {
            return Err(Error::InvalidTarget(format!(
                "target built for n={}, K={} but document `{}` has n={}, model K={}",
                target.n,
                target.max_ngram,
                doc.id,
                doc.len(),
                self.config.max_ngram
            )));
        }
        let out = self.forward(tape, doc, doc.len())?;
        tape.cross_entropy(out.logits, &target.target, &out.mask)
    }
}

pub fn census_of<'a>(names: impl Iterator<Item = &'a str>) -> ParamCensus {
    let mut cnn = BTreeSet::new();
    let mut transformer = BTreeSet::new();
    let mut scorer = BTreeSet::new();
    let mut embedding = BTreeSet::new();
    let mut other = Vec::new();
    for name in names {
        let mut parts = name.split('.');
        match (parts.next(), parts.next()) {
            (Some("cnn"), Some(bank)) => {
                cnn.insert(bank.to_string());
            }
            (Some("transformer"), _) => {
                transformer.insert("transformer");
            }
            (Some("scorer"), _) => {
                scorer.insert("scorer");
            }
            (Some("embedding"), Some(table)) => {
                embedding.insert(table.to_string());
            }
            _ => other.push(name.to_string()),
        }
    }
    ParamCensus {
        cnn_sets: cnn.len(),
        transformer_sets: transformer.len(),
        scorer_sets: scorer.len(),
        embedding_tables: embedding.len(),
        other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::gradcheck::{finite_difference_check, CheckOptions, Objective};
    use crate::compute::Gradients;
    use crate::doc::span_count;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            max_ngram: 3,
            filters: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            embedding: EmbeddingConfig {
                token_dim: 6,
                position_dim: 4,
                source: SourceMode::TrainableLookup,
            },
            ablation: Ablation::default(),
        }
    }

    fn doc(text: &str) -> Document {
        Document::from_text("d", text).unwrap()
    }

    fn model(config: ModelConfig, d: &Document) -> SpanModel {
        SpanModel::new(config, TokenVocabulary::build([d], 1), 7).unwrap()
    }

    #[test]
    fn span_count_for_twelve_tokens() {
        let d = doc("a b c d e f g h i j k l");
        let mut config = tiny_config();
        config.max_ngram = 5;
        let m = model(config, &d);
        let dist = m.distribution(&d).unwrap();
        assert_eq!(dist.probs.len(), 50);
        assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn compose_ngrams_shapes_and_short_docs() {
        let d = doc("a b c d e f g h i j");
        let m = model(tiny_config(), &d);
        let mut tape = Tape::new(&m.params);
        let x = m.embed(&mut tape, &d).unwrap();
        let rows: Vec<usize> = m
            .compose_ngrams(&mut tape, x)
            .unwrap()
            .iter()
            .map(|&g| tape.value(g).rows())
            .collect();
        assert_eq!(rows, [10, 9, 8]);

        let short = doc("a b");
        let dist = m.distribution(&short).unwrap();
        assert_eq!(dist.probs.len(), span_count(2, 3));
    }

    #[test]
    fn zero_filters_give_zero_grams() {
        let d = doc("a b c d");
        let mut m = model(tiny_config(), &d);
        let ids: Vec<ParamId> = m
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("cnn."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            m.params.get_mut(id).value.fill(0.0);
        }
        let mut tape = Tape::new(&m.params);
        let x = m.embed(&mut tape, &d).unwrap();
        for g in m.compose_ngrams(&mut tape, x).unwrap() {
            assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn census_counts_shared_sets() {
        let d = doc("a b c");
        let mut config = tiny_config();
        config.max_ngram = 5;
        config.layers = 2;
        let c = model(config.clone(), &d).census();
        assert_eq!(
            (c.cnn_sets, c.transformer_sets, c.scorer_sets, c.embedding_tables),
            (5, 1, 1, 1)
        );
        assert!(c.other.is_empty());
        config.ablation.no_transformer = true;
        assert_eq!(model(config, &d).census().transformer_sets, 0);
    }

    #[test]
    fn no_transformer_is_identity() {
        let d = doc("a b c d e");
        let mut config = tiny_config();
        config.ablation.no_transformer = true;
        let m = model(config, &d);
        let mut tape = Tape::new(&m.params);
        let x = m.embed(&mut tape, &d).unwrap();
        let g = m.compose_ngrams(&mut tape, x).unwrap()[1];
        let t = m.contextualize(&mut tape, g).unwrap();
        assert_eq!(tape.value(t), tape.value(g));
    }

    #[test]
    fn no_visual_changes_only_embedding_width() {
        let d = doc("a b c");
        let full = model(tiny_config(), &d);
        let mut config = tiny_config();
        config.ablation.no_visual = true;
        let ablated = model(config, &d);
        for ((_, a), (_, b)) in full.params.iter().zip(ablated.params.iter()) {
            assert_eq!(a.name, b.name);
            if a.name.starts_with("cnn.") && a.name.ends_with(".weight") {
                let k: usize = a.name[5..6].parse().unwrap();
                assert_eq!(a.value.rows() - b.value.rows(), 18 * k);
            } else {
                assert_eq!(a.value.shape(), b.value.shape(), "{}", a.name);
            }
        }
    }

    #[test]
    fn masked_spans_get_zero_probability() {
        let d = doc("a b c d e f");
        let m = model(tiny_config(), &d);
        let mut tape = Tape::new(&m.params);
        let out = m.forward(&mut tape, &d, 4).unwrap();
        let probs = masked_softmax(tape.value(out.logits).data(), &out.mask).unwrap();
        for ((span, p), valid) in out.spans.iter().zip(&probs).zip(&out.mask) {
            assert_eq!(*valid, span.end() <= 4);
            if !valid {
                assert_eq!(*p, 0.0);
            }
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inference_is_deterministic() {
        let d = doc("x y z w");
        let m = model(tiny_config(), &d);
        assert_eq!(m.distribution(&d).unwrap(), m.distribution(&d).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_the_model() {
        let d = doc("x y z w");
        let m = model(tiny_config(), &d);
        let bytes = crate::compute::checkpoint::encode_checkpoint(&m.snapshot_json(), &m.params);
        let back = SpanModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.distribution(&d).unwrap(), m.distribution(&d).unwrap());
    }

    #[test]
    fn ablation_list_parsing() {
        let a = Ablation::parse_list("no_visual, no-position").unwrap();
        assert!(a.no_visual && a.no_position && !a.no_transformer);
        assert!(Ablation::parse_list("no_cnn").is_err());
    }

    struct ModelLoss<'a> {
        model: &'a SpanModel,
        doc: Document,
        target: SpanTarget,
    }

    impl Objective for ModelLoss<'_> {
        fn loss(&mut self, store: &ParamStore) -> Result<f64> {
            Ok(self.gradient(store)?.0)
        }

        fn gradient(&mut self, store: &ParamStore) -> Result<(f64, Gradients)> {
            let mut tape = Tape::new(store);
            let loss = self.model.loss(&mut tape, &self.doc, &self.target)?;
            let value = tape.value(loss).data()[0];
            Ok((value, tape.backward(loss)?))
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let d = doc("cheap flights to paris and cheap hotels in rome");
        let m = model(tiny_config(), &d);
        let target = SpanTarget::from_positives(
            d.len(),
            3,
            vec![Span::new(0, 2), Span::new(5, 2)],
        )
        .unwrap();
        let mut store = m.params.clone();
        let mut objective = ModelLoss {
            model: &m,
            doc: d,
            target,
        };
        let report = finite_difference_check(&mut store, &mut objective, &CheckOptions::default()).unwrap();
        let worst = report.worst().unwrap();
        assert!(worst.max_relative_error < 1e-4, "{worst:?}");
    }
}
