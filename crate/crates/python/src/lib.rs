use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use kpe_core::baselines::{tfidf_rank, textrank_rank, CorpusStats, Stopwords, TextRankConfig};
use kpe_core::compute::checkpoint::save_checkpoint;
use kpe_core::config::RunConfig;
use kpe_core::dataset::{ingest, DatasetRecord};
use kpe_core::doc::{build_labels, LabeledDocument};
use kpe_core::embedding::TokenVocabulary;
use kpe_core::eval::{
    chunk_and_merge, dedup_substrings, evaluate as evaluate_core, judge_agreement as agreement_core, merge_chunk_scores as merge_core,
    predict_topk, AgreementMode, AnnotationRecord, ChunkScoreTable, PhraseNormalizer,
};
use kpe_core::model::SpanModel as CoreModel;
use kpe_core::training::{load_model, run_training, EpochControl, Example, TrainingData, TrainingMode};
use kpe_core::visual::parse_layout as parse_layout_core;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A tokenized document with one 18-wide visual row per token.
#[pyclass(module = "kpe", frozen, from_py_object)]
#[derive(Clone)]
struct Document {
    inner: kpe_core::doc::Document,
}

#[pymethods]
impl Document {
    #[new]
    #[pyo3(signature = (id, text, visual=None))]
    fn new(id: String, text: String, visual: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let record = DatasetRecord {
            id,
            text,
            visual,
            keyphrases: None,
            source: None,
        };
        let (mut docs, report) = ingest(&[record]);
        if let Some((_, reason)) = report.rejected.first() {
            return Err(PyValueError::new_err(reason.clone()));
        }
        Ok(Self {
            inner: docs.remove(0).document,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn visual(&self) -> Vec<Vec<f64>> {
        self.inner.visual.iter().map(|v| v.to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Document(id={:?}, tokens={})", self.inner.id, self.inner.len())
    }
}

/// The span-classification keyphrase model.
#[pyclass(module = "kpe")]
struct SpanModel {
    inner: CoreModel,
    config: RunConfig,
}

#[pymethods]
impl SpanModel {
    /// Builds an untrained model whose vocabulary covers `documents`.
    /// `config` is a JSON object of dotted keys, e.g. '{"model.filters": 32}'.
    #[staticmethod]
    #[pyo3(signature = (documents, config=None, seed=0, min_freq=1))]
    fn build(documents: Vec<Document>, config: Option<&str>, seed: u64, min_freq: usize) -> PyResult<Self> {
        let config = match config {
            Some(text) => RunConfig::from_json_str(text).map_err(err)?,
            None => RunConfig::default(),
        };
        let vocab = TokenVocabulary::build(documents.iter().map(|d| &d.inner), min_freq);
        let inner = CoreModel::new(config.model.clone(), vocab, seed).map_err(err)?;
        Ok(Self { inner, config })
    }

    /// Loads a checkpoint file or run directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_model(&path).map_err(err)?;
        let mut config = RunConfig::default();
        config.model = inner.config.clone();
        Ok(Self { inner, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner.snapshot_json(), &self.inner.params).map_err(err)
    }

    /// Trains on `(document, keyphrases)` pairs and returns the mean loss of
    /// each epoch. Documents whose keyphrases do not occur are skipped.
    #[pyo3(signature = (examples, epochs=10, seed=0, pretrain=false))]
    fn train(&mut self, py: Python<'_>, examples: Vec<(Document, Vec<String>)>, epochs: usize, seed: u64, pretrain: bool) -> PyResult<Vec<f64>> {
        let k = self.inner.config.max_ngram;
        let max_len = self.config.training.max_len;
        let mut train = Vec::new();
        for (doc, phrases) in examples {
            let doc = kpe_core::doc::truncate(&doc.inner, max_len);
            let Ok(labeled) = LabeledDocument::new(doc, phrases) else { continue };
            if let Ok(target) = build_labels(&labeled, k) {
                train.push(Example {
                    document: labeled.document,
                    target,
                });
            }
        }
        let mut training = self.config.training.clone();
        training.max_epochs = epochs;
        training.seed = seed;
        let data = TrainingData {
            train,
            validation: Vec::new(),
            skipped: 0,
        };
        let mode = if pretrain { TrainingMode::Pretrain } else { TrainingMode::Finetune };
        let model = &mut self.inner;
        let record = py
            .detach(|| run_training(model, &data, &training, mode, &mut |_, _| Ok(EpochControl::Continue)))
            .map_err(err)?;
        Ok(record.epochs.iter().map(|e| e.mean_loss).collect())
    }

    /// Top-`k` `(phrase, score)` pairs. With `chunked`, long documents are
    /// scored in fixed-length chunks, merged, and phrases contained in a
    /// top-quarter phrase are dropped.
    #[pyo3(signature = (document, k=10, chunked=false))]
    fn predict(&self, py: Python<'_>, document: &Document, k: usize, chunked: bool) -> PyResult<Vec<(String, f64)>> {
        py.detach(|| {
            if chunked {
                let merged = chunk_and_merge(&document.inner, &self.inner, self.config.data.chunk_len, usize::MAX)?;
                let mut kept = dedup_substrings(&merged.phrases);
                kept.truncate(k);
                return Ok(kept);
            }
            let doc = kpe_core::doc::truncate(&document.inner, self.config.training.max_len);
            predict_topk(&self.inner.distribution(&doc)?, &doc, k).map(|p| p.phrases)
        })
        .map_err(err)
    }

    /// `(start, length, probability)` for every candidate span.
    fn distribution(&self, document: &Document) -> PyResult<Vec<(usize, usize, f64)>> {
        let dist = self.inner.distribution(&document.inner).map_err(err)?;
        Ok(dist
            .spans
            .iter()
            .zip(&dist.probs)
            .map(|(s, p)| (s.start, s.len, *p))
            .collect())
    }

    /// Parameter-set counts: (cnn, transformer, scorer).
    fn census(&self) -> (usize, usize, usize) {
        let c = self.inner.census();
        (c.cnn_sets, c.transformer_sets, c.scorer_sets)
    }

    #[getter]
    fn vocabulary_size(&self) -> usize {
        self.inner.vocabulary.len()
    }
}

#[pyfunction]
fn position_encoding(position: usize, dims: usize) -> PyResult<Vec<f64>> {
    kpe_core::embedding::position_encoding(position, dims).map_err(err)
}

/// Macro-averaged metrics as `(precision, recall, f1)`; precision and
/// recall are keyed by depth.
#[pyfunction]
#[pyo3(signature = (predictions, gold, depths=vec![1, 3, 5], f1_depth=10, stem=false))]
fn evaluate(
    predictions: Vec<(String, Vec<String>)>,
    gold: Vec<(String, Vec<String>)>,
    depths: Vec<usize>,
    f1_depth: usize,
    stem: bool,
) -> PyResult<(BTreeMap<usize, f64>, BTreeMap<usize, f64>, f64)> {
    let report = evaluate_core(&predictions, &gold, &depths, f1_depth, &PhraseNormalizer { stem }).map_err(err)?;
    Ok((report.precision, report.recall, report.f1))
}

#[pyfunction]
#[pyo3(signature = (document, corpus, k=10, max_ngram=5))]
fn tfidf(document: &Document, corpus: Vec<Document>, k: usize, max_ngram: usize) -> Vec<(String, f64)> {
    let docs: Vec<_> = corpus.into_iter().map(|d| d.inner).collect();
    let stats = CorpusStats::build(&docs);
    tfidf_rank(&document.inner, &stats, max_ngram, &Stopwords::default()).truncated(k).phrases
}

#[pyfunction]
#[pyo3(signature = (document, k=10, max_ngram=5))]
fn textrank(document: &Document, k: usize, max_ngram: usize) -> Vec<(String, f64)> {
    textrank_rank(&document.inner, &TextRankConfig::default(), max_ngram, &Stopwords::default())
        .truncated(k)
        .phrases
}

/// Mean pairwise agreement in percent; `items` holds each item's judge lists.
#[pyfunction]
#[pyo3(signature = (items, depth=3, mode="exact"))]
fn judge_agreement(items: Vec<Vec<Vec<String>>>, depth: usize, mode: &str) -> PyResult<f64> {
    let mode: AgreementMode = mode.parse().map_err(err)?;
    let records: Vec<AnnotationRecord> = items
        .into_iter()
        .enumerate()
        .map(|(i, judges)| AnnotationRecord {
            id: i.to_string(),
            judges,
        })
        .collect();
    Ok(agreement_core(&records, depth, mode).map_err(err)?.percent)
}

/// Merges `(phrase, chunk index, score)` triples with geometric chunk weights.
#[pyfunction]
fn merge_chunk_scores(entries: Vec<(String, usize, f64)>) -> BTreeMap<String, f64> {
    let mut table = ChunkScoreTable::default();
    for (phrase, chunk, score) in entries {
        table.insert(phrase, chunk, score);
    }
    merge_core(&table)
}

/// Tokens and per-token visual rows of a layout JSON document.
#[pyfunction]
fn parse_layout(source: &str) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let layout = parse_layout_core(source).map_err(err)?;
    Ok((layout.tokens(), layout.features().iter().map(|v| v.to_vec()).collect()))
}

#[pymodule]
fn kpe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Document>()?;
    m.add_class::<SpanModel>()?;
    m.add_function(wrap_pyfunction!(position_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(tfidf, m)?)?;
    m.add_function(wrap_pyfunction!(textrank, m)?)?;
    m.add_function(wrap_pyfunction!(judge_agreement, m)?)?;
    m.add_function(wrap_pyfunction!(merge_chunk_scores, m)?)?;
    m.add_function(wrap_pyfunction!(parse_layout, m)?)?;
    Ok(())
}
