use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use kpe_core::baselines::{tfidf_rank, textrank_rank, CorpusStats, Stopwords, TextRankConfig};
use kpe_core::compute::checkpoint::write_atomic;
use kpe_core::compute::{finite_difference_check, CheckOptions, Gradients, Objective, ParamStore, Tape};
use kpe_core::config::{parse_override_value, RunConfig};
use kpe_core::dataset::{featurize_dir, ingest, read_jsonl, write_jsonl, DatasetRecord, IngestedDocument};
use kpe_core::doc::{build_labels, truncate, Document, SpanTarget};
use kpe_core::embedding::{FrozenVectors, SourceMode, TokenVocabulary};
use kpe_core::eval::{
    chunk_and_merge, dedup_substrings, evaluate, judge_agreement, permutation_test, predict_topk, AgreementMode,
    AnnotationRecord, PhraseNormalizer, PredictionRecord, DEFAULT_RESAMPLES,
};
use kpe_core::model::{Ablation, SpanModel};
use kpe_core::synthetic::{generate, Cue, SyntheticSpec};
use kpe_core::training::{
    load_model, prepare_examples, run_training, split_validation, EpochControl, RunDirectory, TrainingData,
    TrainingMode,
};
use kpe_core::weak::{build_qp_dataset, read_blocklist, QueryLogRecord};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "kpe", version, about = "Neural keyphrase extraction over visually annotated web documents")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Global {
    /// JSON config file with dotted keys, e.g. {"model.filters": 32}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set training.max_epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets training.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-document parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Comma-separated ablation switches: no_transformer, no_position, no_visual.
    #[arg(long, global = true)]
    ablate: Option<String>,
    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of layout files into a dataset file.
    Featurize {
        #[arg(long)]
        layout_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the query-prediction pretraining set from a click log.
    BuildQp {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        clicks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Queries to drop, one per line.
        #[arg(long)]
        blocklist: Option<PathBuf>,
    },
    /// Pretrain on query-prediction data.
    Pretrain(TrainArgs),
    /// Train (or fine-tune with --init) on keyphrase data.
    Train(TrainArgs),
    /// Rank keyphrases for every document.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score fixed-length chunks and merge, then drop substrings of top-ranked phrases.
        #[arg(long)]
        chunked: bool,
        #[arg(long)]
        top_k: Option<usize>,
        /// Precomputed token vectors, required by frozen-file models.
        #[arg(long)]
        frozen: Option<PathBuf>,
    },
    /// Score predictions against gold keyphrases.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        depths: Vec<usize>,
        #[arg(long = "f1", default_value_t = 10)]
        f1_depth: usize,
        /// Compare phrases after Snowball stemming.
        #[arg(long)]
        stem: bool,
        /// Second predictions file; runs a paired permutation test on per-document F1.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank keyphrases with a classic unsupervised method.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus for document frequencies (default: --data).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Pairwise agreement between judges' keyphrase lists.
    Agreement {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value = "exact")]
        mode: AgreementMode,
    },
    /// Finite-difference check of every parameter gradient on a 12-token document.
    Gradcheck {
        /// Check every coordinate instead of a sample per tensor.
        #[arg(long)]
        exhaustive: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint or run directory to start from; its architecture and vocabulary are kept.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Held-out data for checkpoint selection (default: a split of --data).
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    frozen: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Tfidf,
    Textrank,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli.global)?;
    if cli.global.show_config {
        println!("{}", config.canonical_json());
        println!("digest: {}", config.digest());
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(threads) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    match command {
        Command::Featurize { layout_dir, out } => featurize(&config, &layout_dir, &out),
        Command::BuildQp {
            docs,
            clicks,
            out,
            blocklist,
        } => build_qp(&config, &docs, &clicks, &out, blocklist.as_deref()),
        Command::Pretrain(args) => train(config, &args, TrainingMode::Pretrain),
        Command::Train(args) => train(config, &args, TrainingMode::Finetune),
        Command::Predict {
            model,
            data,
            out,
            chunked,
            top_k,
            frozen,
        } => predict(&config, &model, &data, &out, chunked, top_k, frozen.as_deref()),
        Command::Evaluate {
            preds,
            gold,
            depths,
            f1_depth,
            stem,
            compare,
            out,
        } => evaluate_command(&config, &preds, &gold, &depths, f1_depth, stem, compare.as_deref(), out.as_deref()),
        Command::Baseline {
            method,
            data,
            out,
            corpus,
            stopwords,
            top_k,
        } => baseline(&config, method, &data, &out, corpus.as_deref(), stopwords.as_deref(), top_k),
        Command::Agreement {
            annotations,
            depth,
            mode,
        } => agreement(&annotations, depth, mode),
        Command::Gradcheck { exhaustive } => gradcheck(&config, exhaustive),
    }
}

fn load_config(global: &Global) -> Result<RunConfig> {
    let base = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = BTreeMap::new();
    for item in &global.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{item}`"))?;
        overrides.insert(key.trim().to_string(), parse_override_value(value.trim()));
    }
    if let Some(seed) = global.seed {
        overrides.insert("training.seed".into(), json!(seed));
    }
    if let Some(list) = &global.ablate {
        let ablation = Ablation::parse_list(list)?;
        overrides.insert("model.ablation.no_transformer".into(), json!(ablation.no_transformer));
        overrides.insert("model.ablation.no_position".into(), json!(ablation.no_position));
        overrides.insert("model.ablation.no_visual".into(), json!(ablation.no_visual));
    }
    Ok(base.with_overrides(&overrides)?)
}

fn provenance(command: &str, config: &RunConfig, extra: Value) -> Value {
    json!({
        "command": command,
        "config_digest": config.digest(),
        "seed": config.training.seed,
        "config": config.flat(),
        "details": extra,
    })
}

/// Writes `<out>.meta.json` next to a data output.
fn write_meta(out: &Path, meta: &Value) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    let path = PathBuf::from(name);
    write_atomic(&path, serde_json::to_string_pretty(meta)?.as_bytes())?;
    Ok(())
}

fn read_documents(path: &Path) -> Result<Vec<IngestedDocument>> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    let (docs, report) = ingest(&records);
    for (id, reason) in &report.rejected {
        eprintln!("warning: {}: skipping `{id}`: {reason}", path.display());
    }
    if !report.visual_substituted.is_empty() {
        eprintln!(
            "note: {} document(s) in {} have no visual features; zeros substituted",
            report.visual_substituted.len(),
            path.display()
        );
    }
    if docs.is_empty() {
        bail!("{} contains no usable documents", path.display());
    }
    Ok(docs)
}

fn attach_frozen(model: &mut SpanModel, frozen: Option<&Path>) -> Result<()> {
    match (model.config.embedding.source, frozen) {
        (SourceMode::FrozenFile, Some(path)) => {
            let vectors = FrozenVectors::read_sidecar(path, model.config.embedding.token_dim)?;
            model.attach_frozen(vectors)?;
        }
        (SourceMode::FrozenFile, None) => bail!("model uses frozen token vectors; pass --frozen <vectors.jsonl>"),
        (SourceMode::TrainableLookup, Some(_)) => bail!("--frozen given but the model uses a trainable lookup table"),
        (SourceMode::TrainableLookup, None) => {}
    }
    Ok(())
}

fn featurize(config: &RunConfig, dir: &Path, out: &Path) -> Result<ExitCode> {
    let records = featurize_dir(dir)?;
    if records.is_empty() {
        bail!("no *.json layout files in {}", dir.display());
    }
    write_jsonl(out, &records)?;
    write_meta(out, &provenance("featurize", config, json!({ "documents": records.len() })))?;
    println!("wrote {} documents to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn build_qp(config: &RunConfig, docs: &Path, clicks: &Path, out: &Path, blocklist: Option<&Path>) -> Result<ExitCode> {
    let documents = read_documents(docs)?;
    let logs: Vec<QueryLogRecord> = read_jsonl(clicks)?;
    let blocked = blocklist.map(read_blocklist).transpose()?;
    let (examples, stats) = build_qp_dataset(
        &logs,
        &documents,
        config.model.max_ngram,
        config.training.max_len,
        blocked.as_ref(),
    );
    if examples.is_empty() {
        bail!("no document has a click query that occurs in its text");
    }
    let records: Vec<DatasetRecord> = examples.iter().map(|e| e.to_record()).collect();
    write_jsonl(out, &records)?;
    let stats_json = serde_json::to_value(&stats)?;
    write_meta(out, &provenance("build-qp", config, json!({ "stats": stats_json })))?;
    println!("{}", serde_json::to_string_pretty(&stats_json)?);
    Ok(ExitCode::SUCCESS)
}

fn train(mut config: RunConfig, args: &TrainArgs, mode: TrainingMode) -> Result<ExitCode> {
    let docs = read_documents(&args.data)?;
    let mut model = match &args.init {
        Some(init) => {
            let model = load_model(init)?;
            if model.config != config.model {
                eprintln!("note: using the architecture stored in {}", init.display());
            }
            config.model = model.config.clone();
            model
        }
        None => {
            let vocab = TokenVocabulary::build(docs.iter().map(|d| &d.document), config.data.min_freq);
            SpanModel::new(config.model.clone(), vocab, config.training.seed)?
        }
    };
    attach_frozen(&mut model, args.frozen.as_deref())?;

    let k = config.model.max_ngram;
    let (examples, skipped) = prepare_examples(&docs, config.training.max_len, k);
    for (id, reason) in &skipped {
        eprintln!("note: skipping `{id}`: {reason}");
    }
    if examples.is_empty() {
        bail!("no trainable documents in {}", args.data.display());
    }
    let (train, validation) = match &args.validation {
        Some(path) => (examples, prepare_examples(&read_documents(path)?, config.training.max_len, k).0),
        None => split_validation(examples, config.training.validation_fraction, config.training.seed),
    };
    let data = TrainingData {
        train,
        validation,
        skipped: skipped.len(),
    };

    let command = match mode {
        TrainingMode::Pretrain => "pretrain",
        TrainingMode::Finetune => "train",
    };
    let meta = provenance(
        command,
        &config,
        json!({
            "data": args.data,
            "init": args.init,
            "train_documents": data.train.len(),
            "validation_documents": data.validation.len(),
            "vocabulary": model.vocabulary.len(),
        }),
    );
    let mut run_dir = RunDirectory::create(&args.out, &serde_json::to_string_pretty(&meta)?)?;
    let summary = run_training(&mut model, &data, &config.training, mode, &mut |record, current| {
        run_dir.record_epoch(record)?;
        run_dir.save_epoch(current, record.epoch)?;
        eprintln!(
            "epoch {:>3}  step {:>6}  lr {:.2e}  loss {:.4}  val {}  {:.1}s",
            record.epoch,
            record.step,
            record.learning_rate,
            record.mean_loss,
            record.validation_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
            record.wall_seconds
        );
        Ok(EpochControl::Continue)
    })?;
    let best = run_dir.save_best(&model)?;
    write_atomic(&args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    println!(
        "saved {} (best epoch {}, {} steps)",
        best.display(),
        summary.best_epoch.map_or("final".to_string(), |e| e.to_string()),
        summary.total_steps
    );
    Ok(ExitCode::SUCCESS)
}

fn predict(
    config: &RunConfig,
    model_path: &Path,
    data: &Path,
    out: &Path,
    chunked: bool,
    top_k: Option<usize>,
    frozen: Option<&Path>,
) -> Result<ExitCode> {
    let mut model = load_model(model_path)?;
    attach_frozen(&mut model, frozen)?;
    let docs = read_documents(data)?;
    let k = top_k.unwrap_or(config.data.top_k);
    let predict_one = |doc: &Document| -> Result<PredictionRecord> {
        let phrases = if chunked {
            let merged = chunk_and_merge(doc, &model, config.data.chunk_len, usize::MAX)?;
            let mut kept = dedup_substrings(&merged.phrases);
            kept.truncate(k);
            kept
        } else {
            let doc = truncate(doc, config.training.max_len);
            predict_topk(&model.distribution(&doc)?, &doc, k)?.phrases
        };
        Ok(PredictionRecord {
            id: doc.id.clone(),
            phrases,
        })
    };
    let records = docs
        .iter()
        .map(|d| predict_one(&d.document))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &records)?;
    write_meta(
        out,
        &provenance(
            "predict",
            config,
            json!({ "model": model_path, "data": data, "chunked": chunked, "top_k": k }),
        ),
    )?;
    println!("wrote predictions for {} documents to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn prediction_lists(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| (r.id, r.phrases.into_iter().map(|(p, _)| p).collect()))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_command(
    config: &RunConfig,
    preds: &Path,
    gold_path: &Path,
    depths: &[usize],
    f1_depth: usize,
    stem: bool,
    compare: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let gold_records: Vec<DatasetRecord> = read_jsonl(gold_path)?;
    let gold: Vec<(String, Vec<String>)> = gold_records
        .into_iter()
        .map(|r| (r.id, r.keyphrases.unwrap_or_default()))
        .collect();
    let normalizer = PhraseNormalizer { stem: stem || config.data.stem };
    let report = evaluate(&prediction_lists(preds)?, &gold, depths, f1_depth, &normalizer)?;
    print!("{}", report.table());
    if report.missing_predictions > 0 {
        eprintln!("note: {} gold document(s) had no prediction and count as misses", report.missing_predictions);
    }
    if report.excluded_empty_gold > 0 {
        eprintln!("note: {} document(s) with no gold keyphrases were excluded", report.excluded_empty_gold);
    }
    let mut result = json!({ "metrics": report });
    if let Some(other) = compare {
        let other_report = evaluate(&prediction_lists(other)?, &gold, depths, f1_depth, &normalizer)?;
        let a: Vec<f64> = report.per_document.iter().map(|d| d.f1).collect();
        let b: Vec<f64> = other_report.per_document.iter().map(|d| d.f1).collect();
        let test = permutation_test(&a, &b, DEFAULT_RESAMPLES, config.training.seed)?;
        match test.p_value {
            Some(p) => println!(
                "F1@{f1_depth} difference {:+.4} vs {}: p = {p:.4}",
                test.observed_mean_difference,
                other.display()
            ),
            None => println!("too few documents for a permutation test"),
        }
        result["comparison"] = json!({ "against": other, "metrics": other_report, "permutation": test });
    }
    if let Some(out) = out {
        result["provenance"] = provenance("evaluate", config, json!({ "preds": preds, "gold": gold_path }));
        write_atomic(out, serde_json::to_string_pretty(&result)?.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn baseline(
    config: &RunConfig,
    method: Method,
    data: &Path,
    out: &Path,
    corpus: Option<&Path>,
    stopwords: Option<&Path>,
    top_k: Option<usize>,
) -> Result<ExitCode> {
    let docs: Vec<Document> = read_documents(data)?.into_iter().map(|d| d.document).collect();
    let stopwords = match stopwords {
        Some(path) => Stopwords::from_file(path)?,
        None => Stopwords::default(),
    };
    let k = top_k.unwrap_or(config.data.top_k);
    let max_ngram = config.model.max_ngram;
    let records: Vec<PredictionRecord> = match method {
        Method::Tfidf => {
            let corpus_docs: Vec<Document> = match corpus {
                Some(path) => read_documents(path)?.into_iter().map(|d| d.document).collect(),
                None => docs.clone(),
            };
            let stats = CorpusStats::build(&corpus_docs);
            docs.iter()
                .map(|d| PredictionRecord {
                    id: d.id.clone(),
                    phrases: tfidf_rank(d, &stats, max_ngram, &stopwords).truncated(k).phrases,
                })
                .collect()
        }
        Method::Textrank => {
            let tr = TextRankConfig::default();
            docs.iter()
                .map(|d| PredictionRecord {
                    id: d.id.clone(),
                    phrases: textrank_rank(d, &tr, max_ngram, &stopwords).truncated(k).phrases,
                })
                .collect()
        }
    };
    write_jsonl(out, &records)?;
    let name = match method {
        Method::Tfidf => "tfidf",
        Method::Textrank => "textrank",
    };
    write_meta(out, &provenance("baseline", config, json!({ "method": name, "data": data, "top_k": k })))?;
    println!("wrote {name} predictions for {} documents to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn agreement(path: &Path, depth: usize, mode: AgreementMode) -> Result<ExitCode> {
    let items: Vec<AnnotationRecord> = read_jsonl(path)?;
    let report = judge_agreement(&items, depth, mode)?;
    for (id, judge) in &report.short_lists {
        eprintln!("note: item `{id}` judge {judge} listed fewer than {depth} phrases");
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

struct DocumentLoss<'a> {
    model: &'a SpanModel,
    doc: Document,
    target: SpanTarget,
}

impl Objective for DocumentLoss<'_> {
    fn loss(&mut self, store: &ParamStore) -> kpe_core::Result<f64> {
        Ok(self.gradient(store)?.0)
    }

    fn gradient(&mut self, store: &ParamStore) -> kpe_core::Result<(f64, Gradients)> {
        let mut tape = Tape::new(store);
        let loss = self.model.loss(&mut tape, &self.doc, &self.target)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    }
}

fn gradcheck(config: &RunConfig, exhaustive: bool) -> Result<ExitCode> {
    if config.model.embedding.source == SourceMode::FrozenFile {
        bail!("gradcheck needs a trainable lookup table; set model.embedding.source=trainable_lookup");
    }
    let records = generate(&SyntheticSpec {
        documents: 1,
        min_len: 12,
        max_len: 12,
        max_phrase: config.model.max_ngram.min(3),
        cue: Cue::Visual,
        seed: config.training.seed,
        ..SyntheticSpec::default()
    });
    let (docs, _) = ingest(&records);
    let labeled = docs[0].labeled().ok_or_else(|| anyhow!("synthetic document has no keyphrase"))?;
    let target = build_labels(&labeled, config.model.max_ngram)?;
    let mut model_config = config.model.clone();
    model_config.dropout = 0.0;
    let model = SpanModel::new(model_config, TokenVocabulary::build([&labeled.document], 1), config.training.seed)?;
    let options = CheckOptions {
        seed: config.training.seed,
        max_coords_per_param: if exhaustive { None } else { CheckOptions::default().max_coords_per_param },
        ..CheckOptions::default()
    };
    let mut store = model.params.clone();
    let mut objective = DocumentLoss {
        model: &model,
        doc: labeled.document,
        target,
    };
    let report = finite_difference_check(&mut store, &mut objective, &options)?;
    for p in &report.per_param {
        println!("{:<48}{:>8} coords  {:.2e}", p.name, p.coordinates_checked, p.max_relative_error);
    }
    let worst = report.max_relative_error();
    if worst < GRADCHECK_TOLERANCE {
        println!("max rel err {worst:.2e} < {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("max rel err {worst:.2e} >= {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::FAILURE)
    }
}
