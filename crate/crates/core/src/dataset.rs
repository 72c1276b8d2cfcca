//! JSON-lines dataset files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compute::checkpoint::write_atomic;
use crate::doc::{tokenize, Document, LabeledDocument};
use crate::error::{Error, Result};
use crate::visual::{parse_layout, passthrough_features, ParsedLayout};

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyphrases: Option<Vec<String>>,
    /// Where the labels came from, e.g. `"click_queries"` for query-prediction data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl DatasetRecord {
    pub fn from_document(doc: &Document, keyphrases: Option<Vec<String>>) -> Self {
        Self {
            id: doc.id.clone(),
            text: doc.tokens.join(" "),
            visual: Some(doc.visual.iter().map(|v| v.to_vec()).collect()),
            keyphrases,
            source: None,
        }
    }
}

impl From<&ParsedLayout> for DatasetRecord {
    fn from(layout: &ParsedLayout) -> Self {
        Self {
            id: layout.id.clone().unwrap_or_default(),
            text: layout.tokens().join(" "),
            visual: Some(layout.features().iter().map(|v| v.to_vec()).collect()),
            keyphrases: layout.keyphrases.clone(),
            source: None,
        }
    }
}

/// Featurizes every `*.json` layout file in `dir`, in file-name order. A
/// layout without an `id` takes its file stem.
pub fn featurize_dir(dir: &Path) -> Result<Vec<DatasetRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let source = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let layout = parse_layout(&source).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut record = DatasetRecord::from(&layout);
        if record.id.is_empty() {
            record.id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&content, path)
}

pub fn parse_jsonl<T: DeserializeOwned>(content: &str, path: &Path) -> Result<Vec<T>> {
    content
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedDocument {
    pub document: Document,
    pub keyphrases: Option<Vec<String>>,
}

impl IngestedDocument {
    pub fn labeled(&self) -> Option<LabeledDocument> {
        let kps = self.keyphrases.clone()?;
        LabeledDocument::new(self.document.clone(), kps).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    /// `(id, reason)` for every rejected record.
    pub rejected: Vec<(String, String)>,
    /// Records without visual arrays; zero features were substituted.
    pub visual_substituted: Vec<String>,
}

/// Tokenizes and validates records. Bad records are reported, never
/// silently dropped.
pub fn ingest(records: &[DatasetRecord]) -> (Vec<IngestedDocument>, IngestReport) {
    let mut docs = Vec::with_capacity(records.len());
    let mut report = IngestReport::default();
    for record in records {
        match ingest_one(record) {
            Ok((doc, substituted)) => {
                if substituted {
                    report.visual_substituted.push(record.id.clone());
                }
                report.accepted += 1;
                docs.push(doc);
            }
            Err(e) => report.rejected.push((record.id.clone(), e.to_string())),
        }
    }
    (docs, report)
}

fn ingest_one(record: &DatasetRecord) -> Result<(IngestedDocument, bool)> {
    let tokens = tokenize(&record.text);
    if tokens.is_empty() {
        return Err(Error::EmptyDocument(record.id.clone()));
    }
    let pass = passthrough_features(&record.id, tokens.len(), record.visual.as_deref())?;
    let document = Document::new(record.id.clone(), tokens, pass.visual)?;
    let keyphrases = match &record.keyphrases {
        Some(kps) => {
            let kept: Vec<String> = kps.iter().filter(|k| !tokenize(k).is_empty()).cloned().collect();
            if kept.is_empty() {
                return Err(Error::InvalidTarget(format!(
                    "document `{}` has no non-empty keyphrase",
                    record.id
                )));
            }
            Some(kept)
        }
        None => None,
    };
    Ok((
        IngestedDocument {
            document,
            keyphrases,
        },
        pass.substituted,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_reports_line_numbers() {
        let content = "{\"id\": \"a\", \"text\": \"x\"}\n\n{\"id\": 3}\n";
        match parse_jsonl::<DatasetRecord>(content, Path::new("f.jsonl")) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingest_counts_rejections_and_substitutions() {
        let records = vec![
            DatasetRecord {
                id: "ok".into(),
                text: "Cheap flights to Paris".into(),
                visual: None,
                keyphrases: Some(vec!["cheap flights".into()]),
                source: None,
            },
            DatasetRecord {
                id: "empty".into(),
                text: "   ".into(),
                visual: None,
                keyphrases: None,
                source: None,
            },
            DatasetRecord {
                id: "narrow".into(),
                text: "a b".into(),
                visual: Some(vec![vec![0.0; 17]; 2]),
                keyphrases: None,
                source: None,
            },
        ];
        let (docs, report) = ingest(&records);
        assert_eq!(docs.len(), 1);
        assert_eq!(report.accepted, 1);
        assert_eq!(report.rejected.len(), 2);
        assert_eq!(report.visual_substituted, ["ok"]);
        assert_eq!(docs[0].document.tokens, ["cheap", "flights", "to", "paris"]);
    }

    #[test]
    fn records_round_trip_through_text() {
        let doc = Document::from_text("d1", "Protein synthesis, in cells").unwrap();
        let rec = DatasetRecord::from_document(&doc, Some(vec!["protein synthesis".into()]));
        let text = to_jsonl(std::slice::from_ref(&rec)).unwrap();
        let back: Vec<DatasetRecord> = parse_jsonl(&text, Path::new("mem")).unwrap();
        assert_eq!(back, vec![rec]);
        let (docs, _) = ingest(&back);
        assert_eq!(docs[0].document, doc);
    }
}
