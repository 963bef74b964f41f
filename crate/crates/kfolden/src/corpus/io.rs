//! Reading corpora from jsonl/csv files and persisting benchmark splits.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchmarkSplit, Document, LabelSpace, LabeledCorpus, ShiftKind};
use crate::{Error, Result};

/// Supported corpus file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// One JSON object per line: `{"text": ..., "label": ..., "source"?: ...}`.
    Jsonl,
    /// Header `text,label[,source]`, double-quote escaped.
    Csv,
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: String,
    source: Option<String>,
}

/// Accumulates documents while assigning label indices in first-appearance
/// order.
struct CorpusBuilder {
    default_source: String,
    documents: Vec<Document>,
    label_names: Vec<String>,
    label_index: HashMap<String, usize>,
}

impl CorpusBuilder {
    fn new(default_source: &str) -> Self {
        CorpusBuilder {
            default_source: default_source.to_string(),
            documents: Vec::new(),
            label_names: Vec::new(),
            label_index: HashMap::new(),
        }
    }

    fn push(&mut self, path: &Path, line: usize, record: RawRecord) -> Result<()> {
        if record.text.trim().is_empty() {
            return Err(Error::parse(path, line, "document text is empty"));
        }
        let label = match self.label_index.get(&record.label) {
            Some(&i) => i,
            None => {
                let i = self.label_names.len();
                self.label_names.push(record.label.clone());
                self.label_index.insert(record.label, i);
                i
            }
        };
        let source = record.source.unwrap_or_else(|| self.default_source.clone());
        self.documents.push(Document {
            id: format!("{source}:{line}"),
            text: record.text,
            label,
            source,
        });
        Ok(())
    }

    fn finish(self, path: &Path) -> Result<LabeledCorpus> {
        if self.documents.is_empty() {
            return Err(Error::EmptyCorpus(path.display().to_string()));
        }
        Ok(LabeledCorpus::new(self.documents, self.label_names))
    }
}

fn default_source(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string())
}

/// Read a labeled corpus from `path`.
///
/// Document ids are `source:line` so they stay stable across runs and unique
/// across corpora from different sources. When a record carries no `source`
/// field, the file stem is used. Blank lines are skipped; any malformed
/// record is an error naming its line.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LabeledCorpus> {
    match format {
        CorpusFormat::Jsonl => load_jsonl(path),
        CorpusFormat::Csv => load_csv(path),
    }
}

fn load_jsonl(path: &Path) -> Result<LabeledCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut builder = CorpusBuilder::new(&default_source(path));
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, line_no, format!("malformed record: {e}")))?;
        builder.push(path, line_no, record)?;
    }
    builder.finish(path)
}

fn load_csv(path: &Path) -> Result<LabeledCorpus> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, 1, format!("csv open failed: {other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let text_col = col("text")
        .ok_or_else(|| Error::parse(path, 1, "header must contain a `text` column"))?;
    let label_col = col("label")
        .ok_or_else(|| Error::parse(path, 1, "header must contain a `label` column"))?;
    let source_col = col("source");

    let mut builder = CorpusBuilder::new(&default_source(path));
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or_default();
            Error::parse(path, line, format!("malformed record: {e}"))
        })?;
        let line_no = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::parse(path, line_no, format!("missing column {i}")))
        };
        let raw = RawRecord {
            text: field(text_col)?.to_string(),
            label: field(label_col)?.to_string(),
            source: match source_col {
                Some(c) => record.get(c).map(str::to_string),
                None => None,
            },
        };
        builder.push(path, line_no, raw)?;
    }
    builder.finish(path)
}

#[derive(Serialize, Deserialize)]
struct SplitDocRecord {
    id: String,
    text: String,
    label: String,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceFile {
    shift_kind: ShiftKind,
    id_labels: Vec<String>,
    ood_labels: Vec<String>,
}

const LABEL_SPACE_FILE: &str = "label_space.json";

/// Persist a split as five jsonl files plus `label_space.json`.
///
/// Each file is written to a temporary sibling and renamed into place, so a
/// crash never leaves a half-written set behind an existing name.
pub fn write_split(dir: &Path, split: &BenchmarkSplit) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, docs) in split.sets() {
        let mut body = String::new();
        for doc in docs {
            let record = SplitDocRecord {
                id: doc.id.clone(),
                text: doc.text.clone(),
                label: split.label_space.name_of(doc.label).to_string(),
                source: doc.source.clone(),
            };
            body.push_str(&serde_json::to_string(&record)?);
            body.push('\n');
        }
        write_atomic(&dir.join(format!("{name}.jsonl")), body.as_bytes())?;
    }
    let space = LabelSpaceFile {
        shift_kind: split.shift_kind,
        id_labels: split.label_space.names[..split.label_space.k()].to_vec(),
        ood_labels: split.label_space.names[split.label_space.k()..].to_vec(),
    };
    let body = serde_json::to_string_pretty(&space)?;
    write_atomic(&dir.join(LABEL_SPACE_FILE), body.as_bytes())
}

/// Write `bytes` to `path` via a sibling temp file and rename, so an
/// interrupted run never leaves a truncated file at the target path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a split previously written by [`write_split`], revalidating every
/// structural invariant.
pub fn read_split(dir: &Path) -> Result<BenchmarkSplit> {
    let space_path = dir.join(LABEL_SPACE_FILE);
    let body = std::fs::read_to_string(&space_path).map_err(|e| Error::io(&space_path, e))?;
    let space: LabelSpaceFile = serde_json::from_str(&body)?;
    let mut names = space.id_labels.clone();
    names.extend(space.ood_labels.iter().cloned());
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    if index.len() != names.len() {
        return Err(Error::SplitInvariant(format!(
            "{} lists a duplicate label name",
            space_path.display()
        )));
    }

    let read_set = |name: &str| -> Result<Vec<Document>> {
        let path = dir.join(format!("{name}.jsonl"));
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut docs = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SplitDocRecord = serde_json::from_str(&line)
                .map_err(|e| Error::parse(&path, line_no, format!("malformed record: {e}")))?;
            let label = *index.get(record.label.as_str()).ok_or_else(|| {
                Error::parse(
                    &path,
                    line_no,
                    format!("label {:?} is not in label_space.json", record.label),
                )
            })?;
            docs.push(Document {
                id: record.id,
                text: record.text,
                label,
                source: record.source,
            });
        }
        Ok(docs)
    };

    let split = BenchmarkSplit {
        train: read_set("train")?,
        id_valid: read_set("id_valid")?,
        id_test: read_set("id_test")?,
        ood_valid: read_set("ood_valid")?,
        ood_test: read_set("ood_test")?,
        shift_kind: space.shift_kind,
        label_space: LabelSpace {
            id_labels: (0..space.id_labels.len()).collect(),
            ood_labels: (space.id_labels.len()..names.len()).collect(),
            names,
        },
    };
    split.validate()?;
    Ok(split)
}
