//! Passage corpus ingestion, canonical DocIDs and gold task records.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token::tokenize;

/// Corpora larger than this are kept in a spill file keyed by DocID.
pub const DEFAULT_DISK_THRESHOLD: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(
        "duplicate DocID `{doc_id}`: record `{first_id}` (line {first_line}) and record `{second_id}` (line {second_line})"
    )]
    Conflict {
        doc_id: String,
        first_id: String,
        first_line: usize,
        second_id: String,
        second_line: usize,
    },
    #[error("unknown DocID `{0}`")]
    UnknownDocId(String),
    #[error("spill store is corrupt at DocID `{0}`")]
    CorruptStore(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Builds the canonical `"{title} # {section}"` identifier with whitespace
/// runs collapsed and the ends trimmed.
pub fn canonical_docid(title: &str, section: &str) -> Result<String, CorpusError> {
    let title = collapse_whitespace(title);
    if title.is_empty() {
        return Err(CorpusError::InvalidDocument("empty title".into()));
    }
    let section = collapse_whitespace(section);
    if section.is_empty() {
        Ok(format!("{title} #"))
    } else {
        Ok(format!("{title} # {section}"))
    }
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits on `.`, `!` or `?` when followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    out.push(sentence.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub section: String,
    pub body: String,
    pub sentences: Vec<String>,
}

impl Document {
    pub fn new(title: &str, section: &str, body: &str) -> Result<Self, CorpusError> {
        Ok(Self {
            doc_id: canonical_docid(title, section)?,
            title: title.to_string(),
            section: section.to_string(),
            body: body.to_string(),
            sentences: split_sentences(body),
        })
    }

    /// Tokens indexed for lexical retrieval: title, section, then body.
    pub fn indexed_tokens(&self) -> Vec<String> {
        let mut tokens = tokenize(&self.title);
        tokens.extend(tokenize(&self.section));
        tokens.extend(tokenize(&self.body));
        tokens
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub document_count: usize,
    /// Tokens over titles, sections and bodies.
    pub token_count: usize,
}

#[derive(Debug, Deserialize)]
struct CorpusLine {
    id: serde_json::Value,
    title: String,
    #[serde(default)]
    section: String,
    text: String,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Document count above which documents move to a spill file.
    pub disk_threshold: usize,
    /// Directory for the spill file; the system temp dir when unset.
    pub spill_dir: Option<PathBuf>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            disk_threshold: DEFAULT_DISK_THRESHOLD,
            spill_dir: None,
        }
    }
}

struct DiskStore {
    file: Mutex<File>,
    offsets: BTreeMap<String, (u64, u32)>,
    _spill: tempfile::TempPath,
}

impl std::fmt::Debug for DiskStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiskStore")
            .field("documents", &self.offsets.len())
            .finish()
    }
}

impl DiskStore {
    fn read(&self, doc_id: &str, (offset, len): (u64, u32)) -> Result<Document, CorpusError> {
        let mut buf = vec![0u8; len as usize];
        {
            let mut file = self.file.lock().expect("spill file lock poisoned");
            file.seek(SeekFrom::Start(offset))?;
            file.read_exact(&mut buf)?;
        }
        serde_json::from_slice(&buf).map_err(|_| CorpusError::CorruptStore(doc_id.to_string()))
    }
}

#[derive(Debug)]
enum Storage {
    Memory(BTreeMap<String, Document>),
    Disk(DiskStore),
}

/// Immutable DocID → Document map.
#[derive(Debug)]
pub struct Corpus {
    storage: Storage,
    stats: CorpusStats,
}

impl Default for Corpus {
    fn default() -> Self {
        Self {
            storage: Storage::Memory(BTreeMap::new()),
            stats: CorpusStats::default(),
        }
    }
}

impl Corpus {
    /// In-memory corpus from already-built documents.
    pub fn from_documents(docs: impl IntoIterator<Item = Document>) -> Result<Self, CorpusError> {
        let mut builder = Builder::new(IngestOptions::default());
        for (i, doc) in docs.into_iter().enumerate() {
            builder.add(doc, &format!("#{i}"), i + 1)?;
        }
        builder.finish()
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.stats.document_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_on_disk(&self) -> bool {
        matches!(self.storage, Storage::Disk(_))
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        match &self.storage {
            Storage::Memory(m) => m.contains_key(doc_id),
            Storage::Disk(d) => d.offsets.contains_key(doc_id),
        }
    }

    pub fn get(&self, doc_id: &str) -> Result<Cow<'_, Document>, CorpusError> {
        match &self.storage {
            Storage::Memory(m) => m
                .get(doc_id)
                .map(Cow::Borrowed)
                .ok_or_else(|| CorpusError::UnknownDocId(doc_id.to_string())),
            Storage::Disk(d) => {
                let loc = *d
                    .offsets
                    .get(doc_id)
                    .ok_or_else(|| CorpusError::UnknownDocId(doc_id.to_string()))?;
                d.read(doc_id, loc).map(Cow::Owned)
            }
        }
    }

    /// DocIDs in lexicographic order.
    pub fn doc_ids(&self) -> Box<dyn Iterator<Item = &str> + '_> {
        match &self.storage {
            Storage::Memory(m) => Box::new(m.keys().map(String::as_str)),
            Storage::Disk(d) => Box::new(d.offsets.keys().map(String::as_str)),
        }
    }

    /// Documents in DocID order.
    pub fn iter(&self) -> impl Iterator<Item = Result<Cow<'_, Document>, CorpusError>> + '_ {
        self.doc_ids().map(move |id| self.get(id))
    }
}

/// Spill file writer, its path, the write offset and per-DocID (offset, length).
type Spill = (
    BufWriter<File>,
    tempfile::TempPath,
    u64,
    BTreeMap<String, (u64, u32)>,
);

struct Builder {
    options: IngestOptions,
    origin: BTreeMap<String, (String, usize)>,
    memory: BTreeMap<String, Document>,
    disk: Option<Spill>,
    stats: CorpusStats,
}

impl Builder {
    fn new(options: IngestOptions) -> Self {
        Self {
            options,
            origin: BTreeMap::new(),
            memory: BTreeMap::new(),
            disk: None,
            stats: CorpusStats::default(),
        }
    }

    fn add(&mut self, doc: Document, source_id: &str, line: usize) -> Result<(), CorpusError> {
        if let Some((first_id, first_line)) = self.origin.get(&doc.doc_id) {
            return Err(CorpusError::Conflict {
                doc_id: doc.doc_id,
                first_id: first_id.clone(),
                first_line: *first_line,
                second_id: source_id.to_string(),
                second_line: line,
            });
        }
        self.origin
            .insert(doc.doc_id.clone(), (source_id.to_string(), line));
        self.stats.document_count += 1;
        self.stats.token_count += doc.indexed_tokens().len();

        if self.disk.is_none() && self.memory.len() >= self.options.disk_threshold {
            self.spill()?;
        }
        match &mut self.disk {
            Some((writer, _, pos, offsets)) => {
                let bytes = serde_json::to_vec(&doc).expect("document serializes");
                writer.write_all(&bytes)?;
                writer.write_all(b"\n")?;
                offsets.insert(doc.doc_id, (*pos, bytes.len() as u32));
                *pos += bytes.len() as u64 + 1;
            }
            None => {
                self.memory.insert(doc.doc_id.clone(), doc);
            }
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<(), CorpusError> {
        let tmp = match &self.options.spill_dir {
            Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
            None => tempfile::NamedTempFile::new()?,
        };
        let (file, path) = tmp.into_parts();
        log::info!(
            "corpus exceeds {} documents; spilling to {}",
            self.options.disk_threshold,
            path.display()
        );
        let mut state = (BufWriter::new(file), path, 0u64, BTreeMap::new());
        for (id, doc) in std::mem::take(&mut self.memory) {
            let bytes = serde_json::to_vec(&doc).expect("document serializes");
            state.0.write_all(&bytes)?;
            state.0.write_all(b"\n")?;
            state.3.insert(id, (state.2, bytes.len() as u32));
            state.2 += bytes.len() as u64 + 1;
        }
        self.disk = Some(state);
        Ok(())
    }

    fn finish(self) -> Result<Corpus, CorpusError> {
        let storage = match self.disk {
            None => Storage::Memory(self.memory),
            Some((writer, path, _, offsets)) => {
                let file = writer.into_inner().map_err(|e| e.into_error())?;
                file.sync_data()?;
                let file = File::open(&path)?;
                Storage::Disk(DiskStore {
                    file: Mutex::new(file),
                    offsets,
                    _spill: path,
                })
            }
        };
        Ok(Corpus {
            storage,
            stats: self.stats,
        })
    }
}

fn source_id_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads the line-delimited corpus format (`id`, `title`, `section`, `text`).
pub fn ingest_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    ingest_corpus_with(path, &IngestOptions::default())
}

pub fn ingest_corpus_with(path: &Path, options: &IngestOptions) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    ingest_reader(reader, options)
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    options: &IngestOptions,
) -> Result<Corpus, CorpusError> {
    let mut builder = Builder::new(options.clone());
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let doc =
            Document::new(&rec.title, &rec.section, &rec.text).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        builder.add(doc, &source_id_text(&rec.id), line_no)?;
    }
    builder.finish()
}

/// One query with its acceptable answers and provenance groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub query_id: String,
    pub input: String,
    pub answers: Vec<String>,
    /// One provenance group per gold output that carries provenance.
    pub provenance_groups: Vec<Vec<String>>,
}

impl GoldRecord {
    /// All provenance DocIDs, first occurrence order, deduplicated.
    pub fn provenance(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.provenance_groups
            .iter()
            .flatten()
            .filter(|d| seen.insert(d.as_str()))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct GoldLine {
    id: serde_json::Value,
    input: String,
    #[serde(default)]
    output: Vec<GoldOutput>,
}

#[derive(Debug, Deserialize)]
struct GoldOutput {
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    provenance: Vec<GoldProvenance>,
}

#[derive(Debug, Deserialize)]
struct GoldProvenance {
    title: String,
    #[serde(default)]
    section: Option<String>,
}

/// Reads the line-delimited gold format (`id`, `input`, `output`).
pub fn read_gold<R: BufRead>(reader: R) -> Result<Vec<GoldRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            line: i + 1,
            message,
        };
        let rec: GoldLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut answers = Vec::new();
        let mut groups = Vec::new();
        for output in rec.output {
            if let Some(a) = output.answer {
                answers.push(a);
            }
            if !output.provenance.is_empty() {
                let mut group = Vec::new();
                for p in output.provenance {
                    let id = canonical_docid(&p.title, p.section.as_deref().unwrap_or(""))
                        .map_err(|e| parse_err(e.to_string()))?;
                    if !group.contains(&id) {
                        group.push(id);
                    }
                }
                groups.push(group);
            }
        }
        out.push(GoldRecord {
            query_id: source_id_text(&rec.id),
            input: rec.input,
            answers,
            provenance_groups: groups,
        });
    }
    Ok(out)
}

pub fn read_gold_file(path: &Path) -> Result<Vec<GoldRecord>, CorpusError> {
    read_gold(BufReader::new(File::open(path)?))
}
