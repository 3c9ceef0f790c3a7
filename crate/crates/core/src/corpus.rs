//! Corpus ingestion: documents, sentences and externally extracted triples.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::StopwordList;
use crate::jsonl::{self, JsonlLines};
use crate::text::{split_sentences, tokenize};

const VERBS: &str = include_str!("../data/verbs.txt");

/// Words that may extend a verb span in the fallback extractor ("arrives at").
const PARTICLES: [&str; 14] = [
    "at", "in", "on", "to", "from", "by", "for", "with", "of", "into", "as", "near", "after",
    "before",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence {
            index,
            text,
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: Option<String>,
    pub sentences: Vec<Sentence>,
}

impl Document {
    /// Builds a document by segmenting `text`.
    pub fn from_text(doc_id: impl Into<String>, title: Option<String>, text: &str) -> Result<Self> {
        Self::from_sentences(
            doc_id,
            title,
            segment_sentences(text).into_iter().map(|s| s.text),
        )
    }

    /// Builds a document from pre-segmented sentences. Blank sentences are rejected
    /// so that triple sentence indices keep pointing at the right sentence.
    pub fn from_sentences(
        doc_id: impl Into<String>,
        title: Option<String>,
        sentences: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        if doc_id.trim().is_empty() {
            return Err(Error::invalid("document", "doc_id is blank"));
        }
        let mut out = Vec::new();
        for (index, text) in sentences.into_iter().enumerate() {
            let text = text.trim();
            if text.is_empty() {
                return Err(Error::invalid(
                    "document",
                    format!("{doc_id}: sentence {index} is blank"),
                ));
            }
            out.push(Sentence::new(index, text));
        }
        Ok(Document {
            doc_id,
            title,
            sentences: out,
        })
    }

    /// Drops every sentence past `max`.
    pub fn truncate(&mut self, max: usize) {
        self.sentences.truncate(max);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTriple {
    pub doc_id: String,
    #[serde(rename = "sent")]
    pub sentence_index: usize,
    #[serde(rename = "subj")]
    pub subject: String,
    #[serde(rename = "rel")]
    pub relation: String,
    #[serde(rename = "obj")]
    pub object: String,
    #[serde(rename = "conf", default)]
    pub confidence: Option<f64>,
}

impl RawTriple {
    pub fn new(
        doc_id: impl Into<String>,
        sentence_index: usize,
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        RawTriple {
            doc_id: doc_id.into(),
            sentence_index,
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            confidence: None,
        }
    }
}

/// Splits raw text into sentences; see [`crate::text::split_sentences`] for the rule.
pub fn segment_sentences(raw_text: &str) -> Vec<Sentence> {
    split_sentences(raw_text)
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sentence::new(i, s))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Blank-line separated blocks; ids are `doc-<n>`.
    Plain,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(CorpusFormat::Plain),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(format!(
                "unknown corpus format {other:?} (expected plain or jsonl)"
            )),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    doc_id: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    sentences: Option<Vec<String>>,
}

/// One unparsed document: a JSONL line or a plain-text block.
#[derive(Debug, Clone)]
pub struct RawUnit {
    /// 1-based line where the unit starts.
    pub line: usize,
    /// 0-based position of the unit in the file.
    pub ordinal: usize,
    pub content: String,
}

impl RawUnit {
    /// Parses and segments the unit. Pure, so it can run on any worker.
    pub fn parse(&self, format: CorpusFormat) -> Result<Document, String> {
        match format {
            CorpusFormat::Plain => {
                Document::from_text(format!("doc-{}", self.ordinal), None, &self.content)
                    .map_err(|e| e.to_string())
            }
            CorpusFormat::Jsonl => {
                let record: DocumentRecord =
                    serde_json::from_str(&self.content).map_err(|e| e.to_string())?;
                let doc = match (record.text, record.sentences) {
                    (Some(text), None) => Document::from_text(record.doc_id, record.title, &text),
                    (None, Some(sentences)) => {
                        Document::from_sentences(record.doc_id, record.title, sentences)
                    }
                    _ => {
                        return Err(
                            "exactly one of \"text\" or \"sentences\" is required".to_string()
                        )
                    }
                };
                doc.map_err(|e| e.to_string())
            }
        }
    }
}

/// Streams the raw units of a corpus file in file order.
pub struct CorpusUnits {
    format: CorpusFormat,
    lines: std::iter::Enumerate<std::io::Lines<BufReader<File>>>,
    path: PathBuf,
    ordinal: usize,
    limit: Option<usize>,
    done: bool,
}

impl CorpusUnits {
    pub fn open(path: &Path, format: CorpusFormat) -> Result<Self> {
        Ok(CorpusUnits {
            format,
            lines: jsonl::open(path)?.lines().enumerate(),
            path: path.to_path_buf(),
            ordinal: 0,
            limit: None,
            done: false,
        })
    }

    /// Stops after `max` units.
    pub fn with_limit(mut self, max: Option<usize>) -> Self {
        self.limit = max;
        self
    }

    pub fn format(&self) -> CorpusFormat {
        self.format
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Iterator for CorpusUnits {
    type Item = Result<RawUnit>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.limit.is_some_and(|max| self.ordinal >= max) {
            return None;
        }
        let mut block: Option<RawUnit> = None;
        loop {
            let (idx, line) = match self.lines.next() {
                None => {
                    self.done = true;
                    break;
                }
                Some((idx, Ok(line))) => (idx, line),
                Some((_, Err(e))) => return Some(Err(Error::io(&self.path, e))),
            };
            let blank = line.trim().is_empty();
            match self.format {
                CorpusFormat::Jsonl => {
                    if blank || (idx == 0 && jsonl::is_header_line(&line)) {
                        continue;
                    }
                    block = Some(RawUnit {
                        line: idx + 1,
                        ordinal: self.ordinal,
                        content: line,
                    });
                    break;
                }
                CorpusFormat::Plain => match (&mut block, blank) {
                    (None, true) => continue,
                    (Some(_), true) => break,
                    (None, false) => {
                        block = Some(RawUnit {
                            line: idx + 1,
                            ordinal: self.ordinal,
                            content: line,
                        })
                    }
                    (Some(unit), false) => {
                        unit.content.push('\n');
                        unit.content.push_str(&line);
                    }
                },
            }
        }
        if block.is_some() {
            self.ordinal += 1;
        }
        block.map(Ok)
    }
}

/// Loads documents in file order.
///
/// A malformed record is an error naming its line; with `skip_bad` it is
/// counted in [`DocumentStream::skipped`] instead. Duplicate ids are malformed.
pub fn load_corpus(path: &Path, format: CorpusFormat, skip_bad: bool) -> Result<DocumentStream> {
    Ok(DocumentStream {
        units: CorpusUnits::open(path, format)?,
        seen: HashSet::new(),
        skip_bad,
        skipped: 0,
    })
}

pub struct DocumentStream {
    units: CorpusUnits,
    seen: HashSet<String>,
    skip_bad: bool,
    skipped: usize,
}

impl DocumentStream {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for DocumentStream {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let unit = match self.units.next()? {
                Ok(unit) => unit,
                Err(e) => return Some(Err(e)),
            };
            let parsed = unit.parse(self.units.format()).and_then(|doc| {
                if self.seen.insert(doc.doc_id.clone()) {
                    Ok(doc)
                } else {
                    Err(format!("duplicate doc_id {:?}", doc.doc_id))
                }
            });
            match parsed {
                Ok(doc) => return Some(Ok(doc)),
                Err(_) if self.skip_bad => self.skipped += 1,
                Err(message) => {
                    return Some(Err(Error::data(self.units.path(), unit.line, message)))
                }
            }
        }
    }
}

/// Key of the triples extracted from one sentence.
pub type SentenceKey = (String, usize);

/// Raw triples grouped by sentence, keys in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct TripleIndex {
    pub groups: IndexMap<SentenceKey, Vec<RawTriple>>,
    /// Malformed lines skipped under `skip_bad`.
    pub skipped: usize,
    /// The stopword version recorded in the file header, when it carries one.
    pub stopwords_version: Option<String>,
}

impl TripleIndex {
    pub fn push(&mut self, triple: RawTriple) {
        self.groups
            .entry((triple.doc_id.clone(), triple.sentence_index))
            .or_default()
            .push(triple);
    }

    pub fn get(&self, doc_id: &str, sentence_index: usize) -> &[RawTriple] {
        self.groups
            .get(&(doc_id.to_string(), sentence_index))
            .map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Loads a RawTriple JSONL file. Duplicates are kept; file order is preserved
/// within each sentence.
pub fn load_triples(path: &Path, skip_bad: bool) -> Result<TripleIndex> {
    let mut index = TripleIndex::default();
    let mut lines = JsonlLines::open(path)?;
    for line in lines.by_ref() {
        let line = line?;
        match serde_json::from_str::<RawTriple>(&line.text) {
            Ok(triple) => index.push(triple),
            Err(_) if skip_bad => index.skipped += 1,
            Err(e) => return Err(Error::data(path, line.line, e.to_string())),
        }
    }
    index.stopwords_version = lines.header().map(|h| h.stopwords_version.clone());
    Ok(index)
}

fn verbs() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        VERBS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Pattern-based subject-verb-object extraction, a dependency-free stand-in for
/// a neural OpenIE system.
///
/// The first token in the verb list starts the relation, which then extends
/// over further verbs and particles. The subject is the run of non-stopword,
/// non-verb tokens directly before the relation; the object is everything after
/// it. Returns nothing when any of the three would be empty.
pub fn naive_extract(doc_id: &str, sentence: &Sentence) -> Vec<RawTriple> {
    let verbs = verbs();
    let stops = StopwordList::default_list();
    let tokens = &sentence.tokens;
    let Some(verb_at) = tokens.iter().position(|t| verbs.contains(t.as_str())) else {
        return Vec::new();
    };
    let mut subject_start = verb_at;
    while subject_start > 0 {
        let t = tokens[subject_start - 1].as_str();
        if stops.contains(t) || verbs.contains(t) {
            break;
        }
        subject_start -= 1;
    }
    let mut object_start = verb_at + 1;
    while object_start < tokens.len() {
        let t = tokens[object_start].as_str();
        if !(verbs.contains(t) || PARTICLES.contains(&t)) {
            break;
        }
        object_start += 1;
    }
    if subject_start == verb_at || object_start == tokens.len() {
        return Vec::new();
    }
    vec![RawTriple::new(
        doc_id,
        sentence.index,
        tokens[subject_start..verb_at].join(" "),
        tokens[verb_at..object_start].join(" "),
        tokens[object_start..].join(" "),
    )]
}
