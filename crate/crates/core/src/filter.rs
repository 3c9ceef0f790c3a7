//! The four-step per-sentence triple filter.
//!
//! 1. strip stopwords from every component, dropping triples left with a blank component;
//! 2. drop triples with a component longer than four words;
//! 3. keep one triple, uniformly at random, per (subject, relation) pair;
//! 4. when more than two remain, keep two chosen uniformly at random.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RawTriple, TripleIndex};
use crate::error::{Error, Result};
use crate::pipeline::{for_each_ordered, DEFAULT_BATCH};
use crate::seed::{rng_from_seed, sentence_seed};
use crate::text::tokenize;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Maximum number of words in one triple component.
pub const MAX_COMPONENT_WORDS: usize = 4;

/// Maximum number of triples kept per sentence.
pub const MAX_TRIPLES_PER_SENTENCE: usize = 2;

/// A cleaned triple: (subject, relation, object) in phase 1, (domain, slot, value) in phase 2.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Triple {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }

    pub fn components(&self) -> [&str; 3] {
        [&self.subject, &self.relation, &self.object]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    words: HashSet<String>,
    version: String,
}

impl StopwordList {
    /// Parses a list file: one lowercase word per line, `#` comments, and a
    /// mandatory `# version: <tag>` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut words = HashSet::new();
        for line in text.lines().map(str::trim) {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("version:") {
                    version = Some(tag.trim().to_string());
                }
            } else if !line.is_empty() {
                words.insert(line.to_lowercase());
            }
        }
        let version =
            version.ok_or_else(|| Error::invalid("stopword list", "missing `# version:` line"))?;
        if words.is_empty() {
            return Err(Error::invalid("stopword list", "no words"));
        }
        Ok(StopwordList { words, version })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The shipped English list.
    pub fn default_list() -> &'static StopwordList {
        static LIST: OnceLock<StopwordList> = OnceLock::new();
        LIST.get_or_init(|| {
            StopwordList::parse(DEFAULT_STOPWORDS).expect("shipped stopword list is valid")
        })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Re-tokenizes a component and drops stopwords and tokens without any
/// alphanumeric character.
pub fn clean_component(raw: &str, stops: &StopwordList) -> String {
    tokenize(raw)
        .into_iter()
        .filter(|t| !stops.contains(t) && t.chars().any(char::is_alphanumeric))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Step 1 for a single triple; `None` when a component ends up blank.
pub fn strip_stopwords(raw: &RawTriple, stops: &StopwordList) -> Option<Triple> {
    let subject = clean_component(&raw.subject, stops);
    let relation = clean_component(&raw.relation, stops);
    let object = clean_component(&raw.object, stops);
    if subject.is_empty() || relation.is_empty() || object.is_empty() {
        return None;
    }
    Some(Triple {
        subject,
        relation,
        object,
    })
}

fn word_count(component: &str) -> usize {
    component.split(' ').count()
}

/// How many triples each filter step removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub blank: usize,
    pub too_long: usize,
    pub duplicate_pair: usize,
    pub over_limit: usize,
    pub kept: usize,
}

impl FilterStats {
    pub fn merge(&mut self, other: &FilterStats) {
        self.input += other.input;
        self.blank += other.blank;
        self.too_long += other.too_long;
        self.duplicate_pair += other.duplicate_pair;
        self.over_limit += other.over_limit;
        self.kept += other.kept;
    }
}

/// Applies the four filter steps to the raw triples of one sentence.
///
/// Random draws, in order: one `gen_range(0..n)` per (subject, relation) group
/// of size `n > 1`, groups taken in order of first appearance; then, when
/// `m > 2` triples survive, `i = gen_range(0..m)` and `j = gen_range(0..m-1)`
/// (shifted past `i`) pick the pair to keep. Survivors keep input order.
pub fn filter_sentence_triples<R: Rng + ?Sized>(
    raws: &[RawTriple],
    stops: &StopwordList,
    rng: &mut R,
) -> (Vec<Triple>, FilterStats) {
    let mut stats = FilterStats {
        input: raws.len(),
        ..FilterStats::default()
    };

    let mut candidates = Vec::with_capacity(raws.len());
    for raw in raws {
        match strip_stopwords(raw, stops) {
            None => stats.blank += 1,
            Some(t)
                if t.components()
                    .iter()
                    .any(|c| word_count(c) > MAX_COMPONENT_WORDS) =>
            {
                stats.too_long += 1
            }
            Some(t) => candidates.push(t),
        }
    }

    let mut groups: IndexMap<(&str, &str), Vec<usize>> = IndexMap::new();
    for (i, t) in candidates.iter().enumerate() {
        groups.entry((&t.subject, &t.relation)).or_default().push(i);
    }
    let mut survivors: Vec<usize> = groups
        .values()
        .map(|members| {
            if members.len() > 1 {
                members[rng.gen_range(0..members.len())]
            } else {
                members[0]
            }
        })
        .collect();
    survivors.sort_unstable();
    stats.duplicate_pair = candidates.len() - survivors.len();

    if survivors.len() > MAX_TRIPLES_PER_SENTENCE {
        let m = survivors.len();
        let i = rng.gen_range(0..m);
        let mut j = rng.gen_range(0..m - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (i.min(j), i.max(j));
        stats.over_limit = m - 2;
        survivors = vec![survivors[a], survivors[b]];
    }

    let mut slots: Vec<Option<Triple>> = candidates.into_iter().map(Some).collect();
    let kept: Vec<Triple> = survivors
        .into_iter()
        .map(|i| slots[i].take().expect("survivor indices are distinct"))
        .collect();
    stats.kept = kept.len();
    (kept, stats)
}

/// Wire form of a filtered triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredTripleRecord {
    pub doc_id: String,
    pub sent: usize,
    pub subj: String,
    pub rel: String,
    pub obj: String,
    pub stopwords_version: String,
}

impl FilteredTripleRecord {
    pub fn new(doc_id: &str, sent: usize, triple: Triple, stops: &StopwordList) -> Self {
        FilteredTripleRecord {
            doc_id: doc_id.to_string(),
            sent,
            subj: triple.subject,
            rel: triple.relation,
            obj: triple.object,
            stopwords_version: stops.version().to_string(),
        }
    }
}

/// Filters every sentence group of `index`, writing survivors as
/// [`FilteredTripleRecord`] lines in group order.
pub fn run_filter(
    index: &TripleIndex,
    stops: &StopwordList,
    seed: u64,
    workers: usize,
    out: &mut dyn Write,
) -> Result<FilterStats> {
    let mut stats = FilterStats::default();
    for_each_ordered(
        index.groups.iter().map(Ok),
        workers,
        DEFAULT_BATCH,
        |((doc_id, sent), raws)| {
            let mut rng = rng_from_seed(sentence_seed(seed, doc_id, *sent));
            let (kept, s) = filter_sentence_triples(raws, stops, &mut rng);
            let lines: Vec<String> = kept
                .into_iter()
                .map(|t| {
                    serde_json::to_string(&FilteredTripleRecord::new(doc_id, *sent, t, stops))
                        .expect("record serializes")
                })
                .collect();
            (lines, s)
        },
        |(lines, s)| {
            stats.merge(&s);
            for line in lines {
                writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
            }
            Ok(())
        },
    )?;
    Ok(stats)
}
