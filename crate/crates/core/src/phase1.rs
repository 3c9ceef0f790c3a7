//! Phase-1 samples from contextual text: object-value mask plus next-text mask.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    naive_extract, CorpusUnits, Document, RawTriple, RawUnit, Sentence, TripleIndex,
};
use crate::error::{Error, Result};
use crate::filter::{filter_sentence_triples, FilterStats, StopwordList, Triple};
use crate::pipeline::{for_each_ordered, DEFAULT_BATCH};
use crate::sample::{PretrainSample, SampleContent, SampleMeta, SampleRecord};
use crate::seed::{document_seed, rng_from_seed, sentence_seed};

/// Documents shorter than this are skipped so the context is never empty.
pub const MIN_SENTENCES: usize = 3;

/// Sentences past this cap are dropped before sampling.
pub const DEFAULT_MAX_SENTENCES: usize = 40;

/// Splits off the last one or two sentences (50/50) as the next text.
pub fn split_next_text<'d, R: Rng + ?Sized>(
    doc: &'d Document,
    rng: &mut R,
) -> Result<(&'d [Sentence], &'d [Sentence])> {
    let n = doc.sentences.len();
    if n < MIN_SENTENCES {
        return Err(Error::TooShortDocument {
            doc_id: doc.doc_id.clone(),
            sentences: n,
        });
    }
    let k = rng.gen_range(1..=2);
    Ok(doc.sentences.split_at(n - k))
}

fn join_text(sentences: &[Sentence]) -> String {
    sentences
        .iter()
        .map(|s| s.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Builds the sample of one document.
///
/// `triples[i]` holds the filtered triples of sentence `i` (missing entries
/// mean none). Only triples of context sentences are kept; the document is
/// rejected (`Ok(None)`) when the context has none.
pub fn build_sample(
    doc: &Document,
    triples: &[Vec<Triple>],
    seed: u64,
) -> Result<Option<PretrainSample>> {
    let mut rng = rng_from_seed(seed);
    let (context, next_text) = split_next_text(doc, &mut rng)?;
    let targets: Vec<Triple> = context
        .iter()
        .filter_map(|s| triples.get(s.index))
        .flatten()
        .cloned()
        .collect();
    if targets.is_empty() {
        return Ok(None);
    }
    Ok(Some(PretrainSample {
        sample_id: doc.doc_id.clone(),
        content: SampleContent::from_targets(targets, join_text(context), join_text(next_text)),
        n_masked_sentences: next_text.len(),
        seed,
    }))
}

/// Where the raw triples of a sentence come from.
#[derive(Clone, Copy)]
pub enum TripleSource<'a> {
    Index(&'a TripleIndex),
    /// Run the fallback pattern extractor on every sentence.
    Naive,
}

impl TripleSource<'_> {
    fn raw_triples(&self, doc_id: &str, sentence: &Sentence) -> Vec<RawTriple> {
        match self {
            TripleSource::Index(index) => index.get(doc_id, sentence.index).to_vec(),
            TripleSource::Naive => naive_extract(doc_id, sentence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase1Config {
    pub seed: u64,
    pub epoch: u32,
    pub max_sentences: usize,
    pub workers: usize,
    pub batch_size: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            seed: 0,
            epoch: 0,
            max_sentences: DEFAULT_MAX_SENTENCES,
            workers: 1,
            batch_size: DEFAULT_BATCH,
        }
    }
}

/// Counters reported by a phase-1 run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase1Stats {
    pub documents: usize,
    pub samples: usize,
    pub skipped_bad_lines: usize,
    pub rejected_too_short: usize,
    pub rejected_no_context_triples: usize,
    /// Raw triples whose sentence is absent from the corpus (or past the cap).
    pub orphan_triples: usize,
    pub filter: FilterStats,
    /// Triples per sample → number of samples.
    pub triples_per_sample: BTreeMap<usize, usize>,
    /// Words per triple component → number of components.
    pub component_words: BTreeMap<usize, usize>,
}

impl Phase1Stats {
    pub fn merge(&mut self, other: &Phase1Stats) {
        self.documents += other.documents;
        self.samples += other.samples;
        self.skipped_bad_lines += other.skipped_bad_lines;
        self.rejected_too_short += other.rejected_too_short;
        self.rejected_no_context_triples += other.rejected_no_context_triples;
        self.orphan_triples += other.orphan_triples;
        self.filter.merge(&other.filter);
        for (k, v) in &other.triples_per_sample {
            *self.triples_per_sample.entry(*k).or_default() += v;
        }
        for (k, v) in &other.component_words {
            *self.component_words.entry(*k).or_default() += v;
        }
    }
}

enum Outcome {
    Sample { line: String, triples: Vec<Triple> },
    TooShort,
    NoContextTriples,
}

struct UnitResult {
    line: usize,
    parsed: Result<(String, Outcome), String>,
    filter: FilterStats,
    consumed_triples: usize,
}

/// Filters the raw triples of every sentence of `doc`.
pub fn filter_document(
    doc: &Document,
    source: TripleSource<'_>,
    stops: &StopwordList,
    seed: u64,
) -> (Vec<Vec<Triple>>, FilterStats, usize) {
    let mut stats = FilterStats::default();
    let mut consumed = 0;
    let per_sentence = doc
        .sentences
        .iter()
        .map(|sentence| {
            let raws = source.raw_triples(&doc.doc_id, sentence);
            consumed += raws.len();
            let mut rng = rng_from_seed(sentence_seed(seed, &doc.doc_id, sentence.index));
            let (kept, s) = filter_sentence_triples(&raws, stops, &mut rng);
            stats.merge(&s);
            kept
        })
        .collect();
    (per_sentence, stats, consumed)
}

fn process_unit(
    unit: RawUnit,
    format: crate::corpus::CorpusFormat,
    source: TripleSource<'_>,
    stops: &StopwordList,
    config: &Phase1Config,
) -> UnitResult {
    let mut doc = match unit.parse(format) {
        Ok(doc) => doc,
        Err(message) => {
            return UnitResult {
                line: unit.line,
                parsed: Err(message),
                filter: FilterStats::default(),
                consumed_triples: 0,
            }
        }
    };
    doc.truncate(config.max_sentences);
    let (triples, filter, consumed_triples) = filter_document(&doc, source, stops, config.seed);
    let seed = document_seed(config.seed, &doc.doc_id, config.epoch);
    let outcome = match build_sample(&doc, &triples, seed) {
        Err(_) => Outcome::TooShort,
        Ok(None) => Outcome::NoContextTriples,
        Ok(Some(mut sample)) => {
            if config.epoch > 0 {
                sample.sample_id = format!("{}#e{}", sample.sample_id, config.epoch);
            }
            let meta = SampleMeta {
                doc_id: doc.doc_id.clone(),
                k: sample.n_masked_sentences,
                n_triples: sample.content.target_triples.len(),
                seed: Some(seed),
                dialogue_id: None,
                turn: None,
            };
            Outcome::Sample {
                line: SampleRecord::from_sample(&sample, meta).to_line(),
                triples: sample.content.target_triples,
            }
        }
    };
    UnitResult {
        line: unit.line,
        parsed: Ok((doc.doc_id, outcome)),
        filter,
        consumed_triples,
    }
}

/// Streams a corpus through filtering and sampling, writing one JSONL line per
/// sample to `out` in corpus order.
pub fn run_phase1(
    units: CorpusUnits,
    source: TripleSource<'_>,
    stops: &StopwordList,
    config: &Phase1Config,
    skip_bad: bool,
    out: &mut dyn Write,
) -> Result<Phase1Stats> {
    let format = units.format();
    let path = units.path().to_path_buf();
    let mut stats = Phase1Stats::default();
    let mut seen = std::collections::HashSet::new();
    let mut consumed = 0usize;
    for_each_ordered(
        units,
        config.workers,
        config.batch_size,
        |unit| process_unit(unit, format, source, stops, config),
        |result| {
            let (doc_id, outcome) = match result.parsed {
                Ok(parsed) => parsed,
                Err(_) if skip_bad => {
                    stats.skipped_bad_lines += 1;
                    return Ok(());
                }
                Err(message) => return Err(Error::data(&path, result.line, message)),
            };
            if !seen.insert(doc_id.clone()) {
                if skip_bad {
                    stats.skipped_bad_lines += 1;
                    return Ok(());
                }
                return Err(Error::data(
                    &path,
                    result.line,
                    format!("duplicate doc_id {doc_id:?}"),
                ));
            }
            stats.documents += 1;
            stats.filter.merge(&result.filter);
            consumed += result.consumed_triples;
            match outcome {
                Outcome::Sample { line, triples } => {
                    stats.samples += 1;
                    *stats.triples_per_sample.entry(triples.len()).or_default() += 1;
                    for t in &triples {
                        for c in t.components() {
                            *stats
                                .component_words
                                .entry(c.split(' ').count())
                                .or_default() += 1;
                        }
                    }
                    writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
                }
                Outcome::TooShort => stats.rejected_too_short += 1,
                Outcome::NoContextTriples => stats.rejected_no_context_triples += 1,
            }
            Ok(())
        },
    )?;
    if let TripleSource::Index(index) = source {
        stats.orphan_triples = index.len().saturating_sub(consumed);
    }
    Ok(stats)
}
