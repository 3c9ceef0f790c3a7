//! Phase-2 samples from task-oriented dialogues.
//!
//! Triples come from matching the ontology against the dialogue text only;
//! state annotations are never read, so matched triples include values the
//! user never constrained on and values only the system mentioned.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Triple;
use crate::jsonl::{self, JsonlLines};
use crate::pipeline::{for_each_ordered, DEFAULT_BATCH};
use crate::sample::{PretrainSample, SampleContent, SampleMeta, SampleRecord};
use crate::text::{is_word_char, normalize};

/// Aliases shorter than this (in characters) only match a whole token.
pub const SHORT_VALUE_CHARS: usize = 3;

pub const USER_TAG: &str = "[USR]";
pub const SYSTEM_TAG: &str = "[SYS]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueEntry {
    pub canonical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OntologySchema {
    pub domains: BTreeMap<String, BTreeMap<String, Vec<ValueEntry>>>,
}

/// Rejects names and values that would break the sequence grammar.
pub(crate) fn check_component(what: &'static str, s: &str) -> Result<()> {
    if s.trim().is_empty() {
        return Err(Error::invalid(what, "blank"));
    }
    if s.contains('|') || s.contains("::") || s.contains('[') || s.contains(']') {
        return Err(Error::invalid(
            what,
            format!("{s:?} contains a reserved character"),
        ));
    }
    Ok(())
}

impl OntologySchema {
    pub fn load(path: &Path) -> Result<Self> {
        let raw: OntologySchema = jsonl::read_json(path)?;
        raw.normalized()
    }

    /// Lowercases names, normalizes values and makes every alias list contain
    /// its canonical form.
    pub fn normalized(self) -> Result<Self> {
        let mut domains = BTreeMap::new();
        for (domain, slots) in self.domains {
            let domain = domain.trim().to_lowercase();
            check_component("domain name", &domain)?;
            let mut out_slots = BTreeMap::new();
            for (slot, values) in slots {
                let slot = slot.trim().to_lowercase();
                check_component("slot name", &slot)?;
                let mut entries = Vec::with_capacity(values.len());
                for entry in values {
                    let canonical = normalize(&entry.canonical);
                    check_component("value", &canonical)?;
                    let mut aliases = vec![canonical.clone()];
                    for alias in entry.aliases {
                        let alias = normalize(&alias);
                        check_component("alias", &alias)?;
                        if !aliases.contains(&alias) {
                            aliases.push(alias);
                        }
                    }
                    entries.push(ValueEntry { canonical, aliases });
                }
                if out_slots.insert(slot.clone(), entries).is_some() {
                    return Err(Error::invalid(
                        "ontology",
                        format!("duplicate slot {domain}.{slot}"),
                    ));
                }
            }
            if domains.insert(domain.clone(), out_slots).is_some() {
                return Err(Error::invalid(
                    "ontology",
                    format!("duplicate domain {domain}"),
                ));
            }
        }
        Ok(OntologySchema { domains })
    }

    pub fn has_slot(&self, domain: &str, slot: &str) -> bool {
        self.domains
            .get(domain)
            .is_some_and(|s| s.contains_key(slot))
    }

    /// Canonical value for `value` of `domain.slot`, if it is a known alias.
    pub fn canonicalize(&self, domain: &str, slot: &str, value: &str) -> Option<&str> {
        let value = normalize(value);
        self.domains
            .get(domain)?
            .get(slot)?
            .iter()
            .find(|e| e.aliases.contains(&value))
            .map(|e| e.canonical.as_str())
    }

    /// `"domain : slot1 slot2 | domain2 : ..."`, slots only.
    pub fn linearize(&self) -> String {
        self.domains
            .iter()
            .map(|(domain, slots)| {
                let names: Vec<&str> = slots.keys().map(String::as_str).collect();
                format!("{domain} : {}", names.join(" "))
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(default)]
    pub user: String,
    #[serde(default)]
    pub system: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

/// Speaker-tagged history: every utterance before the user utterance of
/// `turn_index`, followed by that utterance. Empty utterances are skipped.
pub fn render_context<'a>(
    turns: impl IntoIterator<Item = (&'a str, &'a str)>,
    current_user: &str,
) -> String {
    let mut parts = Vec::new();
    for (user, system) in turns {
        if !user.trim().is_empty() {
            parts.push(format!("{USER_TAG} {}", user.trim()));
        }
        if !system.trim().is_empty() {
            parts.push(format!("{SYSTEM_TAG} {}", system.trim()));
        }
    }
    if !current_user.trim().is_empty() {
        parts.push(format!("{USER_TAG} {}", current_user.trim()));
    }
    parts.join(" ")
}

/// True when `needle` occurs in `hay` at `start` with word boundaries on both
/// sides. Short needles must be whole space-delimited tokens.
pub fn is_boundary_match(hay: &str, start: usize, needle: &str) -> bool {
    let end = start + needle.len();
    if !hay.get(start..end).is_some_and(|s| s == needle) {
        return false;
    }
    let before = hay[..start].chars().next_back();
    let after = hay[end..].chars().next();
    if needle.chars().count() < SHORT_VALUE_CHARS {
        before.is_none_or(|c| c == ' ') && after.is_none_or(|c| c == ' ')
    } else {
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    }
}

/// Byte offsets of every boundary match of `needle` in `hay`, overlapping included.
fn boundary_matches(hay: &str, needle: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(found) = hay[from..].find(needle) {
        let start = from + found;
        if is_boundary_match(hay, start, needle) {
            out.push(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    out
}

/// Domain-slot-value triples whose aliases occur in `context`.
///
/// Within each slot, matches are chosen leftmost-longest without overlap and
/// the last chosen match gives the value. Output is sorted by (domain, slot).
pub fn match_ontology(context: &str, schema: &OntologySchema) -> Vec<Triple> {
    let text = normalize(context);
    let mut out = Vec::new();
    if text.is_empty() {
        return out;
    }
    for (domain, slots) in &schema.domains {
        for (slot, entries) in slots {
            let mut spans: Vec<(usize, usize, &str)> = Vec::new();
            for entry in entries {
                for alias in &entry.aliases {
                    for start in boundary_matches(&text, alias) {
                        spans.push((start, start + alias.len(), entry.canonical.as_str()));
                    }
                }
            }
            spans.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            let mut last: Option<&str> = None;
            let mut covered = 0;
            for (start, end, canonical) in spans {
                if last.is_none() || start >= covered {
                    last = Some(canonical);
                    covered = end;
                }
            }
            if let Some(value) = last {
                out.push(Triple::new(domain.clone(), slot.clone(), value));
            }
        }
    }
    out
}

/// Sample for turn `turn_index`: the ontology matched against the history up
/// to and including that user utterance, with the system reply as next text.
pub fn build_tod_sample(
    dialogue: &Dialogue,
    turn_index: usize,
    schema: &OntologySchema,
) -> Result<Option<PretrainSample>> {
    let turn = dialogue
        .turns
        .get(turn_index)
        .ok_or(Error::IndexOutOfRange {
            index: turn_index,
            len: dialogue.turns.len(),
        })?;
    let context = render_context(
        dialogue.turns[..turn_index]
            .iter()
            .map(|t| (t.user.as_str(), t.system.as_str())),
        &turn.user,
    );
    let triples = match_ontology(&context, schema);
    if triples.is_empty() {
        return Ok(None);
    }
    Ok(Some(PretrainSample {
        sample_id: format!("{}-t{turn_index}", dialogue.dialogue_id),
        content: SampleContent::from_targets(triples, context, turn.system.trim().to_string()),
        n_masked_sentences: 1,
        seed: 0,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase2Stats {
    pub dialogues: usize,
    pub turns: usize,
    pub samples: usize,
    pub skipped_bad_lines: usize,
    pub rejected_no_match: usize,
    pub triples_per_sample: BTreeMap<usize, usize>,
}

fn dialogue_lines(
    dialogue: &Dialogue,
    schema: &OntologySchema,
    seed: u64,
) -> (Vec<(String, usize)>, usize) {
    let mut lines = Vec::new();
    let mut rejected = 0;
    for turn in 0..dialogue.turns.len() {
        match build_tod_sample(dialogue, turn, schema).expect("turn index in range") {
            Some(mut sample) => {
                sample.seed = seed;
                let n = sample.content.target_triples.len();
                let meta = SampleMeta {
                    doc_id: dialogue.dialogue_id.clone(),
                    k: sample.n_masked_sentences,
                    n_triples: n,
                    seed: None,
                    dialogue_id: Some(dialogue.dialogue_id.clone()),
                    turn: Some(turn),
                };
                lines.push((SampleRecord::from_sample(&sample, meta).to_line(), n));
            }
            None => rejected += 1,
        }
    }
    (lines, rejected)
}

pub fn parse_dialogue(text: &str) -> Result<Dialogue, String> {
    let dialogue: Dialogue = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if dialogue.dialogue_id.trim().is_empty() {
        return Err("dialogue_id is blank".into());
    }
    if dialogue.turns.is_empty() {
        return Err(format!("dialogue {:?} has no turns", dialogue.dialogue_id));
    }
    Ok(dialogue)
}

/// Streams a dialogue JSONL file into phase-2 sample lines, in
/// (dialogue, turn) order.
pub fn run_phase2<R: BufRead>(
    lines: JsonlLines<R>,
    schema: &OntologySchema,
    seed: u64,
    workers: usize,
    skip_bad: bool,
    out: &mut dyn Write,
) -> Result<Phase2Stats> {
    let path = lines.path().to_path_buf();
    let mut stats = Phase2Stats::default();
    for_each_ordered(
        lines,
        workers,
        DEFAULT_BATCH,
        |line| {
            let parsed = parse_dialogue(&line.text)
                .map(|d| (d.turns.len(), dialogue_lines(&d, schema, seed)));
            (line.line, parsed)
        },
        |(line_no, parsed)| {
            let (turns, (lines, rejected)) = match parsed {
                Ok(v) => v,
                Err(_) if skip_bad => {
                    stats.skipped_bad_lines += 1;
                    return Ok(());
                }
                Err(message) => return Err(Error::data(&path, line_no, message)),
            };
            stats.dialogues += 1;
            stats.turns += turns;
            stats.rejected_no_match += rejected;
            for (line, n) in lines {
                stats.samples += 1;
                *stats.triples_per_sample.entry(n).or_default() += 1;
                writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
            }
            Ok(())
        },
    )?;
    Ok(stats)
}
