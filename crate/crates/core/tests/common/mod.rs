//! Independent reference implementations used by the integration tests and
//! the acceptance runner. Nothing here calls the library code it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use ontoforge::corpus::RawTriple;
use ontoforge::filter::Triple;
use rand::Rng;
use serde_json::Value;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Data lines of a fixture file, without `#` comments.
pub fn fixture_lines(name: &str) -> Vec<String> {
    fixture_text(name)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

// ---------------------------------------------------------------------------
// text

/// Stopwords read straight from the data file.
pub fn stopwords() -> HashSet<String> {
    let text =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/stopwords.txt"))
            .unwrap();
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Tokenizer written from the rule: lowercase, `. , ? ! : ; " ( )` split and
/// dropped unless a colon sits between two digits.
pub fn ref_tokenize(text: &str) -> Vec<String> {
    let lowered: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut spaced = String::new();
    for (i, &c) in lowered.iter().enumerate() {
        let digit_colon = c == ':'
            && i > 0
            && lowered[i - 1].is_ascii_digit()
            && lowered.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if ".,?!:;\"()".contains(c) && !digit_colon {
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ref_clean(component: &str, stops: &HashSet<String>) -> String {
    ref_tokenize(component)
        .into_iter()
        .filter(|t| !stops.contains(t) && t.chars().any(char::is_alphanumeric))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Step 1 for one triple; `None` when a component ends up blank.
pub fn ref_strip(raw: &RawTriple, stops: &HashSet<String>) -> Option<Triple> {
    let s = ref_clean(&raw.subject, stops);
    let r = ref_clean(&raw.relation, stops);
    let o = ref_clean(&raw.object, stops);
    if s.is_empty() || r.is_empty() || o.is_empty() {
        return None;
    }
    Some(Triple::new(s, r, o))
}

// ---------------------------------------------------------------------------
// triple filter

/// The four filter steps, brute force. Random draws follow the declared
/// protocol: one draw per duplicated (subject, relation) group in order of
/// first appearance, then an ordered pair of distinct indices.
pub fn ref_filter<R: Rng>(raws: &[RawTriple], stops: &HashSet<String>, rng: &mut R) -> Vec<Triple> {
    // steps 1 and 2
    let mut candidates: Vec<Triple> = Vec::new();
    for raw in raws {
        if let Some(t) = ref_strip(raw, stops) {
            let word_counts = [&t.subject, &t.relation, &t.object].map(|c| c.split(' ').count());
            if word_counts.iter().all(|&n| (1..=4).contains(&n)) {
                candidates.push(t);
            }
        }
    }
    // step 3: enumerate groups by scanning for each new pair all later members
    let mut assigned = vec![false; candidates.len()];
    let mut keep = vec![false; candidates.len()];
    for i in 0..candidates.len() {
        if assigned[i] {
            continue;
        }
        let members: Vec<usize> = (i..candidates.len())
            .filter(|&j| {
                candidates[j].subject == candidates[i].subject
                    && candidates[j].relation == candidates[i].relation
            })
            .collect();
        for &j in &members {
            assigned[j] = true;
        }
        let chosen = if members.len() > 1 {
            members[rng.gen_range(0..members.len())]
        } else {
            members[0]
        };
        keep[chosen] = true;
    }
    let survivors: Vec<usize> = (0..candidates.len()).filter(|&i| keep[i]).collect();
    // step 4: ordered pairs (a, b), a != b, in draw order
    let chosen: Vec<usize> = if survivors.len() > 2 {
        let m = survivors.len();
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        let a = rng.gen_range(0..m);
        let b = rng.gen_range(0..m - 1);
        let (a, b) = pairs[a * (m - 1) + b];
        let mut picked = vec![survivors[a], survivors[b]];
        picked.sort_unstable();
        picked
    } else {
        survivors
    };
    chosen.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Invariants every filter output must satisfy on its own.
pub fn filter_output_violations(
    raws: &[RawTriple],
    out: &[Triple],
    stops: &HashSet<String>,
) -> Vec<String> {
    let mut v = Vec::new();
    if out.len() > 2 {
        v.push(format!("{} triples", out.len()));
    }
    let pairs: HashSet<(&str, &str)> = out
        .iter()
        .map(|t| (t.subject.as_str(), t.relation.as_str()))
        .collect();
    if pairs.len() != out.len() {
        v.push("duplicate (subject, relation)".into());
    }
    let stripped: Vec<Triple> = raws.iter().filter_map(|r| ref_strip(r, stops)).collect();
    for t in out {
        v.extend(component_violations(t, stops));
        if !stripped.contains(t) {
            v.push(format!("invented triple {t:?}"));
        }
    }
    v
}

pub fn component_violations(t: &Triple, stops: &HashSet<String>) -> Vec<String> {
    let mut v = Vec::new();
    for c in [&t.subject, &t.relation, &t.object] {
        if c.trim().is_empty() {
            v.push(format!("blank component in {t:?}"));
            continue;
        }
        let words: Vec<&str> = c.split(' ').collect();
        if !(1..=4).contains(&words.len()) || words.iter().any(|w| w.is_empty()) {
            v.push(format!("component {c:?} has {} words", words.len()));
        }
        if let Some(w) = words.iter().find(|w| stops.contains(**w)) {
            v.push(format!("stopword {w:?} in {c:?}"));
        }
    }
    v
}

const WORDS: [&str; 24] = [
    "the", "a", "museum", "city", "river", "is", "was", "born", "in", "of", "einstein", "ulm",
    "built", "by", "old", "bridge", "large", "north", "festival", "held", "music", "summer", "and",
    "it",
];

fn random_component<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(0..=7);
    let mut words: Vec<String> = (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
        .collect();
    if rng.gen_bool(0.1) {
        words.push("!".into());
    }
    if rng.gen_bool(0.1) {
        if let Some(w) = words.first_mut() {
            *w = w.to_uppercase();
        }
    }
    words.join(" ")
}

/// Random raw triples for one sentence, biased towards repeated pairs.
pub fn random_raw_list<R: Rng>(rng: &mut R) -> Vec<RawTriple> {
    let n = rng.gen_range(0..=8);
    let mut out: Vec<RawTriple> = Vec::with_capacity(n);
    for _ in 0..n {
        let t = if !out.is_empty() && rng.gen_bool(0.3) {
            let prev = &out[rng.gen_range(0..out.len())];
            RawTriple::new(
                "doc",
                0,
                prev.subject.clone(),
                prev.relation.clone(),
                random_component(rng),
            )
        } else {
            RawTriple::new(
                "doc",
                0,
                random_component(rng),
                random_component(rng),
                random_component(rng),
            )
        };
        out.push(t);
    }
    out
}

// ---------------------------------------------------------------------------
// sample grammar

/// (masked triples, context, full triples, next text).
pub type ParsedPair = (Vec<[String; 3]>, String, Vec<[String; 3]>, String);

/// Splits a phase-1 source/target pair by hand.
pub fn ref_parse_pair(source: &str, target: &str) -> Option<ParsedPair> {
    let body = source.strip_prefix("[ONT] ")?.strip_suffix(" [NTG]")?;
    let ctx_at = body.find(" [CTX] ")?;
    let masked = split_triples(&body[..ctx_at])?;
    let context = body[ctx_at + 7..].to_string();
    let tbody = target.strip_prefix("[ONT] ")?;
    let res_at = tbody.find(" [RES] ")?;
    let full = split_triples(&tbody[..res_at])?;
    let next = tbody[res_at + 7..].to_string();
    Some((masked, context, full, next))
}

fn split_triples(text: &str) -> Option<Vec<[String; 3]>> {
    text.split(" | ")
        .map(|t| {
            let parts: Vec<&str> = t.split(" :: ").collect();
            (parts.len() == 3).then(|| {
                [
                    parts[0].to_string(),
                    parts[1].to_string(),
                    parts[2].to_string(),
                ]
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// phase 1 invariant checker

/// A corpus document read straight from its JSON line.
pub struct RawDoc {
    pub doc_id: String,
    /// Present for pre-segmented documents.
    pub sentences: Option<Vec<String>>,
    pub text: Option<String>,
}

pub fn raw_docs(lines: &[String]) -> BTreeMap<String, RawDoc> {
    lines
        .iter()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let doc = RawDoc {
                doc_id: v["doc_id"].as_str().unwrap().to_string(),
                sentences: v
                    .get("sentences")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().map(|s| s.as_str().unwrap().to_string()).collect()),
                text: v.get("text").and_then(Value::as_str).map(str::to_string),
            };
            (doc.doc_id.clone(), doc)
        })
        .collect()
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Checks one emitted phase-1 sample line against the raw inputs.
///
/// `sentences` gives the document's sentence texts (for free-text
/// documents the caller segments them); `raw_by_sentence` gives the raw
/// triples of each sentence index.
pub fn phase1_violations(
    record: &Value,
    doc: &RawDoc,
    sentences: &[String],
    raw_by_sentence: &BTreeMap<usize, Vec<RawTriple>>,
    stops: &HashSet<String>,
) -> Vec<String> {
    let mut v = Vec::new();
    let source = record["source"].as_str().unwrap_or_default();
    let target = record["target"].as_str().unwrap_or_default();
    let Some((masked, context, full, next)) = ref_parse_pair(source, target) else {
        return vec!["unparseable pair".into()];
    };
    let k = record["meta"]["k"].as_u64().unwrap_or(0) as usize;
    if !(1..=2).contains(&k) {
        v.push(format!("k = {k}"));
    }
    if sentences.len() < 3 {
        v.push("sample from a document with < 3 sentences".into());
        return v;
    }
    // reconstruction against the original text
    let original = match (&doc.sentences, &doc.text) {
        (Some(s), _) => s.join(" "),
        (None, Some(t)) => t.clone(),
        _ => String::new(),
    };
    if collapse(&format!("{context} {next}")) != collapse(&original) {
        v.push("context + next text != document".into());
    }
    let n_ctx = sentences.len() - k;
    if collapse(&sentences[..n_ctx].join(" ")) != collapse(&context) {
        v.push("context is not the leading sentences".into());
    }
    // alignment
    if masked.len() != full.len() || masked.is_empty() {
        v.push(format!("{} masked vs {} targets", masked.len(), full.len()));
    }
    for (m, f) in masked.iter().zip(&full) {
        if m[0] != f[0] || m[1] != f[1] || m[2] != "[MASK]" {
            v.push(format!("misaligned {m:?} / {f:?}"));
        }
    }
    if record["meta"]["n_triples"].as_u64() != Some(full.len() as u64) {
        v.push("meta.n_triples mismatch".into());
    }
    let triples: Vec<Triple> = full.iter().map(|[s, r, o]| Triple::new(s, r, o)).collect();
    for t in &triples {
        v.extend(component_violations(t, stops));
    }
    // per-sentence origin: the targets, in order, must split into runs of at
    // most two distinct-pair triples, each run drawn from one context sentence
    let candidate_sets: Vec<Vec<Triple>> = (0..n_ctx)
        .map(|i| {
            raw_by_sentence
                .get(&i)
                .map(|raws| raws.iter().filter_map(|r| ref_strip(r, stops)).collect())
                .unwrap_or_default()
        })
        .collect();
    if !assignable(&triples, &candidate_sets) {
        v.push("targets cannot be assigned to context sentences with <= 2 each".into());
    }
    v
}

/// DP over (sentence, target prefix): can the targets be cut into per-sentence
/// runs of length <= 2 with distinct pairs, each triple present in its sentence?
fn assignable(targets: &[Triple], sets: &[Vec<Triple>]) -> bool {
    let n = targets.len();
    let mut reach: BTreeSet<usize> = BTreeSet::from([0]);
    for set in sets {
        let mut next = BTreeSet::new();
        for &p in &reach {
            next.insert(p);
            if p < n && set.contains(&targets[p]) {
                next.insert(p + 1);
                if p + 1 < n
                    && set.contains(&targets[p + 1])
                    && (targets[p].subject != targets[p + 1].subject
                        || targets[p].relation != targets[p + 1].relation)
                {
                    next.insert(p + 2);
                }
            }
        }
        reach = next;
    }
    reach.contains(&n)
}

// ---------------------------------------------------------------------------
// phase 2 scanner

fn word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Does `alias` occur in `text` at word boundaries? Scans every start offset.
pub fn scan_alias(text: &str, alias: &str) -> bool {
    let short = alias.chars().count() < 3;
    text.char_indices().any(|(start, _)| {
        if !text[start..].starts_with(alias) {
            return false;
        }
        let before = text[..start].chars().last();
        let after = text[start + alias.len()..].chars().next();
        if short {
            before.is_none_or(|c| c == ' ') && after.is_none_or(|c| c == ' ')
        } else {
            !before.is_some_and(word_char) && !after.is_some_and(word_char)
        }
    })
}

/// Aliases (lowercased) of a canonical value, read from ontology JSON.
pub fn aliases_of(ontology: &Value, domain: &str, slot: &str, canonical: &str) -> Vec<String> {
    let entries = ontology["domains"][domain][slot]
        .as_array()
        .cloned()
        .unwrap_or_default();
    let mut out = Vec::new();
    for e in entries {
        let c = ref_tokenize(e["canonical"].as_str().unwrap_or_default()).join(" ");
        if c != canonical {
            continue;
        }
        out.push(c);
        for a in e["aliases"].as_array().cloned().unwrap_or_default() {
            out.push(ref_tokenize(a.as_str().unwrap_or_default()).join(" "));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// metrics

/// Corpus BLEU-4 by explicit n-gram enumeration (no hashing).
pub fn ref_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        c += hyp.len();
        r += reference.len();
        for n in 1..=4 {
            if hyp.len() < n {
                continue;
            }
            let hyp_grams: Vec<&[String]> = hyp.windows(n).collect();
            let ref_grams: Vec<&[String]> = if reference.len() >= n {
                reference.windows(n).collect()
            } else {
                vec![]
            };
            total[n - 1] += hyp_grams.len();
            let mut distinct: Vec<&[String]> = Vec::new();
            for g in &hyp_grams {
                if !distinct.contains(g) {
                    distinct.push(g);
                }
            }
            for g in distinct {
                let in_hyp = hyp_grams.iter().filter(|h| **h == g).count();
                let in_ref = ref_grams.iter().filter(|h| **h == g).count();
                matched[n - 1] += in_hyp.min(in_ref);
            }
        }
    }
    if matched.contains(&0) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// The value frozen from `fixtures/bleu_oracle.py` for `fixtures/bleu_pairs.tsv`.
pub const BLEU_FIXTURE_EXPECTED: f64 = 36.359_896_707_444_26;

pub fn bleu_fixture_pairs() -> Vec<(Vec<String>, Vec<String>)> {
    fixture_lines("bleu_pairs.tsv")
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (h, r) = l.split_once('\t').unwrap();
            (
                h.split(' ').map(str::to_string).collect(),
                r.split(' ').map(str::to_string).collect(),
            )
        })
        .collect()
}

/// Linear-scan database lookup: records whose every constrained slot equals
/// the (lowercased, trimmed) state value.
pub fn ref_query<'a>(
    records: &'a [BTreeMap<String, String>],
    constraints: &[(String, String)],
) -> Vec<&'a BTreeMap<String, String>> {
    let norm = |s: &str| ref_tokenize(s).join(" ");
    records
        .iter()
        .filter(|r| {
            constraints
                .iter()
                .all(|(slot, want)| r.get(slot).is_some_and(|have| norm(have) == norm(want)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// phase 1 sweep

/// Checks every sample line of a phase-1 output against the synthetic inputs.
/// Returns (samples checked, violations).
pub fn phase1_sweep(
    corpus: &ontoforge::synth::SyntheticCorpus,
    output: &str,
) -> (usize, Vec<String>) {
    let stops = stopwords();
    let docs = raw_docs(&corpus.document_lines);
    let mut raws: BTreeMap<&str, BTreeMap<usize, Vec<RawTriple>>> = BTreeMap::new();
    for t in &corpus.triples {
        raws.entry(t.doc_id.as_str())
            .or_default()
            .entry(t.sentence_index)
            .or_default()
            .push(t.clone());
    }
    let empty = BTreeMap::new();
    let mut seen = HashSet::new();
    let mut violations = Vec::new();
    let mut n = 0;
    for line in output
        .lines()
        .filter(|l| !ontoforge::jsonl::is_header_line(l))
    {
        n += 1;
        let record: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                violations.push(format!("bad line: {e}"));
                continue;
            }
        };
        let id = record["meta"]["doc_id"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        if !seen.insert(id.clone()) {
            violations.push(format!("{id}: duplicate sample"));
        }
        let Some(doc) = docs.get(&id) else {
            violations.push(format!("{id}: unknown document"));
            continue;
        };
        let sentences: Vec<String> = match &doc.sentences {
            Some(s) => s.clone(),
            None => ontoforge::corpus::segment_sentences(doc.text.as_deref().unwrap_or_default())
                .into_iter()
                .map(|s| s.text)
                .collect(),
        };
        let by_sentence = raws.get(id.as_str()).unwrap_or(&empty);
        for v in phase1_violations(&record, doc, &sentences, by_sentence, &stops) {
            violations.push(format!("{id}: {v}"));
        }
    }
    (n, violations)
}

/// Runs the command line in-process; panics on a nonzero exit.
pub fn run_cli(args: &[&str]) {
    let code = ontoforge::cli::run(std::iter::once("ontoforge").chain(args.iter().copied()));
    assert_eq!(code, 0, "ontoforge {}", args.join(" "));
}

// ---------------------------------------------------------------------------
// phase 2 soundness

/// History up to and including the user utterance of `turn`, rendered by hand.
pub fn ref_context(turns: &[ontoforge::phase2::Turn], turn: usize) -> String {
    let mut parts = Vec::new();
    for (i, t) in turns[..=turn].iter().enumerate() {
        if !t.user.trim().is_empty() {
            parts.push(format!("[USR] {}", t.user.trim()));
        }
        if i < turn && !t.system.trim().is_empty() {
            parts.push(format!("[SYS] {}", t.system.trim()));
        }
    }
    parts.join(" ")
}

/// (domain, slot, canonical) of every ontology value with an alias in `context`.
pub fn scan_all(context: &str, ontology: &Value) -> BTreeSet<(String, String, String)> {
    let text = ref_tokenize(context).join(" ");
    let mut found = BTreeSet::new();
    for (domain, slots) in ontology["domains"].as_object().unwrap() {
        for (slot, entries) in slots.as_object().unwrap() {
            for e in entries.as_array().unwrap() {
                let canonical = ref_tokenize(e["canonical"].as_str().unwrap()).join(" ");
                if aliases_of(ontology, domain, slot, &canonical)
                    .iter()
                    .any(|a| scan_alias(&text, a))
                {
                    found.insert((domain.to_lowercase(), slot.to_lowercase(), canonical));
                }
            }
        }
    }
    found
}

/// Checks phase-2 output against the dialogues: every emitted value occurs in
/// its context, every slot with an occurring value is emitted, and a turn has
/// a sample exactly when something occurs.
pub fn phase2_violations(
    dialogues: &[ontoforge::phase2::Dialogue],
    ontology: &Value,
    output: &str,
) -> (usize, Vec<String>) {
    let mut by_id: BTreeMap<String, Value> = BTreeMap::new();
    for line in output
        .lines()
        .filter(|l| !ontoforge::jsonl::is_header_line(l))
    {
        let v: Value = serde_json::from_str(line).unwrap();
        by_id.insert(v["sample_id"].as_str().unwrap().to_string(), v);
    }
    let n = by_id.len();
    let mut violations = Vec::new();
    for d in dialogues {
        for turn in 0..d.turns.len() {
            let id = format!("{}-t{turn}", d.dialogue_id);
            let context = ref_context(&d.turns, turn);
            let found = scan_all(&context, ontology);
            let Some(record) = by_id.remove(&id) else {
                if !found.is_empty() {
                    violations.push(format!("{id}: no sample but {found:?} occur"));
                }
                continue;
            };
            let source = record["source"].as_str().unwrap();
            let target = record["target"].as_str().unwrap();
            let Some((_, ctx, full, next)) = ref_parse_pair(source, target) else {
                violations.push(format!("{id}: unparseable"));
                continue;
            };
            if ctx != context {
                violations.push(format!("{id}: context {ctx:?}, expected {context:?}"));
            }
            if next != d.turns[turn].system.trim() {
                violations.push(format!("{id}: next text is not the system reply"));
            }
            let keys: Vec<(String, String)> = full
                .iter()
                .map(|[a, b, _]| (a.clone(), b.clone()))
                .collect();
            let mut sorted = keys.clone();
            sorted.sort();
            sorted.dedup();
            if sorted != keys {
                violations.push(format!("{id}: slots not sorted and unique"));
            }
            for [domain, slot, value] in &full {
                if !found.contains(&(domain.clone(), slot.clone(), value.clone())) {
                    violations.push(format!(
                        "{id}: {domain}.{slot}={value} does not occur in the context"
                    ));
                }
            }
            let found_slots: BTreeSet<(String, String)> = found
                .iter()
                .map(|(a, b, _)| (a.clone(), b.clone()))
                .collect();
            let emitted: BTreeSet<(String, String)> = keys.into_iter().collect();
            if found_slots != emitted {
                violations.push(format!(
                    "{id}: emitted slots {emitted:?}, occurring {found_slots:?}"
                ));
            }
        }
    }
    for id in by_id.keys() {
        violations.push(format!("{id}: sample for an unknown turn"));
    }
    (n, violations)
}
