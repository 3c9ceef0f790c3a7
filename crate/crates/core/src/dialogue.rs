//! End-to-end TOD data model: dialogue state, database lookup, DB-state
//! buckets, delexicalization and the fine-tune sequence layout.
//!
//! ```text
//! source := "[CTX] " history " [ONT] " schema
//! target := "[BS]" (" " state)? " [DB] " buckets " [RES]" (" " response)?
//! state  := domain " :: " slot " :: " value ( " | " ... )*
//! buckets:= "db_0" when no domain is active, else (domain " " bucket)+
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Triple;
use crate::jsonl;
use crate::phase2::{check_component, render_context, OntologySchema};
use crate::sample::{parse_triples, SerializedPair, CTX, FIELD_SEP, ONT, RES, TRIPLE_SEP};
use crate::text::{is_word_char, normalize};

pub const BS: &str = "[BS]";
pub const DB: &str = "[DB]";

/// Domain-slot-value constraints, at most one value per (domain, slot).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<[String; 3]>", into = "Vec<[String; 3]>")]
pub struct DialogueState {
    slots: BTreeMap<(String, String), String>,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a triple. Re-adding an identical triple is a no-op; a second value
    /// for the same (domain, slot) is an error.
    pub fn insert(&mut self, domain: &str, slot: &str, value: &str) -> Result<()> {
        let (domain, slot, value) = (domain.trim(), slot.trim(), value.trim());
        check_component("state domain", domain)?;
        check_component("state slot", slot)?;
        check_component("state value", value)?;
        match self.slots.get(&(domain.to_string(), slot.to_string())) {
            Some(existing) if existing != value => Err(Error::invalid(
                "dialogue state",
                format!("{domain}.{slot} has two values: {existing:?} and {value:?}"),
            )),
            Some(_) => Ok(()),
            None => {
                self.slots
                    .insert((domain.to_string(), slot.to_string()), value.to_string());
                Ok(())
            }
        }
    }

    pub fn from_triples<'a>(
        triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    ) -> Result<Self> {
        let mut state = DialogueState::new();
        for (d, s, v) in triples {
            state.insert(d, s, v)?;
        }
        Ok(state)
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.slots
            .get(&(domain.to_string(), slot.to_string()))
            .map(String::as_str)
    }

    /// Triples sorted by (domain, slot).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.slots
            .iter()
            .map(|((d, s), v)| (d.as_str(), s.as_str(), v.as_str()))
    }

    /// Constraints of one domain.
    pub fn domain_constraints<'a>(
        &'a self,
        domain: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.iter()
            .filter(move |(d, _, _)| *d == domain)
            .map(|(_, s, v)| (s, v))
    }

    /// Domains with at least one constraint, sorted.
    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.slots.keys().map(|(d, _)| d.as_str()).collect();
        out.dedup();
        out
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn to_triples(&self) -> Vec<Triple> {
        self.iter().map(|(d, s, v)| Triple::new(d, s, v)).collect()
    }

    /// `domain :: slot :: value | ...`; empty for the empty state.
    pub fn linearize(&self) -> String {
        self.iter()
            .map(|(d, s, v)| format!("{d}{FIELD_SEP}{s}{FIELD_SEP}{v}"))
            .collect::<Vec<_>>()
            .join(TRIPLE_SEP)
    }
}

impl TryFrom<Vec<[String; 3]>> for DialogueState {
    type Error = Error;

    fn try_from(triples: Vec<[String; 3]>) -> Result<Self> {
        DialogueState::from_triples(
            triples
                .iter()
                .map(|[d, s, v]| (d.as_str(), s.as_str(), v.as_str())),
        )
    }
}

impl From<DialogueState> for Vec<[String; 3]> {
    fn from(state: DialogueState) -> Self {
        state
            .slots
            .into_iter()
            .map(|((d, s), v)| [d, s, v])
            .collect()
    }
}

/// Normalizes values for comparison, canonicalizing aliases when a schema is known.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValueNormalizer<'a> {
    schema: Option<&'a OntologySchema>,
}

impl<'a> ValueNormalizer<'a> {
    pub fn new(schema: Option<&'a OntologySchema>) -> Self {
        ValueNormalizer { schema }
    }

    pub fn canonical(&self, domain: &str, slot: &str, value: &str) -> String {
        self.schema
            .and_then(|s| s.canonicalize(domain, slot, value))
            .map_or_else(|| normalize(value), str::to_string)
    }

    /// The state with every value canonicalized.
    pub fn normalize_state(&self, state: &DialogueState) -> BTreeMap<(String, String), String> {
        state
            .iter()
            .map(|(d, s, v)| ((d.to_string(), s.to_string()), self.canonical(d, s, v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbRecord {
    pub domain: String,
    pub slots: BTreeMap<String, String>,
}

impl DbRecord {
    pub fn name(&self) -> &str {
        self.slots.get("name").map_or("", String::as_str)
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.slots.get(slot).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Database {
    domains: BTreeMap<String, Vec<DbRecord>>,
}

impl Database {
    /// Builds a database from `{domain: [{slot: value}]}`. String, number and
    /// boolean values are kept; nested values are ignored.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let serde_json::Value::Object(map) = value else {
            return Err(Error::invalid("database", "top level must be an object"));
        };
        let mut domains = BTreeMap::new();
        for (domain, records) in map {
            let domain = domain.trim().to_lowercase();
            let serde_json::Value::Array(records) = records else {
                return Err(Error::invalid(
                    "database",
                    format!("domain {domain:?} must map to a list"),
                ));
            };
            let mut out = Vec::with_capacity(records.len());
            let mut names = std::collections::HashSet::new();
            for (i, record) in records.into_iter().enumerate() {
                let serde_json::Value::Object(fields) = record else {
                    return Err(Error::invalid(
                        "database",
                        format!("{domain}[{i}] is not an object"),
                    ));
                };
                let mut slots = BTreeMap::new();
                for (slot, v) in fields {
                    let v = match v {
                        serde_json::Value::String(s) => s,
                        serde_json::Value::Number(n) => n.to_string(),
                        serde_json::Value::Bool(b) => b.to_string(),
                        _ => continue,
                    };
                    slots.insert(slot.trim().to_lowercase(), v);
                }
                let record = DbRecord {
                    domain: domain.clone(),
                    slots,
                };
                let name = normalize(record.name());
                if name.is_empty() {
                    return Err(Error::invalid(
                        "database",
                        format!("{domain}[{i}] has no name"),
                    ));
                }
                if !names.insert(name) {
                    return Err(Error::invalid(
                        "database",
                        format!("{domain}[{i}] repeats the name {:?}", record.name()),
                    ));
                }
                out.push(record);
            }
            domains.insert(domain, out);
        }
        Ok(Database { domains })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(jsonl::read_json(path)?)
    }

    pub fn records(&self, domain: &str) -> Option<&[DbRecord]> {
        self.domains.get(domain).map(Vec::as_slice)
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }

    pub fn domain_names(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }
}

/// Records of `domain` satisfying every state constraint on that domain, in
/// database order. A record lacking a constrained slot does not match.
pub fn query_db<'d>(
    db: &'d Database,
    state: &DialogueState,
    domain: &str,
    norm: &ValueNormalizer<'_>,
) -> Result<Vec<&'d DbRecord>> {
    let records = db
        .records(domain)
        .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    let constraints: Vec<(&str, String)> = state
        .domain_constraints(domain)
        .map(|(slot, value)| (slot, norm.canonical(domain, slot, value)))
        .collect();
    Ok(records
        .iter()
        .filter(|r| {
            constraints.iter().all(|(slot, want)| {
                r.get(slot)
                    .is_some_and(|have| norm.canonical(domain, slot, have) == *want)
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "db_0")]
    Db0,
    #[serde(rename = "db_1")]
    Db1,
    #[serde(rename = "db_2")]
    Db2,
    #[serde(rename = "db_3plus")]
    Db3Plus,
}

impl Bucket {
    pub fn token(self) -> &'static str {
        match self {
            Bucket::Db0 => "db_0",
            Bucket::Db1 => "db_1",
            Bucket::Db2 => "db_2",
            Bucket::Db3Plus => "db_3plus",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "db_0" => Ok(Bucket::Db0),
            "db_1" => Ok(Bucket::Db1),
            "db_2" => Ok(Bucket::Db2),
            "db_3plus" => Ok(Bucket::Db3Plus),
            other => Err(Error::invalid("DB bucket", other.to_string())),
        }
    }
}

pub fn db_bucket(count: usize) -> Bucket {
    match count {
        0 => Bucket::Db0,
        1 => Bucket::Db1,
        2 => Bucket::Db2,
        _ => Bucket::Db3Plus,
    }
}

/// Match-count buckets of every active domain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbState {
    pub buckets: BTreeMap<String, Bucket>,
}

impl DbState {
    /// Buckets for the domains of `state` that exist in the database; domains
    /// without a table (e.g. taxi) are left out.
    pub fn compute(db: &Database, state: &DialogueState, norm: &ValueNormalizer<'_>) -> Self {
        let buckets = state
            .domains()
            .into_iter()
            .filter(|d| db.has_domain(d))
            .map(|d| {
                let n = query_db(db, state, d, norm).map_or(0, |r| r.len());
                (d.to_string(), db_bucket(n))
            })
            .collect();
        DbState { buckets }
    }

    pub fn linearize(&self) -> String {
        if self.buckets.is_empty() {
            return Bucket::Db0.token().to_string();
        }
        self.buckets
            .iter()
            .map(|(d, b)| format!("{d} {b}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split(' ').collect();
        if tokens == [Bucket::Db0.token()] {
            return Ok(DbState::default());
        }
        if !tokens.len().is_multiple_of(2) {
            return Err(Error::invalid("DB state", format!("{text:?}")));
        }
        let mut buckets = BTreeMap::new();
        for pair in tokens.chunks(2) {
            buckets.insert(pair[0].to_string(), pair[1].parse()?);
        }
        Ok(DbState { buckets })
    }
}

/// Placeholder for `domain.slot`.
pub fn placeholder(domain: &str, slot: &str) -> String {
    format!("[{domain}_{slot}]")
}

/// Lowercased chars of `text` with their byte offsets.
fn folded(text: &str) -> Vec<(usize, char)> {
    text.char_indices()
        .map(|(i, c)| (i, c.to_lowercase().next().unwrap_or(c)))
        .collect()
}

/// Case-insensitive, word-bounded occurrences of `needle` in `hay` as
/// char-index ranges.
fn find_value(hay: &[(usize, char)], needle: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if needle.is_empty() || needle.len() > hay.len() {
        return out;
    }
    for start in 0..=hay.len() - needle.len() {
        let end = start + needle.len();
        if !hay[start..end].iter().zip(needle).all(|((_, a), b)| a == b) {
            continue;
        }
        let before = start.checked_sub(1).map(|i| hay[i].1);
        let after = hay.get(end).map(|x| x.1);
        if !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char) {
            out.push((start, end));
        }
    }
    out
}

/// Replaces state and record values in `response` with `[domain_slot]`
/// placeholders.
///
/// Values are processed longest first (ties by placeholder name); each claims
/// its case-insensitive, word-bounded occurrences from left to right, skipping
/// any that overlap an earlier claim.
pub fn delexicalize(response: &str, state: &DialogueState, record: Option<&DbRecord>) -> String {
    let mut values: Vec<(Vec<char>, String)> = Vec::new();
    let mut push = |value: &str, ph: String| {
        let chars: Vec<char> = value
            .trim()
            .chars()
            .map(|c| c.to_lowercase().next().unwrap_or(c))
            .collect();
        if !chars.is_empty() && !values.iter().any(|(v, _)| *v == chars) {
            values.push((chars, ph));
        }
    };
    if let Some(r) = record {
        for (slot, value) in &r.slots {
            push(value, placeholder(&r.domain, slot));
        }
    }
    for (d, s, v) in state.iter() {
        push(v, placeholder(d, s));
    }
    values.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));

    let hay = folded(response);
    let mut claimed = vec![false; hay.len()];
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    for (needle, ph) in &values {
        for (start, end) in find_value(&hay, needle) {
            if claimed[start..end].iter().any(|&c| c) {
                continue;
            }
            claimed[start..end].iter_mut().for_each(|c| *c = true);
            spans.push((start, end, ph));
        }
    }
    spans.sort_unstable_by_key(|s| s.0);

    let byte_at = |char_idx: usize| hay.get(char_idx).map_or(response.len(), |x| x.0);
    let mut out = String::with_capacity(response.len());
    let mut cursor = 0;
    for (start, end, ph) in spans {
        out.push_str(&response[cursor..byte_at(start)]);
        out.push_str(ph);
        cursor = byte_at(end);
    }
    out.push_str(&response[cursor..]);
    out
}

/// Placeholders in `text` as `(byte range, domain, slot)`.
pub fn placeholders(text: &str) -> Vec<(std::ops::Range<usize>, &str, &str)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(open) = text[from..].find('[').map(|i| i + from) {
        let Some(close) = text[open + 1..].find(['[', ']']).map(|i| i + open + 1) else {
            break;
        };
        if text.as_bytes()[close] == b'[' {
            from = close;
            continue;
        }
        let inner = &text[open + 1..close];
        if let Some((domain, slot)) = inner.split_once('_') {
            let valid = |s: &str| !s.is_empty() && s.chars().all(|c| is_word_char(c) || c == '-');
            if valid(domain) && valid(slot) {
                out.push((open..close + 1, domain, slot));
            }
        }
        from = close + 1;
    }
    out
}

/// Fills placeholders from the record first, then the state.
pub fn relexicalize(
    delex: &str,
    state: &DialogueState,
    record: Option<&DbRecord>,
) -> Result<String> {
    let mut out = String::with_capacity(delex.len());
    let mut cursor = 0;
    for (range, domain, slot) in placeholders(delex) {
        let value = record
            .filter(|r| r.domain == domain)
            .and_then(|r| r.get(slot))
            .or_else(|| state.get(domain, slot))
            .ok_or_else(|| Error::UnresolvedPlaceholder(delex[range.clone()].to_string()))?;
        out.push_str(&delex[cursor..range.start]);
        out.push_str(value);
        cursor = range.end;
    }
    out.push_str(&delex[cursor..]);
    Ok(out)
}

/// One turn of end-to-end training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FineTuneSample {
    pub history: String,
    pub schema_text: String,
    pub state: DialogueState,
    pub db: DbState,
    pub delex_response: String,
}

fn join_nonempty(parts: &[&str]) -> String {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn serialize_finetune(sample: &FineTuneSample) -> SerializedPair {
    SerializedPair {
        source_seq: format!("{CTX} {} {ONT} {}", sample.history, sample.schema_text),
        target_seq: join_nonempty(&[
            BS,
            &sample.state.linearize(),
            DB,
            &sample.db.linearize(),
            RES,
            &sample.delex_response,
        ]),
    }
}

fn seq_err(position: usize, message: impl Into<String>) -> Error {
    Error::SequenceParse {
        position,
        message: message.into(),
    }
}

/// Parses the target alone: the decode order is state, DB, response.
pub fn parse_finetune_target(target: &str) -> Result<(DialogueState, DbState, String)> {
    let rest = target
        .strip_prefix(BS)
        .ok_or_else(|| seq_err(0, format!("target must start with {BS:?}")))?;
    let db_marker = format!(" {DB} ");
    let db_at = rest
        .find(&db_marker)
        .ok_or_else(|| seq_err(BS.len(), format!("missing {DB}")))?;
    let state_text = &rest[..db_at];
    let state = if state_text.is_empty() {
        DialogueState::new()
    } else {
        let body = state_text
            .strip_prefix(' ')
            .ok_or_else(|| seq_err(BS.len(), "expected a space after [BS]"))?;
        let triples = parse_triples(body, BS.len() + 1)?;
        DialogueState::from_triples(
            triples
                .iter()
                .map(|[d, s, v]| (d.as_str(), s.as_str(), v.as_str())),
        )?
    };
    let after_db = &rest[db_at + db_marker.len()..];
    let res_marker = format!(" {RES}");
    let res_at = after_db
        .find(&res_marker)
        .ok_or_else(|| seq_err(target.len(), format!("missing {RES}")))?;
    let db = DbState::parse(&after_db[..res_at])?;
    let response = &after_db[res_at + res_marker.len()..];
    let response = match response.strip_prefix(' ') {
        Some(r) => r,
        None if response.is_empty() => "",
        None => {
            return Err(seq_err(
                target.len() - response.len(),
                "expected a space after [RES]",
            ))
        }
    };
    Ok((state, db, response.to_string()))
}

pub fn parse_finetune(pair: &SerializedPair) -> Result<FineTuneSample> {
    let source = &pair.source_seq;
    let body = source
        .strip_prefix(CTX)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| seq_err(0, format!("source must start with {CTX:?}")))?;
    let ont_marker = format!(" {ONT} ");
    let ont_at = body
        .rfind(&ont_marker)
        .ok_or_else(|| seq_err(CTX.len() + 1, format!("missing {ONT}")))?;
    let (state, db, delex_response) = parse_finetune_target(&pair.target_seq)?;
    Ok(FineTuneSample {
        history: body[..ont_at].to_string(),
        schema_text: body[ont_at + ont_marker.len()..].to_string(),
        state,
        db,
        delex_response,
    })
}

/// A turn with its annotated (cumulative) state, as used for fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedTurn {
    #[serde(default)]
    pub user: String,
    #[serde(default)]
    pub system: String,
    #[serde(default)]
    pub state: DialogueState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDialogue {
    pub dialogue_id: String,
    pub turns: Vec<AnnotatedTurn>,
}

/// The record a system response talks about: the first match (over active
/// domains in order) whose name occurs in the response.
pub fn offered_record<'d>(
    db: &'d Database,
    state: &DialogueState,
    response: &str,
    norm: &ValueNormalizer<'_>,
) -> Option<&'d DbRecord> {
    let hay = folded(response);
    state
        .domains()
        .into_iter()
        .filter(|d| db.has_domain(d))
        .flat_map(|d| query_db(db, state, d, norm).unwrap_or_default())
        .find(|r| {
            let name: Vec<char> = r
                .name()
                .chars()
                .map(|c| c.to_lowercase().next().unwrap_or(c))
                .collect();
            !find_value(&hay, &name).is_empty()
        })
}

/// Fine-tune samples for every turn of an annotated dialogue.
///
/// Responses are delexicalized against the turn state and the offered record:
/// the one named in the response, or else the last one named earlier.
pub fn finetune_samples(
    dialogue: &AnnotatedDialogue,
    schema: &OntologySchema,
    db: &Database,
    norm: &ValueNormalizer<'_>,
) -> Vec<FineTuneSample> {
    let schema_text = schema.linearize();
    let mut last_offered: Option<&DbRecord> = None;
    dialogue
        .turns
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            let history = render_context(
                dialogue.turns[..i]
                    .iter()
                    .map(|t| (t.user.as_str(), t.system.as_str())),
                &turn.user,
            );
            // a record offered earlier stays in focus while the state still admits it
            let record = offered_record(db, &turn.state, &turn.system, norm).or_else(|| {
                last_offered.filter(|r| {
                    query_db(db, &turn.state, &r.domain, norm)
                        .is_ok_and(|hits| hits.iter().any(|h| h == r))
                })
            });
            last_offered = record;
            FineTuneSample {
                history,
                schema_text: schema_text.clone(),
                state: turn.state.clone(),
                db: DbState::compute(db, &turn.state, norm),
                delex_response: delexicalize(turn.system.trim(), &turn.state, record),
            }
        })
        .collect()
}
