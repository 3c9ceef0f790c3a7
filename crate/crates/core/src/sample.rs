//! Pretraining samples and their flat source/target sequences.
//!
//! ```text
//! source := "[ONT] " masked ( " | " masked )* " [CTX] " context " [NTG]"
//! target := "[ONT] " full ( " | " full )* " [RES] " next_text
//! masked := subject " :: " relation " :: [MASK]"
//! full   := subject " :: " relation " :: " object
//! ```
//!
//! Phase-2 samples use the same layout with domain/slot/value in the triple
//! positions. Triple components never contain `" | "`, `" :: "` or an
//! uppercase marker, so the first `" [CTX] "` (source) and the first
//! `" [RES] "` (target) always delimit the ontology part and the texts may
//! contain anything.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Triple;

pub const ONT: &str = "[ONT]";
pub const CTX: &str = "[CTX]";
pub const NTG: &str = "[NTG]";
pub const RES: &str = "[RES]";
pub const MASK: &str = "[MASK]";
pub const FIELD_SEP: &str = " :: ";
pub const TRIPLE_SEP: &str = " | ";

/// A triple whose object has been replaced by the mask marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedTriple {
    pub subject: String,
    pub relation: String,
}

impl MaskedTriple {
    pub fn object(&self) -> &'static str {
        MASK
    }
}

impl From<&Triple> for MaskedTriple {
    fn from(t: &Triple) -> Self {
        MaskedTriple {
            subject: t.subject.clone(),
            relation: t.relation.clone(),
        }
    }
}

/// The four sequence-carried elements of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleContent {
    pub masked_ontology: Vec<MaskedTriple>,
    pub masked_context: String,
    pub target_triples: Vec<Triple>,
    pub target_next_text: String,
}

impl SampleContent {
    /// Masks every target object to build the aligned masked ontology.
    pub fn from_targets(
        target_triples: Vec<Triple>,
        masked_context: String,
        target_next_text: String,
    ) -> Self {
        SampleContent {
            masked_ontology: target_triples.iter().map(MaskedTriple::from).collect(),
            masked_context,
            target_triples,
            target_next_text,
        }
    }

    /// True when masked and target triples agree position by position.
    pub fn is_aligned(&self) -> bool {
        self.masked_ontology.len() == self.target_triples.len()
            && self
                .masked_ontology
                .iter()
                .zip(&self.target_triples)
                .all(|(m, t)| m.subject == t.subject && m.relation == t.relation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainSample {
    pub sample_id: String,
    pub content: SampleContent,
    /// Number of sentences (phase 1) or utterances (phase 2) in the next text.
    pub n_masked_sentences: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedPair {
    pub source_seq: String,
    pub target_seq: String,
}

pub fn serialize_content(content: &SampleContent) -> SerializedPair {
    let masked = content
        .masked_ontology
        .iter()
        .map(|m| format!("{}{FIELD_SEP}{}{FIELD_SEP}{MASK}", m.subject, m.relation))
        .collect::<Vec<_>>()
        .join(TRIPLE_SEP);
    let full = content
        .target_triples
        .iter()
        .map(|t| {
            format!(
                "{}{FIELD_SEP}{}{FIELD_SEP}{}",
                t.subject, t.relation, t.object
            )
        })
        .collect::<Vec<_>>()
        .join(TRIPLE_SEP);
    SerializedPair {
        source_seq: format!("{ONT} {masked} {CTX} {} {NTG}", content.masked_context),
        target_seq: format!("{ONT} {full} {RES} {}", content.target_next_text),
    }
}

pub fn serialize_sample(sample: &PretrainSample) -> SerializedPair {
    serialize_content(&sample.content)
}

fn parse_err(position: usize, message: impl Into<String>) -> Error {
    Error::SequenceParse {
        position,
        message: message.into(),
    }
}

/// Splits `"a :: b :: c | d :: e :: f"` starting at byte `offset` of the full sequence.
pub(crate) fn parse_triples(part: &str, offset: usize) -> Result<Vec<[String; 3]>> {
    if part.is_empty() {
        return Err(parse_err(offset, "empty triple list"));
    }
    let mut out = Vec::new();
    let mut pos = offset;
    for chunk in part.split(TRIPLE_SEP) {
        let fields: Vec<&str> = chunk.split(FIELD_SEP).collect();
        if fields.len() != 3 {
            return Err(parse_err(
                pos,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        if let Some(i) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(parse_err(pos, format!("field {i} is blank")));
        }
        out.push([
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2].to_string(),
        ]);
        pos += chunk.len() + TRIPLE_SEP.len();
    }
    Ok(out)
}

/// Inverse of [`serialize_content`].
pub fn parse_sample(pair: &SerializedPair) -> Result<SampleContent> {
    let source = &pair.source_seq;
    let body = source
        .strip_prefix(ONT)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| parse_err(0, format!("source must start with {ONT:?}")))?;
    let start = ONT.len() + 1;
    let ctx_marker = format!(" {CTX} ");
    let ctx_at = body
        .find(&ctx_marker)
        .ok_or_else(|| parse_err(start, format!("missing {CTX}")))?;
    let masked = parse_triples(&body[..ctx_at], start)?;
    let after_ctx = &body[ctx_at + ctx_marker.len()..];
    let ntg_suffix = format!(" {NTG}");
    let masked_context = after_ctx
        .strip_suffix(&ntg_suffix)
        .ok_or_else(|| parse_err(source.len(), format!("source must end with {NTG:?}")))?
        .to_string();

    let masked_ontology = masked
        .into_iter()
        .map(|[subject, relation, object]| {
            if object == MASK {
                Ok(MaskedTriple { subject, relation })
            } else {
                Err(parse_err(
                    start,
                    format!("masked object {object:?} is not {MASK}"),
                ))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let target = &pair.target_seq;
    let body = target
        .strip_prefix(ONT)
        .and_then(|s| s.strip_prefix(' '))
        .ok_or_else(|| parse_err(0, format!("target must start with {ONT:?}")))?;
    let res_marker = format!(" {RES} ");
    let res_at = body
        .find(&res_marker)
        .ok_or_else(|| parse_err(start, format!("missing {RES}")))?;
    let target_triples: Vec<Triple> = parse_triples(&body[..res_at], start)?
        .into_iter()
        .map(|[s, r, o]| Triple::new(s, r, o))
        .collect();
    let target_next_text = body[res_at + res_marker.len()..].to_string();

    let content = SampleContent {
        masked_ontology,
        masked_context,
        target_triples,
        target_next_text,
    };
    if !content.is_aligned() {
        return Err(parse_err(
            start,
            "source and target triples are not aligned",
        ));
    }
    Ok(content)
}

/// Optional provenance carried by a sample record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub doc_id: String,
    pub k: usize,
    pub n_triples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn: Option<usize>,
}

/// One line of a sample JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub source: String,
    pub target: String,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn from_sample(sample: &PretrainSample, meta: SampleMeta) -> Self {
        let pair = serialize_sample(sample);
        SampleRecord {
            sample_id: sample.sample_id.clone(),
            source: pair.source_seq,
            target: pair.target_seq,
            meta,
        }
    }

    pub fn pair(&self) -> SerializedPair {
        SerializedPair {
            source_seq: self.source.clone(),
            target_seq: self.target.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("sample record serializes")
    }
}
