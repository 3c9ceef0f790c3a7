//! Seeded synthetic corpora for tests, sweeps and throughput runs.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use crate::corpus::RawTriple;
use crate::error::{Error, Result};
use crate::phase2::{Dialogue, OntologySchema, Turn, ValueEntry};
use crate::seed::rng_from_seed;

const SUBJECTS: [&str; 16] = [
    "The museum",
    "Einstein",
    "The old bridge",
    "Berlin",
    "The river Cam",
    "Marie Curie",
    "The cathedral",
    "The festival",
    "A small village",
    "The national library",
    "The railway station",
    "Mozart",
    "The university",
    "The harbour",
    "The castle",
    "Ada Lovelace",
];
const RELATIONS: [&str; 12] = [
    "was born in",
    "is located in",
    "was founded in",
    "hosts",
    "opened in",
    "was built by",
    "lies near",
    "is known for",
    "was designed by",
    "serves",
    "borders",
    "contains",
];
const OBJECTS: [&str; 16] = [
    "Ulm",
    "the city centre",
    "1830",
    "a summer music festival",
    "the northern valley",
    "Vienna",
    "local craftsmen",
    "rare manuscripts",
    "the old town",
    "12:30",
    "fresh seafood",
    "the royal family",
    "the eastern coast",
    "Paris",
    "gothic towers",
    "the Baltic sea",
];
const FILLERS: [&str; 8] = [
    "It attracts many visitors every year.",
    "Historians still debate the exact details.",
    "Several restorations followed over the decades.",
    "The area is popular with students!",
    "Why it became so famous remains unclear?",
    "Records from that period are scarce.",
    "Local guides offer tours in summer.",
    "The surrounding streets are narrow and quiet.",
];

/// A synthetic phase-1 corpus: JSONL document lines and raw triples.
#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub document_lines: Vec<String>,
    pub triples: Vec<RawTriple>,
}

impl SyntheticCorpus {
    pub fn write(&self, corpus: &Path, triples: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(corpus).map_err(|e| Error::io(corpus, e))?,
        );
        for line in &self.document_lines {
            writeln!(f, "{line}").map_err(|e| Error::io(corpus, e))?;
        }
        f.flush().map_err(|e| Error::io(corpus, e))?;
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(triples).map_err(|e| Error::io(triples, e))?,
        );
        for t in &self.triples {
            writeln!(
                f,
                "{}",
                serde_json::to_string(t).expect("triple serializes")
            )
            .map_err(|e| Error::io(triples, e))?;
        }
        f.flush().map_err(|e| Error::io(triples, e))
    }
}

/// A noisy raw triple in the style of an OpenIE system: stopwords, long spans,
/// blank-after-cleaning components and repeated (subject, relation) pairs.
pub fn random_raw_triple<R: Rng + ?Sized>(
    rng: &mut R,
    doc_id: &str,
    sentence_index: usize,
) -> RawTriple {
    let pick = |rng: &mut R, xs: &[&str]| xs.choose(rng).copied().unwrap_or_default().to_string();
    let (subject, relation, object) = match rng.gen_range(0..10) {
        0 => ("it".to_string(), "is".to_string(), "the".to_string()),
        1 => (
            pick(rng, &SUBJECTS),
            pick(rng, &RELATIONS),
            "a very large and crowded annual summer music festival".to_string(),
        ),
        2 => (
            "they".to_string(),
            pick(rng, &RELATIONS),
            pick(rng, &OBJECTS),
        ),
        _ => (
            pick(rng, &SUBJECTS[..4]),
            pick(rng, &RELATIONS[..3]),
            pick(rng, &OBJECTS),
        ),
    };
    RawTriple {
        doc_id: doc_id.to_string(),
        sentence_index,
        subject,
        relation,
        object,
        confidence: Some(f64::from(rng.gen_range(0..=100u32)) / 100.0),
    }
}

/// `n_docs` documents of 1–10 sentences with 0–5 raw triples per sentence.
/// Half the documents are pre-segmented, half are raw text.
pub fn phase1_corpus(seed: u64, n_docs: usize) -> SyntheticCorpus {
    let mut rng = rng_from_seed(seed);
    let mut corpus = SyntheticCorpus::default();
    for d in 0..n_docs {
        let doc_id = format!("wiki-{d:06}");
        let n_sent = rng.gen_range(1..=10);
        let mut sentences = Vec::with_capacity(n_sent);
        for s in 0..n_sent {
            let text = if rng.gen_bool(0.7) {
                format!(
                    "{} {} {}.",
                    SUBJECTS.choose(&mut rng).unwrap(),
                    RELATIONS.choose(&mut rng).unwrap(),
                    OBJECTS.choose(&mut rng).unwrap()
                )
            } else {
                FILLERS.choose(&mut rng).unwrap().to_string()
            };
            sentences.push(text);
            for _ in 0..rng.gen_range(0..=5) {
                corpus.triples.push(random_raw_triple(&mut rng, &doc_id, s));
            }
        }
        let line = if rng.gen_bool(0.5) {
            json!({"doc_id": doc_id, "sentences": sentences})
        } else {
            json!({"doc_id": doc_id, "title": format!("Article {d}"), "text": sentences.join(" ")})
        };
        corpus.document_lines.push(line.to_string());
    }
    // triples for a document that does not exist
    corpus.triples.push(RawTriple::new(
        "missing-doc",
        0,
        "ghost",
        "haunts",
        "castle",
    ));
    corpus
}

fn entry(canonical: &str, aliases: &[&str]) -> ValueEntry {
    ValueEntry {
        canonical: canonical.to_string(),
        aliases: aliases.iter().map(|a| a.to_string()).collect(),
    }
}

/// A small restaurant/hotel ontology.
pub fn toy_ontology() -> OntologySchema {
    let mut schema = OntologySchema::default();
    let restaurant = schema.domains.entry("restaurant".into()).or_default();
    restaurant.insert(
        "food".into(),
        vec![
            entry("chinese", &[]),
            entry("indian", &[]),
            entry("italian", &[]),
            entry("modern european", &[]),
            entry("european", &[]),
        ],
    );
    restaurant.insert(
        "pricerange".into(),
        vec![
            entry("cheap", &["inexpensive"]),
            entry("moderate", &["moderately priced"]),
            entry("expensive", &[]),
        ],
    );
    restaurant.insert(
        "area".into(),
        vec![
            entry("centre", &["center", "city centre"]),
            entry("north", &[]),
            entry("south", &[]),
        ],
    );
    let hotel = schema.domains.entry("hotel".into()).or_default();
    hotel.insert(
        "stars".into(),
        vec![entry("3", &["three"]), entry("4", &["four"])],
    );
    hotel.insert(
        "area".into(),
        vec![
            entry("centre", &["center"]),
            entry("north", &[]),
            entry("east", &[]),
        ],
    );
    hotel.insert("parking".into(), vec![entry("yes", &["free parking"])]);
    schema.normalized().expect("toy ontology is valid")
}

const USER_TEMPLATES: [&str; 6] = [
    "I want {v} food please.",
    "Something in the {v} would be great.",
    "Can you find a {v} place?",
    "I need a hotel with {v} stars.",
    "Hi, I am looking for somewhere to eat.",
    "Thanks, that is all.",
];
const SYSTEM_TEMPLATES: [&str; 5] = [
    "How about {v}?",
    "There are several options in the {v}.",
    "Golden House is a nice place.",
    "What price range do you prefer?",
    "Goodbye!",
];

/// `n` dialogues of 1–6 turns whose utterances mention ontology values,
/// sometimes only on the system side, sometimes as aliases or near misses.
pub fn dialogues(seed: u64, n: usize, schema: &OntologySchema) -> Vec<Dialogue> {
    let mut rng = rng_from_seed(seed);
    let surface: Vec<&str> = schema
        .domains
        .values()
        .flat_map(|slots| slots.values())
        .flatten()
        .flat_map(|e| e.aliases.iter().map(String::as_str))
        .chain(["northampton", "cheapest", "4-star", "centreville"])
        .collect();
    (0..n)
        .map(|i| {
            let turns = (0..rng.gen_range(1..=6))
                .map(|_| {
                    let mut fill = |templates: &[&str]| {
                        let t = templates.choose(&mut rng).unwrap();
                        t.replace("{v}", surface.choose(&mut rng).unwrap())
                    };
                    let user = fill(&USER_TEMPLATES);
                    let system = fill(&SYSTEM_TEMPLATES);
                    Turn { user, system }
                })
                .collect();
            Dialogue {
                dialogue_id: format!("dlg-{i:05}"),
                turns,
            }
        })
        .collect()
}
