//! End-to-end TOD metrics: JGA, Inform, Success, BLEU and Combined.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::{placeholder, query_db, Database, DialogueState, ValueNormalizer};
use crate::error::{Error, Result};
use crate::jsonl::{self, JsonlLines};
use crate::text::tokenize;

pub const MAX_NGRAM: usize = 4;

/// One predicted (or gold) turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub dialogue_id: String,
    pub turn: usize,
    #[serde(rename = "state")]
    pub pred_state: DialogueState,
    #[serde(rename = "response")]
    pub delex_response: String,
}

/// Loads a prediction or gold JSONL file. `(dialogue_id, turn)` must be unique.
pub fn load_turns(path: &Path) -> Result<Vec<TurnPrediction>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in JsonlLines::open(path)? {
        let line = line?;
        let turn: TurnPrediction = serde_json::from_str(&line.text)
            .map_err(|e| Error::data(path, line.line, e.to_string()))?;
        if !seen.insert((turn.dialogue_id.clone(), turn.turn)) {
            return Err(Error::data(
                path,
                line.line,
                format!(
                    "duplicate turn {} of dialogue {:?}",
                    turn.turn, turn.dialogue_id
                ),
            ));
        }
        out.push(turn);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    #[serde(default)]
    pub constraints: BTreeMap<String, String>,
    #[serde(default)]
    pub requests: BTreeSet<String>,
}

/// dialogue id → domain → goal.
pub type GoalTable = BTreeMap<String, BTreeMap<String, DomainGoal>>;

/// Loads a goal table. With a schema, constraint slots of the domains it
/// defines must exist; domains it does not define are left alone.
pub fn load_goals(
    path: &Path,
    schema: Option<&crate::phase2::OntologySchema>,
) -> Result<GoalTable> {
    let goals: GoalTable = jsonl::read_json(path)?;
    if let Some(schema) = schema {
        for (dialogue, domains) in &goals {
            for (domain, goal) in domains
                .iter()
                .filter(|(d, _)| schema.domains.contains_key(*d))
            {
                if let Some(slot) = goal
                    .constraints
                    .keys()
                    .find(|s| !schema.has_slot(domain, s))
                {
                    return Err(Error::invalid(
                        "goal",
                        format!(
                            "{dialogue}: constraint slot {domain}.{slot} is not in the ontology"
                        ),
                    ));
                }
            }
        }
    }
    Ok(goals)
}

fn state_key(
    state: &DialogueState,
    norm: &ValueNormalizer<'_>,
) -> BTreeMap<(String, String), String> {
    norm.normalize_state(state)
}

/// Fraction of gold turns whose predicted state equals the gold state after
/// normalization. Gold turns without a prediction count as wrong.
pub fn jga(preds: &[TurnPrediction], golds: &[TurnPrediction], norm: &ValueNormalizer<'_>) -> f64 {
    if golds.is_empty() {
        return 0.0;
    }
    let by_key: HashMap<(&str, usize), &TurnPrediction> = preds
        .iter()
        .map(|p| ((p.dialogue_id.as_str(), p.turn), p))
        .collect();
    let correct = golds
        .iter()
        .filter(|g| {
            by_key
                .get(&(g.dialogue_id.as_str(), g.turn))
                .is_some_and(|p| state_key(&p.pred_state, norm) == state_key(&g.pred_state, norm))
        })
        .count();
    correct as f64 / golds.len() as f64
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 (×100) without smoothing.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_NGRAM {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_mean = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_NGRAM as f64;
    let brevity = if hyp_len <= ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * log_mean.exp())
}

pub fn combined(inform: f64, success: f64, bleu: f64) -> f64 {
    (inform + success) * 0.5 + bleu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueOutcome {
    pub dialogue_id: String,
    pub turns: usize,
    pub jga_correct: usize,
    pub informed: bool,
    pub success: bool,
}

/// dialogue id → (informed, successful).
pub type Verdicts = BTreeMap<String, (bool, bool)>;

/// Inform and Success percentages, plus the per-dialogue verdicts.
///
/// For each goal domain with constraints and a database table, the offered
/// entity is the first record returned by `query_db` under the final
/// predicted state, provided some predicted response contains
/// `[<domain>_name]`. The domain is informed when that entity satisfies every
/// goal constraint. A dialogue is informed
/// when all constrained domains are, and successful when it is informed and
/// every requested slot's placeholder appears in one of its responses.
/// Dialogues with no predicted turns fail both.
pub fn inform_success(
    dialogues: &BTreeMap<String, Vec<&TurnPrediction>>,
    goals: &GoalTable,
    db: &Database,
    norm: &ValueNormalizer<'_>,
) -> Result<(f64, f64, Verdicts)> {
    let mut verdicts = BTreeMap::new();
    for (dialogue_id, turns) in dialogues {
        let goal = goals
            .get(dialogue_id)
            .ok_or_else(|| Error::MissingGoal(dialogue_id.clone()))?;
        let mut turns = turns.clone();
        turns.sort_by_key(|t| t.turn);
        let Some(last) = turns.last() else {
            verdicts.insert(dialogue_id.clone(), (false, false));
            continue;
        };
        let final_state = &last.pred_state;
        let mut informed = true;
        for (domain, domain_goal) in goal {
            if domain_goal.constraints.is_empty() || !db.has_domain(domain) {
                continue;
            }
            let name_ph = placeholder(domain, "name");
            let offered = turns.iter().any(|t| t.delex_response.contains(&name_ph));
            let entity = if offered {
                query_db(db, final_state, domain, norm)?.into_iter().next()
            } else {
                None
            };
            let ok = entity.is_some_and(|r| {
                domain_goal.constraints.iter().all(|(slot, want)| {
                    r.get(slot).is_some_and(|have| {
                        norm.canonical(domain, slot, have) == norm.canonical(domain, slot, want)
                    })
                })
            });
            if !ok {
                informed = false;
                break;
            }
        }
        let success = informed
            && goal.iter().all(|(domain, domain_goal)| {
                domain_goal.requests.iter().all(|slot| {
                    let ph = placeholder(domain, slot);
                    turns.iter().any(|t| t.delex_response.contains(&ph))
                })
            });
        verdicts.insert(dialogue_id.clone(), (informed, success));
    }
    let n = verdicts.len().max(1) as f64;
    let inform = 100.0 * verdicts.values().filter(|v| v.0).count() as f64 / n;
    let success = 100.0 * verdicts.values().filter(|v| v.1).count() as f64 / n;
    Ok((inform, success, verdicts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub turns: usize,
    pub dialogues: usize,
    pub predicted_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub jga: f64,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    pub combined: f64,
    pub counts: EvalCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_dialogue: Vec<DialogueOutcome>,
}

/// Scores predictions against gold turns. Dialogues are the gold dialogues;
/// BLEU pairs every gold response with its predicted response (empty when
/// missing).
pub fn evaluate(
    preds: &[TurnPrediction],
    golds: &[TurnPrediction],
    goals: &GoalTable,
    db: &Database,
    norm: &ValueNormalizer<'_>,
) -> Result<EvalReport> {
    let by_key: HashMap<(&str, usize), &TurnPrediction> = preds
        .iter()
        .map(|p| ((p.dialogue_id.as_str(), p.turn), p))
        .collect();

    let mut dialogues: BTreeMap<String, Vec<&TurnPrediction>> = BTreeMap::new();
    let mut gold_turns: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut hyps = Vec::with_capacity(golds.len());
    let mut refs = Vec::with_capacity(golds.len());
    for gold in golds {
        let pred = by_key.get(&(gold.dialogue_id.as_str(), gold.turn)).copied();
        let entry = dialogues.entry(gold.dialogue_id.clone()).or_default();
        let counts = gold_turns.entry(&gold.dialogue_id).or_default();
        counts.0 += 1;
        if let Some(p) = pred {
            entry.push(p);
            if state_key(&p.pred_state, norm) == state_key(&gold.pred_state, norm) {
                counts.1 += 1;
            }
        }
        hyps.push(pred.map_or_else(Vec::new, |p| tokenize(&p.delex_response)));
        refs.push(tokenize(&gold.delex_response));
    }

    let jga = jga(preds, golds, norm);
    let bleu = if refs.is_empty() {
        0.0
    } else {
        bleu(&hyps, &refs)?
    };
    let (inform, success, verdicts) = inform_success(&dialogues, goals, db, norm)?;
    let per_dialogue = verdicts
        .into_iter()
        .map(|(dialogue_id, (informed, success))| {
            let (turns, jga_correct) = gold_turns[dialogue_id.as_str()];
            DialogueOutcome {
                dialogue_id,
                turns,
                jga_correct,
                informed,
                success,
            }
        })
        .collect();
    Ok(EvalReport {
        jga,
        inform,
        success,
        bleu,
        combined: combined(inform, success, bleu),
        counts: EvalCounts {
            turns: golds.len(),
            dialogues: gold_turns.len(),
            predicted_turns: preds.len(),
        },
        per_dialogue,
    })
}
