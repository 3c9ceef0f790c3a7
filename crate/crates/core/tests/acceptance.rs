//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Exits 1 when a criterion fails, except when the only failures are
//! measurements the host cannot support (parallel scaling on fewer than four
//! CPUs); those still print FAIL and are listed in the summary.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use ontoforge::dialogue::{
    delexicalize, parse_finetune, query_db, relexicalize, serialize_finetune, Database, DbRecord,
    DbState, DialogueState, FineTuneSample, ValueNormalizer,
};
use ontoforge::eval::{bleu, combined, evaluate, jga, load_goals, load_turns};
use ontoforge::filter::{filter_sentence_triples, StopwordList, Triple};
use ontoforge::phase2::{Dialogue, OntologySchema};
use ontoforge::sample::{parse_sample, serialize_content, SampleContent};
use ontoforge::seed::rng_from_seed;
use ontoforge::synth::{dialogues, phase1_corpus, toy_ontology, SyntheticCorpus};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const SWEEP_DOCS: usize = 10_000;

enum Verdict {
    Pass(String),
    Fail(String),
    /// Failed, but the host cannot run the measurement as specified.
    HostLimited(String),
}

struct Workspace {
    _dir: tempfile::TempDir,
    corpus: SyntheticCorpus,
    corpus_path: std::path::PathBuf,
    triples_path: std::path::PathBuf,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().expect("temp dir");
        let corpus = phase1_corpus(2024, SWEEP_DOCS);
        let corpus_path = dir.path().join("corpus.jsonl");
        let triples_path = dir.path().join("triples.jsonl");
        corpus
            .write(&corpus_path, &triples_path)
            .expect("write corpus");
        Workspace {
            _dir: dir,
            corpus,
            corpus_path,
            triples_path,
        }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.corpus_path.with_file_name(name)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cli(args: &[&str]) -> Result<(), String> {
    match ontoforge::cli::run(std::iter::once("ontoforge").chain(args.iter().copied())) {
        0 => Ok(()),
        code => Err(format!("ontoforge {} exited {code}", args.join(" "))),
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    if took < limit {
        Ok(())
    } else {
        Err(format!(
            "took {:.2}s, limit {}s",
            took.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------

fn combined_formula() -> Result<String, String> {
    let started = Instant::now();
    let rows = [
        ((89.40, 81.10, 18.60), 103.85),
        ((96.32, 89.86, 26.56), 119.65),
    ];
    let mut details = Vec::new();
    for ((i, su, b), want) in rows {
        let got = combined(i, su, b);
        if !close(got, want, 1e-9) {
            return Err(format!("combined({i}, {su}, {b}) = {got}, expected {want}"));
        }
        details.push(format!("{want}"));
    }
    within(Duration::from_secs(1), started)?;
    Ok(details.join(", "))
}

fn filter_oracle() -> Result<String, String> {
    let started = Instant::now();
    let stops = stopwords();
    let lib_stops = StopwordList::default_list();
    let mut gen = ChaCha8Rng::seed_from_u64(1000);
    let mut mismatches = 0;
    let mut checked = 0;
    let mut first = None;
    for list in 0..1000 {
        let raws = random_raw_list(&mut gen);
        for seed in 0..10u64 {
            let seed = seed * 7919 + list;
            let (got, _) = filter_sentence_triples(&raws, lib_stops, &mut rng_from_seed(seed));
            let want = ref_filter(&raws, &stops, &mut rng_from_seed(seed));
            let violations = filter_output_violations(&raws, &got, &stops);
            checked += 1;
            if got != want || !violations.is_empty() {
                mismatches += 1;
                first.get_or_insert(format!(
                    "list {list} seed {seed}: got {got:?}, oracle {want:?}"
                ));
            }
        }
    }
    within(Duration::from_secs(10), started)?;
    match first {
        None => Ok(format!("{checked} cases, 0 mismatches")),
        Some(f) => Err(format!("{mismatches} mismatches; first: {f}")),
    }
}

fn phase1_sweep_check(ws: &Workspace) -> Result<String, String> {
    let started = Instant::now();
    let out = ws.path("sweep.jsonl");
    cli(&[
        "build-phase1",
        "-q",
        "--seed",
        "9",
        "--corpus",
        s(&ws.corpus_path),
        "--triples",
        s(&ws.triples_path),
        "--out",
        s(&out),
    ])?;
    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let (n, violations) = phase1_sweep(&ws.corpus, &text);
    within(Duration::from_secs(60), started)?;
    if n == 0 {
        return Err("no samples produced".into());
    }
    match violations.first() {
        None => Ok(format!("{SWEEP_DOCS} documents, {n} samples, 0 violations")),
        Some(v) => Err(format!("{} violations; first: {v}", violations.len())),
    }
}

const WORDS: [&str; 12] = [
    "einstein", "ulm", "born", "river", "1879", "12:30", "o'brien", "museum", "city", "x",
    "7gawk763", "café",
];

fn random_component(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(1..=4))
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 10] = [
        "He was born in Ulm.",
        "[CTX]",
        "[NTG]",
        "[RES]",
        " | ",
        " :: ",
        "[MASK]",
        "a|b",
        "Fine!",
        "12:30",
    ];
    (0..rng.gen_range(1..6))
        .map(|_| *PIECES.choose(rng).unwrap())
        .collect::<String>()
        .trim()
        .to_string()
}

fn serialization_bijection() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let schema_text = toy_ontology().linearize();
    for i in 0..10_000 {
        let triples = (0..rng.gen_range(1..=6))
            .map(|_| {
                Triple::new(
                    random_component(&mut rng),
                    random_component(&mut rng),
                    random_component(&mut rng),
                )
            })
            .collect();
        let content =
            SampleContent::from_targets(triples, random_text(&mut rng), random_text(&mut rng));
        let pair = serialize_content(&content);
        match parse_sample(&pair) {
            Ok(parsed) if parsed == content && serialize_content(&parsed) == pair => {}
            Ok(_) => return Err(format!("sample {i} did not round-trip: {pair:?}")),
            Err(e) => return Err(format!("sample {i} failed to parse: {e}; {pair:?}")),
        }

        let mut state = DialogueState::new();
        for _ in 0..rng.gen_range(0..4) {
            let domain = ["restaurant", "hotel", "taxi"].choose(&mut rng).unwrap();
            let slot = ["area", "food", "leaveat", "stars"]
                .choose(&mut rng)
                .unwrap();
            let _ = state.insert(domain, slot, &random_component(&mut rng));
        }
        let db = DbState {
            buckets: state
                .domains()
                .into_iter()
                .map(|d| {
                    (
                        d.to_string(),
                        ontoforge::dialogue::db_bucket(rng.gen_range(0..5)),
                    )
                })
                .collect(),
        };
        let sample = FineTuneSample {
            history: random_text(&mut rng),
            schema_text: schema_text.clone(),
            state,
            db,
            delex_response: "[restaurant_name] is at [restaurant_address].".into(),
        };
        let pair = serialize_finetune(&sample);
        match parse_finetune(&pair) {
            Ok(parsed) if parsed == sample && serialize_finetune(&parsed) == pair => {}
            _ => return Err(format!("fine-tune sample {i} did not round-trip: {pair:?}")),
        }
    }
    Ok("10000 pretraining + 10000 fine-tune samples, 0 failures".into())
}

fn determinism(ws: &Workspace) -> Result<String, String> {
    let mut sizes = Vec::new();
    for (name, args) in [
        ("filter", vec!["filter", "--in", s(&ws.triples_path)]),
        (
            "build-phase1",
            vec![
                "build-phase1",
                "--corpus",
                s(&ws.corpus_path),
                "--triples",
                s(&ws.triples_path),
            ],
        ),
    ] {
        let mut outputs = Vec::new();
        for workers in ["1", "4"] {
            let out = ws.path(&format!("det-{name}-{workers}.jsonl"));
            let mut full = vec!["-q", "--seed", "31", "--workers", workers, "--out", s(&out)];
            full.extend(&args);
            cli(&full)?;
            outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{name}: outputs differ between 1 and 4 workers"));
        }
        sizes.push(format!("{name} {} bytes", outputs[0].len()));
    }
    Ok(format!(
        "identical at workers 1 and 4: {}",
        sizes.join(", ")
    ))
}

fn phase2_soundness() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ontology_path = fixture("ontology.json");
    let ontology: Value =
        serde_json::from_str(&fixture_text("ontology.json")).map_err(|e| e.to_string())?;
    if OntologySchema::load(&ontology_path).map_err(|e| e.to_string())? != toy_ontology() {
        return Err("fixture ontology differs from the generator's".into());
    }
    let ds = dialogues(500, 500, &toy_ontology());
    let input = dir.path().join("dialogues.jsonl");
    let lines: Vec<String> = ds
        .iter()
        .map(|d| serde_json::to_string(d).unwrap())
        .collect();
    std::fs::write(&input, lines.join("\n") + "\n").map_err(|e| e.to_string())?;
    let out = dir.path().join("p2.jsonl");
    cli(&[
        "build-phase2",
        "-q",
        "--dialogues",
        s(&input),
        "--ontology",
        s(&ontology_path),
        "--out",
        s(&out),
    ])?;
    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let (n, violations) = phase2_violations(&ds, &ontology, &text);
    if let Some(v) = violations.first() {
        return Err(format!("{} violations; first: {v}", violations.len()));
    }

    // values only the system mentions
    let out = dir.path().join("sys.jsonl");
    cli(&[
        "build-phase2",
        "-q",
        "--dialogues",
        s(&fixture("phase2_system_mentions.jsonl")),
        "--ontology",
        s(&ontology_path),
        "--out",
        s(&out),
    ])?;
    let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let expected: BTreeMap<String, Vec<[String; 3]>> =
        serde_json::from_str(&fixture_text("phase2_system_mentions.expected.json"))
            .map_err(|e| e.to_string())?;
    let mut got = BTreeMap::new();
    for line in text.lines().skip(1) {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let (_, _, full, _) = ref_parse_pair(
            v["source"].as_str().unwrap_or_default(),
            v["target"].as_str().unwrap_or_default(),
        )
        .ok_or("unparseable system-mention sample")?;
        got.insert(
            v["sample_id"].as_str().unwrap_or_default().to_string(),
            full,
        );
    }
    if got != expected {
        return Err(format!("system-mention fixture: got {got:?}"));
    }
    let sys: Vec<Dialogue> = fixture_text("phase2_system_mentions.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (_, violations) = phase2_violations(&sys, &ontology, &text);
    if let Some(v) = violations.first() {
        return Err(format!("system-mention fixture: {v}"));
    }
    Ok(format!(
        "500 dialogues, {n} samples, 0 unsupported triples; {} system-mention samples exact",
        got.len()
    ))
}

fn metric_oracles() -> Result<String, String> {
    let schema = OntologySchema::load(&fixture("ontology.json")).map_err(|e| e.to_string())?;
    let norm = ValueNormalizer::new(Some(&schema));
    let load = |name: &str| load_turns(&fixture(name)).map_err(|e| e.to_string());

    let j = jga(&load("jga/preds.jsonl")?, &load("jga/gold.jsonl")?, &norm);
    if j != 0.5 {
        return Err(format!("JGA = {j}, expected 0.5"));
    }

    let pairs = bleu_fixture_pairs();
    let (hyps, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let identical = bleu(&refs, &refs).map_err(|e| e.to_string())?;
    if !close(identical, 100.0, 1e-9) {
        return Err(format!("bleu(identical) = {identical}"));
    }
    let got = bleu(&hyps, &refs).map_err(|e| e.to_string())?;
    let oracle = ref_bleu(&pairs);
    if !close(got, oracle, 1e-6) || !close(got, BLEU_FIXTURE_EXPECTED, 1e-6) {
        return Err(format!(
            "bleu = {got}, brute force {oracle}, frozen {BLEU_FIXTURE_EXPECTED}"
        ));
    }

    let goals =
        load_goals(&fixture("inform8/goals.json"), Some(&schema)).map_err(|e| e.to_string())?;
    let db = Database::load(&fixture("inform8/db.json")).map_err(|e| e.to_string())?;
    let report = evaluate(
        &load("inform8/preds.jsonl")?,
        &load("inform8/gold.jsonl")?,
        &goals,
        &db,
        &norm,
    )
    .map_err(|e| e.to_string())?;
    if (report.inform, report.success) != (37.5, 25.0) {
        return Err(format!(
            "inform/success = ({}, {}), expected (37.5, 25.0)",
            report.inform, report.success
        ));
    }
    Ok(format!(
        "JGA 0.5, BLEU identical 100, fixture BLEU {got:.6}, inform/success (37.5, 25.0)"
    ))
}

fn delex_and_query() -> Result<String, String> {
    #[derive(serde::Deserialize)]
    struct Case {
        response: String,
        state: DialogueState,
        record: Option<DbRecord>,
        delex: String,
    }
    let cases: Vec<Case> = fixture_lines("delex_cases.jsonl")
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if cases.len() != 100 {
        return Err(format!("{} delex cases, expected 100", cases.len()));
    }
    for (i, c) in cases.iter().enumerate() {
        let delex = delexicalize(&c.response, &c.state, c.record.as_ref());
        if delex != c.delex {
            return Err(format!("case {i}: delex {delex:?}, expected {:?}", c.delex));
        }
        let relex = relexicalize(&delex, &c.state, c.record.as_ref())
            .map_err(|e| format!("case {i}: {e}"))?;
        if relex != c.response {
            return Err(format!(
                "case {i}: relex {relex:?}, expected {:?}",
                c.response
            ));
        }
    }

    const SLOTS: [(&str, &[&str]); 3] = [
        ("food", &["chinese", "indian", "thai", "italian"]),
        ("area", &["centre", "north", "south"]),
        ("pricerange", &["cheap", "moderate", "expensive"]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(616);
    let norm = ValueNormalizer::default();
    let constraints = |rng: &mut ChaCha8Rng| -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (slot, values) in SLOTS {
            if rng.gen_bool(0.5) {
                out.push((slot.to_string(), values.choose(rng).unwrap().to_string()));
            }
        }
        out
    };
    let state_of = |c: &[(String, String)]| {
        DialogueState::from_triples(
            c.iter()
                .map(|(s, v)| ("restaurant", s.as_str(), v.as_str())),
        )
        .unwrap()
    };
    for pair in 0..1000 {
        let records: Vec<BTreeMap<String, String>> = (0..rng.gen_range(0..40))
            .map(|i| {
                let mut r = BTreeMap::from([("name".to_string(), format!("place {i}"))]);
                for (slot, values) in SLOTS {
                    if rng.gen_bool(0.9) {
                        r.insert(
                            slot.to_string(),
                            values.choose(&mut rng).unwrap().to_string(),
                        );
                    }
                }
                r
            })
            .collect();
        let db = Database::from_json(serde_json::json!({ "restaurant": records }))
            .map_err(|e| e.to_string())?;
        let base = constraints(&mut rng);
        let names = |c: &[(String, String)]| -> Vec<String> {
            query_db(&db, &state_of(c), "restaurant", &norm)
                .unwrap()
                .iter()
                .map(|r| r.name().to_string())
                .collect()
        };
        let got = names(&base);
        let oracle: Vec<String> = ref_query(&records, &base)
            .iter()
            .map(|r| r["name"].clone())
            .collect();
        if got != oracle {
            return Err(format!(
                "pair {pair}: query {got:?}, linear scan {oracle:?}"
            ));
        }
        let mut extended = base.clone();
        if let Some(extra) = constraints(&mut rng)
            .into_iter()
            .find(|(s, _)| !base.iter().any(|(b, _)| b == s))
        {
            extended.push(extra);
        }
        let narrowed = names(&extended);
        if !narrowed.iter().all(|n| got.contains(n)) {
            return Err(format!("pair {pair}: adding a constraint grew the result"));
        }
        let oracle: Vec<String> = ref_query(&records, &extended)
            .iter()
            .map(|r| r["name"].clone())
            .collect();
        if narrowed != oracle {
            return Err(format!(
                "pair {pair}: extended query {narrowed:?}, linear scan {oracle:?}"
            ));
        }
    }
    Ok("100 delex/relex cases exact; 1000 (db, state) pairs anti-monotone and equal to linear scan".into())
}

fn throughput(ws: &Workspace) -> (Verdict, Verdict) {
    let bytes = std::fs::metadata(&ws.corpus_path)
        .map(|m| m.len())
        .unwrap_or(0) as f64;
    let time = |workers: &str| -> Result<f64, String> {
        let out = ws.path(&format!("tp-{workers}.jsonl"));
        let started = Instant::now();
        cli(&[
            "build-phase1",
            "-q",
            "--workers",
            workers,
            "--corpus",
            s(&ws.corpus_path),
            "--triples",
            s(&ws.triples_path),
            "--out",
            s(&out),
        ])?;
        Ok(started.elapsed().as_secs_f64())
    };
    let (t1, t4) = match (time("1"), time("4")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return (Verdict::Fail(e.clone()), Verdict::Fail(e)),
    };
    let mb_per_min = bytes / 1e6 / (t1 / 60.0);
    let single = format!(
        "{mb_per_min:.1} MB/min on {:.2} MB ({t1:.2}s), target >= 20",
        bytes / 1e6
    );
    let single = if mb_per_min >= 20.0 {
        Verdict::Pass(single)
    } else {
        Verdict::Fail(single)
    };
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let speedup = t1 / t4;
    let detail = format!("{speedup:.2}x at 4 workers ({t4:.2}s), target >= 2.5, host CPUs {cpus}");
    let scaling = if speedup >= 2.5 {
        Verdict::Pass(detail)
    } else if cpus < 4 {
        Verdict::HostLimited(detail)
    } else {
        Verdict::Fail(detail)
    };
    (single, scaling)
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Verdict, f64)> = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut() -> Result<String, String>| {
        let t = Instant::now();
        let verdict = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(d)) => Verdict::Pass(d),
            Ok(Err(d)) => Verdict::Fail(d),
            Err(_) => Verdict::Fail("panicked".into()),
        };
        report(name, &verdict, t.elapsed().as_secs_f64());
        results.push((name, verdict, t.elapsed().as_secs_f64()));
    };

    println!("acceptance: building the {SWEEP_DOCS}-document synthetic corpus");
    let ws = Workspace::new();

    record("combined formula", &mut combined_formula);
    record("triple filter oracle", &mut filter_oracle);
    record("phase-1 invariant sweep", &mut || phase1_sweep_check(&ws));
    record("serialization bijection", &mut serialization_bijection);
    record("determinism across workers", &mut || determinism(&ws));
    record("phase-2 soundness", &mut phase2_soundness);
    record("metric oracles", &mut metric_oracles);
    record("delex/relex and query_db", &mut delex_and_query);

    let t = Instant::now();
    let (single, scaling) = throughput(&ws);
    let took = t.elapsed().as_secs_f64();
    report("throughput single-threaded", &single, took);
    report("throughput scaling", &scaling, took);
    results.push(("throughput single-threaded", single, took));
    results.push(("throughput scaling", scaling, took));

    let passed = results
        .iter()
        .filter(|r| matches!(r.1, Verdict::Pass(_)))
        .count();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| matches!(r.1, Verdict::Fail(_)))
        .map(|r| r.0)
        .collect();
    let limited: Vec<&str> = results
        .iter()
        .filter(|r| matches!(r.1, Verdict::HostLimited(_)))
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {passed} passed, {} failed, {} failed on host limits [{}] in {:.1}s",
        failed.len(),
        limited.len(),
        limited.join(", "),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn report(name: &str, verdict: &Verdict, secs: f64) {
    match verdict {
        Verdict::Pass(d) => println!("PASS {name}: {d} [{secs:.2}s]"),
        Verdict::Fail(d) => println!("FAIL {name}: {d} [{secs:.2}s]"),
        Verdict::HostLimited(d) => {
            println!("FAIL {name}: {d} (host has fewer than 4 CPUs) [{secs:.2}s]")
        }
    }
}
