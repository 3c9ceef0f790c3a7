//! The `ontoforge` command line.
//!
//! Every subcommand streams JSONL in and JSONL (or one JSON report) out. The
//! first line of every output file is a [`Header`]. Exit codes: 0 on success,
//! 1 for usage and configuration errors, 2 for malformed input data.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{load_triples, naive_extract, CorpusFormat, CorpusUnits, TripleIndex};
use crate::dialogue::{
    delexicalize, finetune_samples, offered_record, query_db, relexicalize, serialize_finetune,
    AnnotatedDialogue, Database, DbRecord, DbState, DialogueState, ValueNormalizer,
};
use crate::error::Error;
use crate::eval::{evaluate, load_goals, load_turns, EvalReport, TurnPrediction};
use crate::filter::{run_filter, StopwordList};
use crate::jsonl::{Header, JsonlLines};
use crate::phase1::{run_phase1, Phase1Config, Phase1Stats, TripleSource, DEFAULT_MAX_SENTENCES};
use crate::phase2::{run_phase2, OntologySchema};
use crate::pipeline::{for_each_ordered, DEFAULT_BATCH};
use crate::sample::{parse_sample, SampleMeta, SampleRecord};

pub const SEED_ENV: &str = "ONTOFORGE_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "ontoforge",
    version,
    about = "Ontology-aware TOD pretraining data forge and evaluator"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON run configuration; flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed (falls back to $ONTOFORGE_SEED, then 0)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Output file (default: stdout)
    #[arg(long, short, global = true, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Count and skip malformed input records instead of failing
    #[arg(long, global = true)]
    skip_bad: bool,
    /// Stopword list file (default: the bundled list)
    #[arg(long, global = true, value_name = "FILE")]
    stopwords: Option<PathBuf>,
    /// Fail when an input header names a different stopword list version
    #[arg(long, global = true)]
    check_stopwords: bool,
    /// No summary on stderr
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract raw triples from a corpus with the built-in pattern extractor
    Extract {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long)]
        max_docs: Option<usize>,
    },
    /// Apply the per-sentence triple filter to a raw triple file
    Filter {
        #[arg(long = "in", alias = "triples", value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Build phase-1 samples from a corpus and its raw triples
    BuildPhase1 {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Raw triples; the built-in extractor is used when absent
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long)]
        max_docs: Option<usize>,
        #[arg(long)]
        max_sentences: Option<usize>,
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Build phase-2 samples from unannotated dialogues and an ontology
    BuildPhase2 {
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
    },
    /// Build fine-tune samples from state-annotated dialogues
    BuildFinetune {
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        /// Also write the gold turns in prediction format
        #[arg(long, value_name = "FILE")]
        gold_out: Option<PathBuf>,
    },
    /// Delexicalize (or with --relex, relexicalize) responses
    Delex {
        #[arg(long = "in", value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        relex: bool,
    },
    /// Query the database with a dialogue state
    DbQuery {
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        /// State as JSON, e.g. '[["restaurant","food","chinese"]]'
        #[arg(long, conflicts_with = "input")]
        state: Option<String>,
        /// JSONL file of objects with a "state" field
        #[arg(long = "in", value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
    },
    /// Score predictions: JGA, Inform, Success, BLEU and Combined
    Evaluate {
        #[arg(long)]
        preds: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        goals: Option<PathBuf>,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        per_dialogue: bool,
    },
    /// Sample counts, rejection counts and triple-length histograms
    Stats {
        /// Summarize an existing sample file
        #[arg(long, value_name = "FILE")]
        samples: Option<PathBuf>,
        /// Dry-run phase 1 over a corpus
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long)]
        format: Option<CorpusFormat>,
        /// Dry-run phase 2 over dialogues (needs --ontology)
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        max_docs: Option<usize>,
        #[arg(long)]
        max_sentences: Option<usize>,
    },
}

/// Settings that may come from the `--config` file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub format: Option<String>,
    pub triples: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub dialogues: Option<PathBuf>,
    pub db: Option<PathBuf>,
    pub goals: Option<PathBuf>,
    pub preds: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub workers: Option<usize>,
    pub max_docs: Option<usize>,
    pub max_sentences: Option<usize>,
    pub epochs: Option<u32>,
    pub skip_bad: Option<bool>,
    pub check_stopwords: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }
}

/// A failed run, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

/// Prefixes whole-file load errors with the file they came from.
fn in_file<T>(path: &Path, r: crate::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io { .. } | Error::Data { .. } | Error::Config(_) => e.into(),
        other => Failure::Data(format!("{}: {other}", path.display())),
    })
}

/// Flags merged over the config file.
struct Ctx {
    config: RunConfig,
    seed: u64,
    workers: usize,
    out: Option<PathBuf>,
    skip_bad: bool,
    check_stopwords: bool,
    quiet: bool,
    stops: StopwordList,
}

impl Ctx {
    fn new(common: CommonArgs) -> Result<Self, Failure> {
        let config = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let seed = match common.seed.or(config.seed) {
            Some(seed) => seed,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().map_err(|_| {
                    Failure::Usage(format!(
                        "${SEED_ENV} is not a 64-bit unsigned integer: {v:?}"
                    ))
                })?,
                Err(_) => 0,
            },
        };
        let workers = match common.workers {
            Some(w) => w as usize,
            None => config.workers.unwrap_or(1),
        };
        if workers == 0 {
            return Err(Failure::Usage("workers must be positive".into()));
        }
        let stops = match common.stopwords.as_ref().or(config.stopwords.as_ref()) {
            Some(path) => in_file(path, StopwordList::from_file(path))?,
            None => StopwordList::default_list().clone(),
        };
        Ok(Ctx {
            seed,
            workers,
            out: common.out,
            skip_bad: common.skip_bad || config.skip_bad.unwrap_or(false),
            check_stopwords: common.check_stopwords || config.check_stopwords.unwrap_or(false),
            quiet: common.quiet,
            stops,
            config,
        })
    }

    fn header(&self, command: &str, inputs: &[(&str, &Path)]) -> Result<Header, Failure> {
        let mut header = Header::new(command, self.seed, self.stops.version());
        for (role, path) in inputs {
            header = header.with_input(role, path)?;
        }
        Ok(header)
    }

    fn output(&self) -> Result<Output, Failure> {
        Output::open(self.out.as_deref())
    }

    fn check_header_version(&self, path: &Path, version: Option<&str>) -> Result<(), Failure> {
        match version {
            Some(v) if self.check_stopwords && v != self.stops.version() => {
                Err(Failure::Usage(format!(
                    "{}: built with stopword list {v:?}, active list is {:?}",
                    path.display(),
                    self.stops.version()
                )))
            }
            _ => Ok(()),
        }
    }

    fn summary(&self, command: &str, units: usize, what: &str, started: Instant, extra: &str) {
        if self.quiet {
            return;
        }
        let secs = started.elapsed().as_secs_f64();
        let rate = if secs > 0.0 { units as f64 / secs } else { 0.0 };
        eprintln!("{command}: {units} {what} in {secs:.2}s ({rate:.0}/s){extra}");
    }
}

fn required<T: Clone>(flag: Option<T>, config: &Option<T>, name: &str) -> Result<T, Failure> {
    flag.or_else(|| config.clone()).ok_or_else(|| {
        Failure::Usage(format!(
            "--{name} is required (flag or \"{}\" in --config)",
            name.replace('-', "_")
        ))
    })
}

fn corpus_format(flag: Option<CorpusFormat>, config: &RunConfig) -> Result<CorpusFormat, Failure> {
    match (flag, &config.format) {
        (Some(f), _) => Ok(f),
        (None, Some(s)) => s.parse().map_err(Failure::Usage),
        (None, None) => Ok(CorpusFormat::Jsonl),
    }
}

/// Buffered stdout or file sink.
struct Output {
    inner: BufWriter<Box<dyn Write>>,
    path: String,
}

impl Output {
    fn open(path: Option<&Path>) -> Result<Self, Failure> {
        let (sink, name): (Box<dyn Write>, String) = match path {
            Some(p) => (
                Box::new(
                    File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
                ),
                p.display().to_string(),
            ),
            None => (Box::new(std::io::stdout()), "<stdout>".to_string()),
        };
        Ok(Output {
            inner: BufWriter::with_capacity(1 << 16, sink),
            path: name,
        })
    }

    fn line(&mut self, text: &str) -> Result<(), Failure> {
        writeln!(self.inner, "{text}").map_err(|e| self.io_err(e))
    }

    fn finish(mut self) -> Result<(), Failure> {
        self.inner.flush().map_err(|e| self.io_err(e))
    }

    fn io_err(&self, e: std::io::Error) -> Failure {
        Failure::Usage(format!("{}: {e}", self.path))
    }
}

impl Write for Output {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.inner.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("value serializes")
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("ontoforge: error: {failure}");
            failure.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx::new(cli.common)?;
    match cli.command {
        Command::Extract {
            corpus,
            format,
            max_docs,
        } => extract(&ctx, corpus, format, max_docs),
        Command::Filter { input } => filter(&ctx, input),
        Command::BuildPhase1 {
            corpus,
            triples,
            format,
            max_docs,
            max_sentences,
            epochs,
        } => build_phase1(
            &ctx,
            corpus,
            triples,
            format,
            max_docs,
            max_sentences,
            epochs,
        ),
        Command::BuildPhase2 {
            dialogues,
            ontology,
        } => build_phase2(&ctx, dialogues, ontology),
        Command::BuildFinetune {
            dialogues,
            ontology,
            db,
            gold_out,
        } => build_finetune(&ctx, dialogues, ontology, db, gold_out),
        Command::Delex { input, db, relex } => delex(&ctx, input, db, relex),
        Command::DbQuery {
            db,
            ontology,
            state,
            input,
            domain,
        } => db_query(&ctx, db, ontology, state, input, domain),
        Command::Evaluate {
            preds,
            gold,
            goals,
            db,
            ontology,
            per_dialogue,
        } => evaluate_cmd(&ctx, preds, gold, goals, db, ontology, per_dialogue),
        Command::Stats {
            samples,
            corpus,
            triples,
            format,
            dialogues,
            ontology,
            max_docs,
            max_sentences,
        } => stats(
            &ctx,
            samples,
            corpus,
            triples,
            format,
            dialogues,
            ontology,
            max_docs,
            max_sentences,
        ),
    }
}

fn extract(
    ctx: &Ctx,
    corpus: Option<PathBuf>,
    format: Option<CorpusFormat>,
    max_docs: Option<usize>,
) -> Result<(), Failure> {
    let started = Instant::now();
    let corpus = required(corpus, &ctx.config.corpus, "corpus")?;
    let format = corpus_format(format, &ctx.config)?;
    let units = CorpusUnits::open(&corpus, format)?.with_limit(max_docs.or(ctx.config.max_docs));
    let mut out = ctx.output()?;
    out.line(&ctx.header("extract", &[("corpus", &corpus)])?.to_line())?;
    let (mut docs, mut skipped, mut triples) = (0usize, 0usize, 0usize);
    let mut seen = std::collections::HashSet::new();
    for_each_ordered(
        units,
        ctx.workers,
        DEFAULT_BATCH,
        |unit| {
            let parsed = unit.parse(format).map(|doc| {
                let lines: Vec<String> = doc
                    .sentences
                    .iter()
                    .flat_map(|s| naive_extract(&doc.doc_id, s))
                    .map(|t| to_line(&t))
                    .collect();
                (doc.doc_id, lines)
            });
            (unit.line, parsed)
        },
        |(line, parsed)| {
            let parsed = parsed.and_then(|(id, lines)| {
                if seen.insert(id.clone()) {
                    Ok(lines)
                } else {
                    Err(format!("duplicate doc_id {id:?}"))
                }
            });
            match parsed {
                Ok(lines) => {
                    docs += 1;
                    triples += lines.len();
                    for l in lines {
                        writeln!(out, "{l}").map_err(|e| Error::io("<output>", e))?;
                    }
                }
                Err(_) if ctx.skip_bad => skipped += 1,
                Err(message) => return Err(Error::data(&corpus, line, message)),
            }
            Ok(())
        },
    )?;
    out.finish()?;
    ctx.summary(
        "extract",
        docs,
        "documents",
        started,
        &format!(", {triples} triples, {skipped} skipped"),
    );
    Ok(())
}

fn load_index(ctx: &Ctx, path: &Path) -> Result<TripleIndex, Failure> {
    let index = load_triples(path, ctx.skip_bad)?;
    ctx.check_header_version(path, index.stopwords_version.as_deref())?;
    Ok(index)
}

fn filter(ctx: &Ctx, input: Option<PathBuf>) -> Result<(), Failure> {
    let started = Instant::now();
    let input = required(input, &ctx.config.triples, "in")?;
    let index = load_index(ctx, &input)?;
    let mut out = ctx.output()?;
    out.line(&ctx.header("filter", &[("triples", &input)])?.to_line())?;
    let stats = run_filter(&index, &ctx.stops, ctx.seed, ctx.workers, &mut out)?;
    out.finish()?;
    ctx.summary(
        "filter",
        stats.input,
        "triples",
        started,
        &format!(", {} kept, {} skipped lines", stats.kept, index.skipped),
    );
    if !ctx.quiet {
        eprintln!("{}", to_line(&stats));
    }
    Ok(())
}

struct Phase1Inputs {
    corpus: PathBuf,
    triples: Option<PathBuf>,
    format: CorpusFormat,
    max_docs: Option<usize>,
    max_sentences: usize,
}

impl Phase1Inputs {
    fn resolve(
        ctx: &Ctx,
        corpus: Option<PathBuf>,
        triples: Option<PathBuf>,
        format: Option<CorpusFormat>,
        max_docs: Option<usize>,
        max_sentences: Option<usize>,
    ) -> Result<Self, Failure> {
        let max_sentences = max_sentences
            .or(ctx.config.max_sentences)
            .unwrap_or(DEFAULT_MAX_SENTENCES);
        if max_sentences == 0 {
            return Err(Failure::Usage("--max-sentences must be positive".into()));
        }
        Ok(Phase1Inputs {
            corpus: required(corpus, &ctx.config.corpus, "corpus")?,
            triples: triples.or_else(|| ctx.config.triples.clone()),
            format: corpus_format(format, &ctx.config)?,
            max_docs: max_docs.or(ctx.config.max_docs),
            max_sentences,
        })
    }

    fn header_inputs(&self) -> Vec<(&str, &Path)> {
        let mut inputs = vec![("corpus", self.corpus.as_path())];
        if let Some(t) = &self.triples {
            inputs.push(("triples", t.as_path()));
        }
        inputs
    }

    /// Runs every epoch in turn; all samples go to `out`.
    fn run(&self, ctx: &Ctx, epochs: u32, out: &mut dyn Write) -> Result<Phase1Stats, Failure> {
        let index = match &self.triples {
            Some(path) => Some(load_index(ctx, path)?),
            None => None,
        };
        let source = match &index {
            Some(index) => TripleSource::Index(index),
            None => TripleSource::Naive,
        };
        let mut total = Phase1Stats::default();
        for epoch in 0..epochs {
            let config = Phase1Config {
                seed: ctx.seed,
                epoch,
                max_sentences: self.max_sentences,
                workers: ctx.workers,
                batch_size: DEFAULT_BATCH,
            };
            let units = CorpusUnits::open(&self.corpus, self.format)?.with_limit(self.max_docs);
            let stats = run_phase1(units, source, &ctx.stops, &config, ctx.skip_bad, out)?;
            let orphans = stats.orphan_triples;
            total.merge(&stats);
            total.orphan_triples = orphans;
        }
        if let Some(index) = &index {
            total.skipped_bad_lines += index.skipped;
        }
        Ok(total)
    }
}

fn build_phase1(
    ctx: &Ctx,
    corpus: Option<PathBuf>,
    triples: Option<PathBuf>,
    format: Option<CorpusFormat>,
    max_docs: Option<usize>,
    max_sentences: Option<usize>,
    epochs: Option<u32>,
) -> Result<(), Failure> {
    let started = Instant::now();
    let inputs = Phase1Inputs::resolve(ctx, corpus, triples, format, max_docs, max_sentences)?;
    let epochs = epochs.or(ctx.config.epochs).unwrap_or(1);
    if epochs == 0 {
        return Err(Failure::Usage("--epochs must be positive".into()));
    }
    let mut out = ctx.output()?;
    out.line(
        &ctx.header("build-phase1", &inputs.header_inputs())?
            .to_line(),
    )?;
    let stats = inputs.run(ctx, epochs, &mut out)?;
    out.finish()?;
    ctx.summary(
        "build-phase1",
        stats.documents,
        "documents",
        started,
        &format!(", {} samples", stats.samples),
    );
    if !ctx.quiet {
        eprintln!("{}", to_line(&stats));
    }
    Ok(())
}

fn load_schema(path: &Path) -> Result<OntologySchema, Failure> {
    in_file(path, OntologySchema::load(path))
}

fn load_db(path: &Path) -> Result<Database, Failure> {
    in_file(path, Database::load(path))
}

fn build_phase2(
    ctx: &Ctx,
    dialogues: Option<PathBuf>,
    ontology: Option<PathBuf>,
) -> Result<(), Failure> {
    let started = Instant::now();
    let dialogues = required(dialogues, &ctx.config.dialogues, "dialogues")?;
    let ontology = required(ontology, &ctx.config.ontology, "ontology")?;
    let schema = load_schema(&ontology)?;
    let mut out = ctx.output()?;
    out.line(
        &ctx.header(
            "build-phase2",
            &[("dialogues", &dialogues), ("ontology", &ontology)],
        )?
        .to_line(),
    )?;
    let stats = run_phase2(
        JsonlLines::open(&dialogues)?,
        &schema,
        ctx.seed,
        ctx.workers,
        ctx.skip_bad,
        &mut out,
    )?;
    out.finish()?;
    ctx.summary(
        "build-phase2",
        stats.dialogues,
        "dialogues",
        started,
        &format!(", {} samples", stats.samples),
    );
    if !ctx.quiet {
        eprintln!("{}", to_line(&stats));
    }
    Ok(())
}

fn build_finetune(
    ctx: &Ctx,
    dialogues: Option<PathBuf>,
    ontology: Option<PathBuf>,
    db: Option<PathBuf>,
    gold_out: Option<PathBuf>,
) -> Result<(), Failure> {
    let started = Instant::now();
    let dialogues = required(dialogues, &ctx.config.dialogues, "dialogues")?;
    let ontology = required(ontology, &ctx.config.ontology, "ontology")?;
    let db_path = required(db, &ctx.config.db, "db")?;
    let schema = load_schema(&ontology)?;
    let db = load_db(&db_path)?;
    let norm = ValueNormalizer::new(Some(&schema));
    let inputs = [
        ("dialogues", dialogues.as_path()),
        ("ontology", &ontology),
        ("db", &db_path),
    ];
    let mut out = ctx.output()?;
    out.line(&ctx.header("build-finetune", &inputs)?.to_line())?;
    let mut gold = match &gold_out {
        Some(path) => {
            let mut g = Output::open(Some(path))?;
            g.line(&ctx.header("build-finetune", &inputs)?.to_line())?;
            Some(g)
        }
        None => None,
    };
    let (mut n_dialogues, mut n_samples, mut skipped) = (0usize, 0usize, 0usize);
    let mut sink_err: Option<Failure> = None;
    for_each_ordered(
        JsonlLines::open(&dialogues)?,
        ctx.workers,
        DEFAULT_BATCH,
        |line| {
            let parsed = serde_json::from_str::<AnnotatedDialogue>(&line.text)
                .map_err(|e| e.to_string())
                .and_then(|d| {
                    if d.dialogue_id.trim().is_empty() {
                        return Err("dialogue_id is blank".to_string());
                    }
                    let samples = finetune_samples(&d, &schema, &db, &norm);
                    let lines: Vec<(String, String)> = samples
                        .iter()
                        .enumerate()
                        .map(|(turn, s)| {
                            let pair = serialize_finetune(s);
                            let record = SampleRecord {
                                sample_id: format!("{}-t{turn}", d.dialogue_id),
                                source: pair.source_seq,
                                target: pair.target_seq,
                                meta: SampleMeta {
                                    doc_id: d.dialogue_id.clone(),
                                    k: 1,
                                    n_triples: s.state.len(),
                                    seed: None,
                                    dialogue_id: Some(d.dialogue_id.clone()),
                                    turn: Some(turn),
                                },
                            };
                            let gold = TurnPrediction {
                                dialogue_id: d.dialogue_id.clone(),
                                turn,
                                pred_state: s.state.clone(),
                                delex_response: s.delex_response.clone(),
                            };
                            (record.to_line(), to_line(&gold))
                        })
                        .collect();
                    Ok(lines)
                });
            (line.line, parsed)
        },
        |(line, parsed)| {
            match parsed {
                Ok(lines) => {
                    n_dialogues += 1;
                    for (sample, g) in lines {
                        n_samples += 1;
                        writeln!(out, "{sample}").map_err(|e| Error::io("<output>", e))?;
                        if let Some(gold) = gold.as_mut() {
                            if let Err(e) = gold.line(&g) {
                                sink_err = Some(e);
                            }
                        }
                    }
                }
                Err(_) if ctx.skip_bad => skipped += 1,
                Err(message) => return Err(Error::data(&dialogues, line, message)),
            }
            Ok(())
        },
    )?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    out.finish()?;
    if let Some(g) = gold {
        g.finish()?;
    }
    ctx.summary(
        "build-finetune",
        n_dialogues,
        "dialogues",
        started,
        &format!(", {n_samples} samples, {skipped} skipped"),
    );
    Ok(())
}

/// A record named in a delex/relex input line: inline slots or a database name.
#[derive(Deserialize)]
struct RecordRef {
    domain: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    slots: Option<BTreeMap<String, String>>,
}

fn resolve_record<'d>(
    r: &RecordRef,
    db: Option<&'d Database>,
) -> Result<std::borrow::Cow<'d, DbRecord>, String> {
    if let Some(slots) = &r.slots {
        return Ok(std::borrow::Cow::Owned(DbRecord {
            domain: r.domain.clone(),
            slots: slots.clone(),
        }));
    }
    let name = r
        .name
        .as_deref()
        .ok_or("record needs \"slots\" or \"name\"")?;
    let db = db.ok_or("a record given by name needs --db")?;
    db.records(&r.domain)
        .ok_or_else(|| format!("unknown domain {:?}", r.domain))?
        .iter()
        .find(|rec| rec.name().eq_ignore_ascii_case(name))
        .map(std::borrow::Cow::Borrowed)
        .ok_or_else(|| format!("no {} record named {name:?}", r.domain))
}

/// The record a delexicalized response refers to: the first match of the
/// first active domain whose name placeholder it contains.
fn relex_record<'d>(
    db: &'d Database,
    state: &DialogueState,
    delex: &str,
    norm: &ValueNormalizer<'_>,
) -> Option<&'d DbRecord> {
    state
        .domains()
        .into_iter()
        .filter(|d| db.has_domain(d) && delex.contains(&crate::dialogue::placeholder(d, "name")))
        .find_map(|d| query_db(db, state, d, norm).ok()?.first().copied())
}

fn delex_line(
    text: &str,
    db: Option<&Database>,
    relex: bool,
    norm: &ValueNormalizer<'_>,
) -> Result<String, String> {
    let mut obj: serde_json::Map<String, Value> =
        serde_json::from_str(text).map_err(|e| e.to_string())?;
    let response = obj
        .get("response")
        .and_then(Value::as_str)
        .ok_or("missing string field \"response\"")?
        .to_string();
    let state: DialogueState = match obj.get("state") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("state: {e}"))?,
        None => DialogueState::new(),
    };
    // absent: look the record up; null: there is none
    let explicit = match obj.get("record") {
        Some(Value::Null) => Some(None),
        Some(v) => {
            let r: RecordRef =
                serde_json::from_value(v.clone()).map_err(|e| format!("record: {e}"))?;
            Some(Some(resolve_record(&r, db)?))
        }
        None => None,
    };
    let record = match &explicit {
        Some(r) => r.as_deref(),
        None => db.and_then(|db| {
            if relex {
                relex_record(db, &state, &response, norm)
            } else {
                offered_record(db, &state, &response, norm)
            }
        }),
    };
    let converted = if relex {
        relexicalize(&response, &state, record).map_err(|e| e.to_string())?
    } else {
        delexicalize(&response, &state, record)
    };
    obj.insert("response".into(), Value::String(converted));
    Ok(to_line(&obj))
}

fn delex(
    ctx: &Ctx,
    input: Option<PathBuf>,
    db_path: Option<PathBuf>,
    relex: bool,
) -> Result<(), Failure> {
    let started = Instant::now();
    let input = input.ok_or_else(|| Failure::Usage("--in is required".into()))?;
    let db_path = db_path.or_else(|| ctx.config.db.clone());
    let db = db_path.as_deref().map(load_db).transpose()?;
    let schema = ctx
        .config
        .ontology
        .as_deref()
        .map(load_schema)
        .transpose()?;
    let norm = ValueNormalizer::new(schema.as_ref());
    let command = if relex { "relex" } else { "delex" };
    let mut inputs = vec![("in", input.as_path())];
    if let Some(p) = &db_path {
        inputs.push(("db", p.as_path()));
    }
    let mut out = ctx.output()?;
    out.line(&ctx.header(command, &inputs)?.to_line())?;
    let (mut n, mut skipped) = (0usize, 0usize);
    for line in JsonlLines::open(&input)? {
        let line = line?;
        match delex_line(&line.text, db.as_ref(), relex, &norm) {
            Ok(l) => {
                n += 1;
                out.line(&l)?;
            }
            Err(_) if ctx.skip_bad => skipped += 1,
            Err(message) => return Err(Error::data(&input, line.line, message).into()),
        }
    }
    out.finish()?;
    ctx.summary(
        command,
        n,
        "responses",
        started,
        &format!(", {skipped} skipped"),
    );
    Ok(())
}

#[derive(Serialize)]
struct DomainMatches<'a> {
    count: usize,
    bucket: &'static str,
    names: Vec<&'a str>,
}

/// The DB segment for one state: per-domain matches plus the linearized buckets.
fn db_answer(
    db: &Database,
    state: &DialogueState,
    domain: Option<&str>,
    norm: &ValueNormalizer<'_>,
) -> crate::Result<Value> {
    let domains: Vec<&str> = match domain {
        Some(d) => vec![d],
        None => state
            .domains()
            .into_iter()
            .filter(|d| db.has_domain(d))
            .collect(),
    };
    let mut matches = BTreeMap::new();
    for d in domains {
        let records = query_db(db, state, d, norm)?;
        matches.insert(
            d.to_string(),
            DomainMatches {
                count: records.len(),
                bucket: crate::dialogue::db_bucket(records.len()).token(),
                names: records.iter().map(|r| r.name()).collect(),
            },
        );
    }
    Ok(json!({
        "db": DbState::compute(db, state, norm).linearize(),
        "domains": matches,
    }))
}

fn db_query(
    ctx: &Ctx,
    db: Option<PathBuf>,
    ontology: Option<PathBuf>,
    state: Option<String>,
    input: Option<PathBuf>,
    domain: Option<String>,
) -> Result<(), Failure> {
    let db_path = required(db, &ctx.config.db, "db")?;
    let db = load_db(&db_path)?;
    let schema = ontology
        .or_else(|| ctx.config.ontology.clone())
        .as_deref()
        .map(load_schema)
        .transpose()?;
    let norm = ValueNormalizer::new(schema.as_ref());
    let domain = domain.map(|d| d.trim().to_lowercase());
    let mut out = ctx.output()?;
    match (state, input) {
        (Some(state), None) => {
            let state: DialogueState = serde_json::from_str(&state)
                .map_err(|e| Failure::Usage(format!("--state is not a valid state: {e}")))?;
            let answer = db_answer(&db, &state, domain.as_deref(), &norm)?;
            out.line(&to_line(&answer))?;
        }
        (None, Some(input)) => {
            out.line(
                &ctx.header("db-query", &[("db", &db_path), ("in", &input)])?
                    .to_line(),
            )?;
            for line in JsonlLines::open(&input)? {
                let line = line?;
                let parsed = serde_json::from_str::<serde_json::Map<String, Value>>(&line.text)
                    .map_err(|e| e.to_string())
                    .and_then(|obj| {
                        let state: DialogueState = obj
                            .get("state")
                            .map(|v| {
                                serde_json::from_value(v.clone()).map_err(|e| format!("state: {e}"))
                            })
                            .transpose()?
                            .unwrap_or_default();
                        Ok((obj, state))
                    });
                let (mut obj, state) = match parsed {
                    Ok(v) => v,
                    Err(_) if ctx.skip_bad => continue,
                    Err(message) => return Err(Error::data(&input, line.line, message).into()),
                };
                let answer = db_answer(&db, &state, domain.as_deref(), &norm)
                    .map_err(|e| Failure::from(Error::data(&input, line.line, e.to_string())))?;
                if let Value::Object(answer) = answer {
                    obj.extend(answer);
                }
                out.line(&to_line(&obj))?;
            }
        }
        _ => {
            return Err(Failure::Usage(
                "exactly one of --state or --in is required".into(),
            ))
        }
    }
    out.finish()
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    header: &'a Header,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(ctx: &Ctx, header: &Header, body: T) -> Result<(), Failure> {
    let mut out = ctx.output()?;
    let text = serde_json::to_string_pretty(&Report { header, body }).expect("report serializes");
    out.line(&text)?;
    out.finish()
}

fn evaluate_cmd(
    ctx: &Ctx,
    preds: Option<PathBuf>,
    gold: Option<PathBuf>,
    goals: Option<PathBuf>,
    db: Option<PathBuf>,
    ontology: Option<PathBuf>,
    per_dialogue: bool,
) -> Result<(), Failure> {
    let started = Instant::now();
    let preds_path = required(preds, &ctx.config.preds, "preds")?;
    let gold_path = required(gold, &ctx.config.gold, "gold")?;
    let goals_path = required(goals, &ctx.config.goals, "goals")?;
    let db_path = required(db, &ctx.config.db, "db")?;
    let ontology = ontology.or_else(|| ctx.config.ontology.clone());
    let schema = ontology.as_deref().map(load_schema).transpose()?;
    let preds = load_turns(&preds_path)?;
    let golds = load_turns(&gold_path)?;
    let goals = in_file(&goals_path, load_goals(&goals_path, schema.as_ref()))?;
    let db = load_db(&db_path)?;
    let norm = ValueNormalizer::new(schema.as_ref());
    let mut report: EvalReport = evaluate(&preds, &golds, &goals, &db, &norm)?;
    if !per_dialogue {
        report.per_dialogue.clear();
    }
    let mut inputs = vec![
        ("preds", preds_path.as_path()),
        ("gold", gold_path.as_path()),
        ("goals", goals_path.as_path()),
        ("db", db_path.as_path()),
    ];
    if let Some(o) = &ontology {
        inputs.push(("ontology", o.as_path()));
    }
    write_report(ctx, &ctx.header("evaluate", &inputs)?, &report)?;
    ctx.summary("evaluate", golds.len(), "gold turns", started, "");
    Ok(())
}

/// Summary of an existing sample file.
#[derive(Debug, Default, Serialize)]
struct SampleFileStats {
    samples: usize,
    /// Samples whose sequences do not follow the pretraining grammar
    /// (fine-tune samples land here).
    unparsed: usize,
    masked_sentences: BTreeMap<usize, usize>,
    triples_per_sample: BTreeMap<usize, usize>,
    component_words: BTreeMap<usize, usize>,
    built_by: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn stats(
    ctx: &Ctx,
    samples: Option<PathBuf>,
    corpus: Option<PathBuf>,
    triples: Option<PathBuf>,
    format: Option<CorpusFormat>,
    dialogues: Option<PathBuf>,
    ontology: Option<PathBuf>,
    max_docs: Option<usize>,
    max_sentences: Option<usize>,
) -> Result<(), Failure> {
    let started = Instant::now();
    if let Some(path) = samples {
        let mut s = SampleFileStats::default();
        let mut lines = JsonlLines::open(&path)?;
        for line in lines.by_ref() {
            let line = line?;
            let record: SampleRecord = match serde_json::from_str(&line.text) {
                Ok(r) => r,
                Err(_) if ctx.skip_bad => continue,
                Err(e) => return Err(Error::data(&path, line.line, e.to_string()).into()),
            };
            s.samples += 1;
            *s.masked_sentences.entry(record.meta.k).or_default() += 1;
            *s.triples_per_sample
                .entry(record.meta.n_triples)
                .or_default() += 1;
            match parse_sample(&record.pair()) {
                Ok(content) => {
                    for t in &content.target_triples {
                        for c in t.components() {
                            *s.component_words.entry(c.split(' ').count()).or_default() += 1;
                        }
                    }
                }
                Err(_) => s.unparsed += 1,
            }
        }
        if let Some(h) = lines.header() {
            ctx.check_header_version(&path, Some(&h.stopwords_version))?;
            s.built_by = Some(h.command.clone());
        }
        let units = s.samples;
        write_report(ctx, &ctx.header("stats", &[("samples", &path)])?, &s)?;
        ctx.summary("stats", units, "samples", started, "");
        return Ok(());
    }
    if let Some(dialogues) = dialogues {
        let ontology = required(ontology, &ctx.config.ontology, "ontology")?;
        let schema = load_schema(&ontology)?;
        let stats = run_phase2(
            JsonlLines::open(&dialogues)?,
            &schema,
            ctx.seed,
            ctx.workers,
            ctx.skip_bad,
            &mut std::io::sink(),
        )?;
        let header = ctx.header(
            "stats",
            &[("dialogues", &dialogues), ("ontology", &ontology)],
        )?;
        write_report(ctx, &header, &stats)?;
        ctx.summary("stats", stats.dialogues, "dialogues", started, "");
        return Ok(());
    }
    let inputs = Phase1Inputs::resolve(ctx, corpus, triples, format, max_docs, max_sentences)
        .map_err(|_| Failure::Usage("stats needs --samples, --dialogues or --corpus".into()))?;
    let stats = inputs.run(ctx, 1, &mut std::io::sink())?;
    write_report(ctx, &ctx.header("stats", &inputs.header_inputs())?, &stats)?;
    ctx.summary("stats", stats.documents, "documents", started, "");
    Ok(())
}
