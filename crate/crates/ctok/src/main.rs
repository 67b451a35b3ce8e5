//! Command-line entry point: train / eval-qa / eval-recast / probe /
//! metrics over the concept-tokens library.
//!
//! Exit codes: 0 success, 1 validation failure (before any backend is
//! built), 2 runtime failure. Every run writes a manifest echoing the
//! resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use concept_tokens::corpus::{self, ConceptSpec, CorpusFormat, DefinitionalCorpus};
use concept_tokens::experiments::{
    self, ingest_annotations, load_hotpotqa_json, load_probes, load_qa_jsonl, load_recast_pairs,
    QaEvalSettings,
};
use concept_tokens::judge::{ChatCompletion, HeuristicJudge, HttpChatClient};
use concept_tokens::metrics::{self, RecastReport};
use concept_tokens::steering::{Condition, TemplateSet};
use concept_tokens::trainer::{
    self, corpus_checksum, install_embedding, load_embedding, save_embedding, TrainConfig,
};
use concept_tokens::{
    EmbeddingInit, Judge, JudgeConfig, LabelValue, LanguageModel, Task, TinyLm, TinyLmConfig,
};

/// Environment variable holding the judge API key.
const JUDGE_KEY_ENV: &str = "CTOK_JUDGE_API_KEY";

#[derive(Parser)]
#[command(name = "ctok", version, about = "Concept-token toolkit for frozen causal LMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a concept-token embedding from a definitional corpus.
    Train(TrainArgs),
    /// Closed-book QA evaluation under one prompt condition.
    EvalQa(EvalQaArgs),
    /// Generate recasting responses and emit the annotation file.
    EvalRecast(EvalRecastArgs),
    /// Run the qualitative probe suite.
    Probe(ProbeArgs),
    /// Compute reports from label or annotation files.
    Metrics(MetricsArgs),
}

#[derive(Args, Serialize)]
struct BackendArg {
    /// Backend configuration JSON (built-in tiny transformer).
    #[arg(long, default_value = "data/backend/tiny.json")]
    backend: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Definitional corpus (JSONL with a "text" field, or plain text for
    /// whole articles).
    #[arg(long)]
    corpus: PathBuf,
    /// Concept spec JSON.
    #[arg(long)]
    concept: PathBuf,
    /// Training preset: definition-concept | hallucinations | article-concept.
    #[arg(long)]
    preset: String,
    /// Corpus layout; defaults to whole-article for the article-concept
    /// preset, one record per line otherwise.
    #[arg(long)]
    format: Option<String>,
    #[command(flatten)]
    backend: BackendArg,
    /// Output artifact path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shuffle example order each epoch (off by default, as trained).
    #[arg(long)]
    shuffle: bool,
    /// Override the epoch count of every phase.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the learning rate of every phase.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the chunk length cap (tokens) for chunked phases.
    #[arg(long)]
    max_chunk_len: Option<usize>,
}

#[derive(Args, Serialize)]
struct EvalQaArgs {
    /// QA dataset: .jsonl with {id,question,answer}, or a HotpotQA-style
    /// .json array.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    concept: PathBuf,
    /// ct_negated | no_instruction | ct_asserted | explicit_mention |
    /// definition_in_context
    #[arg(long)]
    condition: String,
    /// Trained artifact; required for the ct_* conditions.
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Definitional corpus; required for definition_in_context.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    sample_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    /// Judge transport: stub (offline heuristic) or http.
    #[arg(long, default_value = "stub")]
    judge: String,
    /// Chat-completions endpoint for --judge http.
    #[arg(long)]
    judge_url: Option<String>,
    #[arg(long, default_value = "gemini-2.5-flash")]
    judge_model: String,
    /// Judge response cache (JSONL); warm re-runs skip the transport.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalRecastArgs {
    /// Teacher/student pairs (JSONL).
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    concept: PathBuf,
    #[arg(long)]
    condition: String,
    #[arg(long)]
    embedding: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArg,
    #[arg(long)]
    out: PathBuf,
    /// Keep duplicate student answers instead of deduplicating.
    #[arg(long)]
    no_dedup: bool,
    #[arg(long, default_value_t = 48)]
    max_new: usize,
}

#[derive(Args, Serialize)]
struct ProbeArgs {
    /// Probe suite JSON.
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    concept: PathBuf,
    #[arg(long)]
    embedding: PathBuf,
    /// Definitional corpus used to build the backend vocabulary.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
}

#[derive(Args, Serialize)]
struct MetricsArgs {
    /// labels.jsonl from eval-qa.
    #[arg(long, conflicts_with = "annotations")]
    labels: Option<PathBuf>,
    /// Annotated exchange file from eval-recast.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    method: String,
    /// Directory for report.json / report.txt; stdout only if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Validation failures exit 1 before any backend exists; everything after
/// backend construction is a runtime failure and exits 2.
enum CliError {
    Validation(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code differs per error kind; the contract
            // here is 1 for anything that fails argument validation
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::EvalQa(args) => cmd_eval_qa(args),
        Command::EvalRecast(args) => cmd_eval_recast(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Metrics(args) => cmd_metrics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_backend_config(path: &Path) -> CliResult<TinyLmConfig> {
    require_file(path, "backend config")?;
    let raw = fs::read_to_string(path).map_err(validation)?;
    serde_json::from_str(&raw).map_err(validation)
}

fn load_concept(path: &Path) -> CliResult<ConceptSpec> {
    require_file(path, "concept spec")?;
    let spec = ConceptSpec::from_file(path).map_err(validation)?;
    spec.validate().map_err(validation)?;
    Ok(spec)
}

fn parse_format(s: &str) -> CliResult<CorpusFormat> {
    match s {
        "one-definition-per-record" => Ok(CorpusFormat::OneDefinitionPerRecord),
        "whole-article" => Ok(CorpusFormat::WholeArticle),
        other => Err(CliError::Validation(format!(
            "unknown corpus format {other:?} (expected one-definition-per-record or whole-article)"
        ))),
    }
}

/// Build the tiny backend with a vocabulary drawn from everything the run
/// will tokenize.
fn build_backend(cfg: TinyLmConfig, vocab_texts: &[String]) -> TinyLm {
    let refs: Vec<&str> = vocab_texts.iter().map(|s| s.as_str()).collect();
    TinyLm::from_texts(cfg, &refs)
}

/// Template strings feed the vocabulary so system prompts do not tokenize
/// to unknowns. The {TOKEN}/{CORPUS} placeholders never collide with a
/// registered concept marker.
fn template_vocab_texts(templates: &TemplateSet) -> Vec<String> {
    let mut out = Vec::new();
    for task in [Task::Qa, Task::Recast] {
        for cond in Condition::ALL {
            if let Ok(t) = templates.template(task, cond) {
                out.push(t.to_string());
            }
        }
    }
    out
}

fn write_manifest<T: Serialize>(dir: &Path, subcommand: &str, args: &T) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(runtime)?;
    let manifest = serde_json::json!({
        "subcommand": subcommand,
        "config": args,
    });
    fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(runtime)?,
    )
    .map_err(runtime)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    // validation phase: everything is checked before the backend exists
    require_file(&args.corpus, "corpus")?;
    let concept = load_concept(&args.concept)?;
    let mut config = TrainConfig::preset(&args.preset).map_err(validation)?;
    config.seed = args.seed;
    config.shuffle = args.shuffle;
    if let Some(epochs) = args.epochs {
        for p in &mut config.phases {
            p.epochs = epochs;
        }
    }
    if let Some(lr) = args.lr {
        for p in &mut config.phases {
            p.lr = lr;
        }
    }
    if let Some(m) = args.max_chunk_len {
        config.max_chunk_len = m;
    }
    config.validate().map_err(validation)?;
    let format = match &args.format {
        Some(s) => parse_format(s)?,
        None if args.preset == "article-concept" => CorpusFormat::WholeArticle,
        None => CorpusFormat::OneDefinitionPerRecord,
    };
    let raw_corpus = corpus::load_corpus(&args.corpus, format).map_err(validation)?;
    let instantiated = corpus::instantiate(&raw_corpus, &concept).map_err(validation)?;
    let backend_cfg = load_backend_config(&args.backend.backend)?;
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();

    // runtime phase
    let mut lm = build_backend(backend_cfg, &raw_corpus.definitions);
    let handle = lm
        .extend_vocab(&concept.token_string, EmbeddingInit::MeanOfEmbeddings)
        .map_err(runtime)?;
    let mut examples_by_phase = Vec::new();
    for phase in &config.phases {
        examples_by_phase.push(
            trainer::make_examples(&instantiated, phase.mode, &lm, config.max_chunk_len)
                .map_err(runtime)?,
        );
    }
    let checksum = corpus_checksum(&instantiated);
    let outcome = trainer::train(
        &mut lm,
        &handle,
        &examples_by_phase,
        &config,
        &concept.name,
        &checksum,
    )
    .map_err(runtime)?;
    save_embedding(&outcome.embedding, &args.out).map_err(runtime)?;
    let trace_path = args.out.with_extension("trace.json");
    fs::write(
        &trace_path,
        serde_json::to_string_pretty(&outcome.loss_trace).map_err(runtime)?,
    )
    .map_err(runtime)?;
    write_manifest(&out_dir, "train", &args)?;
    println!(
        "trained {} -> {} ({} phases)",
        concept.name,
        args.out.display(),
        outcome.loss_trace.len()
    );
    Ok(())
}

struct EvalContext {
    lm: TinyLm,
    concept: ConceptSpec,
    handle: Option<concept_tokens::ConceptTokenHandle>,
    corpus_text: Option<String>,
    condition: Condition,
    templates: TemplateSet,
}

/// Shared validation + backend setup for the condition-driven subcommands.
#[allow(clippy::too_many_arguments)]
fn eval_context(
    concept_path: &Path,
    condition: &str,
    embedding: Option<&Path>,
    corpus_path: Option<&Path>,
    backend_path: &Path,
    extra_vocab: Vec<String>,
) -> CliResult<EvalContext> {
    let concept = load_concept(concept_path)?;
    let condition = Condition::parse(condition).map_err(validation)?;
    if condition.needs_embedding() && embedding.is_none() {
        return Err(CliError::Validation(format!(
            "condition {condition} requires --embedding"
        )));
    }
    if condition == Condition::DefinitionInContext && corpus_path.is_none() {
        return Err(CliError::Validation(
            "definition_in_context requires --corpus".into(),
        ));
    }
    let loaded = match embedding {
        Some(p) => {
            require_file(p, "embedding artifact")?;
            Some(load_embedding(p).map_err(validation)?)
        }
        None => None,
    };
    let raw_corpus: Option<DefinitionalCorpus> = match corpus_path {
        Some(p) => {
            require_file(p, "corpus")?;
            Some(
                corpus::load_corpus(p, CorpusFormat::OneDefinitionPerRecord)
                    .map_err(validation)?,
            )
        }
        None => None,
    };
    let backend_cfg = load_backend_config(backend_path)?;
    let templates = TemplateSet::builtin();
    templates.validate().map_err(validation)?;

    let mut vocab_texts = extra_vocab;
    vocab_texts.extend(template_vocab_texts(&templates));
    vocab_texts.push(concept.name.clone());
    if let Some(c) = &raw_corpus {
        vocab_texts.extend(c.definitions.iter().cloned());
    }
    let mut lm = build_backend(backend_cfg, &vocab_texts);
    let handle = match &loaded {
        Some(e) => Some(install_embedding(&mut lm, e).map_err(runtime)?),
        None => None,
    };
    let corpus_text = if condition == Condition::DefinitionInContext {
        raw_corpus.as_ref().map(|c| c.definitions.join("\n\n"))
    } else {
        None
    };
    Ok(EvalContext {
        lm,
        concept,
        handle,
        corpus_text,
        condition,
        templates,
    })
}

fn cmd_eval_qa(args: EvalQaArgs) -> CliResult<()> {
    require_file(&args.dataset, "dataset")?;
    let dataset = if args.dataset.extension().is_some_and(|e| e == "json") {
        load_hotpotqa_json(&args.dataset).map_err(validation)?
    } else {
        load_qa_jsonl(&args.dataset).map_err(validation)?
    };
    let transport: Box<dyn ChatCompletion> = match args.judge.as_str() {
        "stub" => Box::new(HeuristicJudge),
        "http" => {
            let url = args.judge_url.clone().ok_or_else(|| {
                CliError::Validation("--judge http requires --judge-url".into())
            })?;
            Box::new(HttpChatClient::new(url, std::env::var(JUDGE_KEY_ENV).ok()))
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown judge {other:?} (expected stub or http)"
            )))
        }
    };
    let mut extra_vocab: Vec<String> = Vec::new();
    for inst in &dataset {
        extra_vocab.push(inst.question.clone());
        extra_vocab.push(inst.gold_answer.clone());
    }
    let mut ctx = eval_context(
        &args.concept,
        &args.condition,
        args.embedding.as_deref(),
        args.corpus.as_deref(),
        &args.backend.backend,
        extra_vocab,
    )?;

    let judge_config = JudgeConfig {
        model: args.judge_model.clone(),
        ..JudgeConfig::default()
    };
    let judge = Judge::new(transport.as_ref(), judge_config, args.cache.as_deref())
        .map_err(runtime)?;
    let settings = QaEvalSettings {
        condition: ctx.condition,
        sample_n: args.sample_n,
        seed: args.seed,
        max_new_tokens: args.max_new,
        corpus_text: ctx.corpus_text.as_deref(),
        handle: ctx.handle.as_ref(),
    };
    let (_, report) = experiments::run_qa_eval(
        &mut ctx.lm,
        &ctx.templates,
        &ctx.concept,
        &dataset,
        &settings,
        &judge,
        &args.out,
    )
    .map_err(runtime)?;
    write_manifest(&args.out, "eval-qa", &args)?;
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_eval_recast(args: EvalRecastArgs) -> CliResult<()> {
    require_file(&args.pairs, "pairs file")?;
    let mut pairs = load_recast_pairs(&args.pairs).map_err(validation)?;
    if pairs.is_empty() {
        return Err(CliError::Validation("no recast pairs".into()));
    }
    if !args.no_dedup {
        pairs = experiments::dedup_pairs(&pairs);
    }
    let mut extra_vocab: Vec<String> = Vec::new();
    for p in &pairs {
        extra_vocab.push(p.teacher_question.clone());
        extra_vocab.push(p.student_answer.clone());
        extra_vocab.push("Teacher: Student:".into());
    }
    let mut ctx = eval_context(
        &args.concept,
        &args.condition,
        args.embedding.as_deref(),
        args.corpus.as_deref(),
        &args.backend.backend,
        extra_vocab,
    )?;
    fs::create_dir_all(&args.out).map_err(runtime)?;
    let out_path = args.out.join("annotations.jsonl");
    let rows = experiments::run_recast_generation(
        &mut ctx.lm,
        &ctx.templates,
        &ctx.concept,
        &pairs,
        ctx.condition,
        ctx.corpus_text.as_deref(),
        ctx.handle.as_ref(),
        args.max_new,
        &out_path,
    )
    .map_err(runtime)?;
    write_manifest(&args.out, "eval-recast", &args)?;
    println!(
        "wrote {} generations for annotation to {}",
        rows.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> CliResult<()> {
    require_file(&args.probes, "probe suite")?;
    let probes = load_probes(&args.probes).map_err(validation)?;
    if probes.is_empty() {
        return Err(CliError::Validation("empty probe suite".into()));
    }
    let mut extra_vocab: Vec<String> = probes.iter().map(|p| p.text.clone()).collect();
    extra_vocab.extend(
        probes
            .iter()
            .flat_map(|p| p.variants.values().cloned()),
    );
    // probes always inject the token, so the embedding flag is mandatory
    // and the condition machinery is bypassed
    let concept = load_concept(&args.concept)?;
    require_file(&args.embedding, "embedding artifact")?;
    let loaded = load_embedding(&args.embedding).map_err(validation)?;
    let backend_cfg = load_backend_config(&args.backend.backend)?;
    if let Some(p) = &args.corpus {
        require_file(p, "corpus")?;
        // accept either layout here; the corpus only feeds the vocabulary
        let c = corpus::load_corpus(p, CorpusFormat::OneDefinitionPerRecord)
            .or_else(|_| corpus::load_corpus(p, CorpusFormat::WholeArticle))
            .map_err(validation)?;
        extra_vocab.extend(c.definitions);
    }
    extra_vocab.push(concept.name.clone());

    let mut lm = build_backend(backend_cfg, &extra_vocab);
    install_embedding(&mut lm, &loaded).map_err(runtime)?;
    let report =
        experiments::run_probe_suite(&mut lm, &concept, &probes, args.top_k, args.max_new)
            .map_err(runtime)?;
    fs::create_dir_all(&args.out).map_err(runtime)?;
    fs::write(
        args.out.join("probes.json"),
        serde_json::to_string_pretty(&report).map_err(runtime)?,
    )
    .map_err(runtime)?;
    write_manifest(&args.out, "probe", &args)?;
    for (ptype, results) in report.by_type() {
        println!("[{ptype:?}] {} probes", results.len());
    }
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> CliResult<()> {
    let (text, json) = match (&args.labels, &args.annotations) {
        (Some(labels), None) => {
            require_file(labels, "labels file")?;
            let raw = fs::read_to_string(labels).map_err(validation)?;
            let mut values: Vec<LabelValue> = Vec::new();
            let mut failures = 0;
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: experiments::EvalRecord =
                    serde_json::from_str(line).map_err(|e| {
                        CliError::Validation(format!("line {}: {e}", lineno + 1))
                    })?;
                match rec.label {
                    Some(l) => values.push(l),
                    None => failures += 1,
                }
            }
            let counts = metrics::tally(&values).map_err(validation)?;
            let report = metrics::QaReport::new(args.method.clone(), counts, failures);
            (
                report.render_text(),
                serde_json::to_string_pretty(&report).map_err(runtime)?,
            )
        }
        (None, Some(ann)) => {
            require_file(ann, "annotation file")?;
            let records = ingest_annotations(ann).map_err(validation)?;
            let counts = experiments::tally_recast(&records).map_err(validation)?;
            let follow_ups: Vec<bool> = records.iter().map(|r| r.follow_up).collect();
            let rate = metrics::follow_up_rate(&follow_ups).ok();
            let report = RecastReport::new(args.method.clone(), counts, rate);
            (
                report.render_text(),
                serde_json::to_string_pretty(&report).map_err(runtime)?,
            )
        }
        _ => {
            return Err(CliError::Validation(
                "metrics needs exactly one of --labels or --annotations".into(),
            ))
        }
    };
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(runtime)?;
        fs::write(dir.join("report.txt"), &text).map_err(runtime)?;
        fs::write(dir.join("report.json"), &json).map_err(runtime)?;
        write_manifest(dir, "metrics", &args)?;
    }
    print!("{text}");
    Ok(())
}
