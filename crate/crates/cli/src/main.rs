//! `metatemplate` command-line pipeline.
//!
//! Exit codes: 0 ok, 1 validation or usage, 2 I/O, 3 remote-client failure.

mod manifest;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use metatemplate::augment::{self, AssignMode, AugmentPolicy, TurnScope};
use metatemplate::eval::{
    self, AnswerExtractor, EmbeddingScorer, HttpClient, HttpClientConfig, LexicalScorer,
    MockClient, ModelClient, ReplayClient, RunOptions, SimilarityScorer,
};
use metatemplate::grammar::Diagnostic;
use metatemplate::sampler::sample_distinct_prefix;
use metatemplate::{Error, TemplateSet, TemplateSpace, ValidationOptions};

use crate::manifest::Manifest;

#[derive(Parser)]
#[command(name = "metatemplate", version, about = "Generate, apply and evaluate instruction templates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct GrammarArgs {
    /// Grammar file; the bundled default grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Reject unknown keys and unreferenced synonym sets.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a grammar file.
    Validate {
        #[command(flatten)]
        grammar: GrammarArgs,
        /// Also write the diagnostics here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Print template counts per meta template and in total.
    Count {
        #[command(flatten)]
        grammar: GrammarArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Draw a set of distinct templates.
    Sample {
        #[command(flatten)]
        grammar: GrammarArgs,
        #[arg(long)]
        scale: u64,
        #[arg(long)]
        seed: u64,
        /// Draw this many and keep the first `scale`, so sets sharing a seed
        /// and pool are nested.
        #[arg(long)]
        prefix_of: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Rewrite an instruction-tuning corpus with a template set.
    Augment {
        /// Corpus (JSON array of conversation records).
        #[arg(long = "in")]
        input: PathBuf,
        /// Template set written by `sample`.
        #[arg(long)]
        templates: PathBuf,
        #[arg(long, value_enum, default_value = "random")]
        policy: PolicyArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "first")]
        turns: TurnsArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a model on a templated multiple-choice benchmark.
    Eval {
        /// Items, one JSON object per line.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        /// Report path; a CSV twin is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Raw model outputs; defaults to `<out>.raw.jsonl`. Reused on rerun.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Remote model endpoint.
        #[arg(long, conflicts_with_all = ["replay", "mock_answer"])]
        endpoint: Option<String>,
        /// Answer from a recorded raw-output file instead of a model.
        #[arg(long, conflicts_with = "mock_answer")]
        replay: Option<PathBuf>,
        /// Answer every prompt with this text.
        #[arg(long)]
        mock_answer: Option<String>,
        /// Embeddings endpoint for the similarity fallback; lexical otherwise.
        #[arg(long)]
        embeddings_endpoint: Option<String>,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 3)]
        retries: u32,
        #[arg(long, default_value_t = 60)]
        timeout_secs: u64,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Random,
    RoundRobin,
}

#[derive(Clone, Copy, ValueEnum)]
enum TurnsArg {
    First,
    All,
}

/// Failure carrying its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn validation(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 1,
            error: error.into(),
        }
    }

    fn io(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 2,
            Error::Client { .. } | Error::Scorer(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if let Some(Error::Invalid(diags)) = f.error.downcast_ref::<Error>() {
                for d in diags {
                    eprintln!("{d}");
                }
            }
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// The error and its causes, skipping causes already quoted in the message.
fn describe(error: &anyhow::Error) -> String {
    let mut text = error.to_string();
    for cause in error.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text.push_str(": ");
            text.push_str(&c);
        }
    }
    text
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Validate {
            grammar,
            out,
            overwrite,
        } => cmd_validate(&grammar, out.as_deref(), overwrite),
        Command::Count {
            grammar,
            out,
            overwrite,
        } => cmd_count(&grammar, out.as_deref(), overwrite),
        Command::Sample {
            grammar,
            scale,
            seed,
            prefix_of,
            out,
            overwrite,
        } => cmd_sample(&grammar, scale, seed, prefix_of, &out, overwrite),
        Command::Augment {
            input,
            templates,
            policy,
            seed,
            turns,
            out,
            overwrite,
        } => cmd_augment(&input, &templates, policy, seed, turns, &out, overwrite),
        Command::Eval {
            input,
            templates,
            out,
            raw,
            endpoint,
            replay,
            mock_answer,
            embeddings_endpoint,
            concurrency,
            retries,
            timeout_secs,
            image_root,
            overwrite,
        } => {
            let timeout = Duration::from_secs(timeout_secs);
            let client: Box<dyn ModelClient> = match (endpoint, replay, mock_answer) {
                (Some(url), None, None) => Box::new(
                    HttpClient::new(HttpClientConfig {
                        endpoint: url,
                        timeout,
                        image_root: None,
                    })
                    .map_err(|e| Failure {
                        code: 3,
                        error: e.into(),
                    })?,
                ),
                (None, Some(path), None) => Box::new(ReplayClient::load(&path)?),
                (None, None, Some(text)) => Box::new(MockClient::constant(text)),
                _ => {
                    return Err(Failure::validation(anyhow::anyhow!(
                        "exactly one of --endpoint, --replay or --mock-answer is required"
                    )))
                }
            };
            let scorer: Box<dyn SimilarityScorer> = match embeddings_endpoint {
                Some(url) => Box::new(EmbeddingScorer::new(url, timeout).map_err(|e| Failure {
                    code: 3,
                    error: e.into(),
                })?),
                None => Box::new(LexicalScorer),
            };
            let raw = raw.unwrap_or_else(|| with_suffix(&out, ".raw.jsonl"));
            let options = RunOptions {
                raw_path: raw,
                concurrency,
                max_retries: retries,
                retry_backoff: Duration::from_millis(500),
                image_root,
            };
            cmd_eval(&input, &templates, &out, client.as_ref(), scorer, &options, overwrite)
        }
    }
}

fn load_space(args: &GrammarArgs) -> Result<TemplateSpace, Failure> {
    match &args.grammar {
        Some(path) => Ok(TemplateSpace::load(path, args.strict)?),
        None => Ok(TemplateSpace::default_space()),
    }
}

fn grammar_input(args: &GrammarArgs) -> Vec<PathBuf> {
    args.grammar.iter().cloned().collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn guard_output(path: &Path, overwrite: bool) -> CmdResult {
    if path.exists() && !overwrite {
        return Err(Failure::io(anyhow::anyhow!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::io)
}

fn report_diagnostics(diags: &[Diagnostic]) -> String {
    let mut text = String::new();
    for d in diags {
        writeln!(text, "{d}").unwrap();
    }
    text
}

fn cmd_validate(args: &GrammarArgs, out: Option<&Path>, overwrite: bool) -> CmdResult {
    if let Some(out) = out {
        guard_output(out, overwrite)?;
    }
    let space = load_space(args)?;
    let diags = space.validate(ValidationOptions {
        strict: args.strict,
        check_collisions: true,
    });
    let text = report_diagnostics(&diags);
    eprint!("{text}");
    if let Some(out) = out {
        write_file(out, &text)?;
        Manifest::new("validate")
            .inputs(&grammar_input(args))
            .flag("strict", args.strict)
            .write(out)?;
    }
    if diags.iter().any(Diagnostic::is_error) {
        return Err(Failure::validation(anyhow::anyhow!(
            "grammar has {} error(s)",
            diags.iter().filter(|d| d.is_error()).count()
        )));
    }
    println!(
        "ok: {} meta templates, {} templates",
        space.grammar.meta_count(),
        space.total()
    );
    Ok(())
}

fn cmd_count(args: &GrammarArgs, out: Option<&Path>, overwrite: bool) -> CmdResult {
    if let Some(out) = out {
        guard_output(out, overwrite)?;
    }
    let space = load_space(args)?;
    let diags = space.validate(ValidationOptions {
        strict: args.strict,
        check_collisions: false,
    });
    if diags.iter().any(Diagnostic::is_error) {
        return Err(Error::Invalid(diags).into());
    }
    let mut counts = space.meta_counts()?;
    counts.sort_by(|a, b| a.0.cmp(b.0));
    let mut text = String::new();
    for (id, n) in &counts {
        writeln!(text, "{id}\t{n}").unwrap();
    }
    writeln!(text, "total\t{}", space.total()).unwrap();
    print!("{text}");
    if let Some(out) = out {
        write_file(out, &text)?;
        Manifest::new("count").inputs(&grammar_input(args)).write(out)?;
    }
    Ok(())
}

fn cmd_sample(
    args: &GrammarArgs,
    scale: u64,
    seed: u64,
    prefix_of: Option<u64>,
    out: &Path,
    overwrite: bool,
) -> CmdResult {
    guard_output(out, overwrite)?;
    let space = load_space(args)?;
    let set = sample_distinct_prefix(
        &space.tree,
        &space.grammar,
        scale,
        prefix_of.unwrap_or(scale),
        seed,
    )?;
    set.save(out)?;
    let mut m = Manifest::new("sample")
        .inputs(&grammar_input(args))
        .seed(seed)
        .value("scale", scale)
        .value("total", set.total);
    if let Some(pool) = prefix_of {
        m = m.value("prefix_of", pool);
    }
    m.write(out)?;
    eprintln!("wrote {} templates (of {}) to {}", set.len(), set.total, out.display());
    Ok(())
}

fn cmd_augment(
    input: &Path,
    templates: &Path,
    policy: PolicyArg,
    seed: Option<u64>,
    turns: TurnsArg,
    out: &Path,
    overwrite: bool,
) -> CmdResult {
    let mode = match policy {
        PolicyArg::Random => AssignMode::PerRecordRandom,
        PolicyArg::RoundRobin => AssignMode::RoundRobin,
    };
    if mode == AssignMode::PerRecordRandom && seed.is_none() {
        return Err(Failure::validation(anyhow::anyhow!(
            "--policy random requires --seed"
        )));
    }
    let policy = AugmentPolicy {
        mode,
        seed,
        turns: match turns {
            TurnsArg::First => TurnScope::FirstHuman,
            TurnsArg::All => TurnScope::AllHuman,
        },
    };
    guard_output(out, overwrite)?;
    let set = TemplateSet::load(templates)?;
    let corpus = augment::load_corpus(input)?;
    let augmented = augment::apply_templates(&corpus.records, &set, &policy)?;
    augment::save_corpus(out, &augmented)?;
    if !corpus.rejects.is_empty() {
        let path = with_suffix(out, ".rejects.jsonl");
        let f = File::create(&path)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::io)?;
        augment::write_rejects(&corpus.rejects, BufWriter::new(f))?;
        eprintln!("{} malformed record(s) listed in {}", corpus.rejects.len(), path.display());
    }
    let mut m = Manifest::new("augment")
        .inputs(&[input.to_path_buf(), templates.to_path_buf()])
        .value(
            "policy",
            match mode {
                AssignMode::PerRecordRandom => "random",
                AssignMode::RoundRobin => "round-robin",
            },
        )
        .value(
            "turns",
            match policy.turns {
                TurnScope::FirstHuman => "first",
                TurnScope::AllHuman => "all",
            },
        )
        .value("records", augmented.len());
    if let Some(seed) = seed {
        m = m.seed(seed);
    }
    m.write(out)?;
    println!(
        "records in: {}, records out: {} (cardinality preserved)",
        corpus.records.len(),
        augmented.len()
    );
    Ok(())
}

fn cmd_eval(
    input: &Path,
    templates: &Path,
    out: &Path,
    client: &dyn ModelClient,
    scorer: Box<dyn SimilarityScorer>,
    options: &RunOptions,
    overwrite: bool,
) -> CmdResult {
    let csv = out.with_extension("csv");
    guard_output(out, overwrite)?;
    guard_output(&csv, overwrite)?;
    let set = TemplateSet::load(templates)?;
    let loaded = eval::load_items(input)?;
    if loaded.skipped_multi_image > 0 {
        eprintln!("skipped {} multi-image item(s)", loaded.skipped_multi_image);
    }
    let extractor = AnswerExtractor::new(scorer);
    let report = eval::run_eval(&loaded.items, &set, client, &extractor, options)?;

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(out, &(json + "\n"))?;
    let f = File::create(&csv)
        .with_context(|| format!("writing {}", csv.display()))
        .map_err(Failure::io)?;
    let mut w = BufWriter::new(f);
    report
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", csv.display()))
        .map_err(Failure::io)?;
    Manifest::new("eval")
        .inputs(&[input.to_path_buf(), templates.to_path_buf()])
        .value("raw_outputs", options.raw_path.display().to_string())
        .value("empty_outputs", extractor.empty_outputs())
        .write(out)?;
    println!(
        "items: {}, templates: {}, average: {:.4}, max-min: {:.4}",
        report.n_items, report.n_templates, report.average, report.max_min
    );
    Ok(())
}
