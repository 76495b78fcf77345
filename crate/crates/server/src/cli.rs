//! Command-line entry points. Exit codes: 0 success, 1 other failure,
//! 2 schema error, 3 I/O error.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use pqa_core::config::{load_config, PipelineConfig};
use pqa_core::eval::emit_report;
use pqa_core::exec::Execution;
use pqa_core::fixtures::{toy_catalog, toy_policies};
use pqa_core::generation::{FewShotLibrary, TemplateError};
use pqa_core::ingest::{parse_catalog, run_eval_job, IngestError};
use pqa_core::intent::{load_intent_dataset, train_softmax, SoftmaxIntentModel};
use pqa_core::model::Session;
use pqa_core::pipeline::{Pipeline, Providers};
use pqa_core::retrieval::{
    load_recall_cases, recall_at_k, EmbeddingScorer, LexicalOverlapScorer, PolicyStore,
    SnippetScorer,
};
use pqa_core::store::SessionStore;
use pqa_core::sts::{
    load_triplets, train_triplet, HashedBowEmbedder, LinearEmbedder, TripletTrainConfig,
};

use crate::api::{router, AppState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Schema(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => CliError::Io(e.to_string()),
            IngestError::Schema(_) => CliError::Schema(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

fn joined<E: ToString>(path: &Path, errors: &[E]) -> CliError {
    let lines: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
    CliError::Schema(format!("{}: {}", path.display(), lines.join("; ")))
}

#[derive(Debug, Parser)]
#[command(
    name = "pqa",
    version,
    about = "Context-aware product question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct PipelineOpts {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Catalog JSONL; the bundled toy catalog is used when omitted.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Policy JSONL; the bundled toy policies are used when omitted.
    #[arg(long)]
    pub policies: Option<PathBuf>,
    /// Directory of per-intent few-shot templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Softmax intent model written by `train-intent`.
    #[arg(long)]
    pub intent_model: Option<PathBuf>,
    /// Linear embedder written by `train-sts`.
    #[arg(long)]
    pub embedder_model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve {
        #[command(flatten)]
        pipeline: PipelineOpts,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Append-only session log; sessions live in memory only when omitted.
        #[arg(long)]
        session_log: Option<PathBuf>,
    },
    /// Parse a catalog file and print the ingest report.
    Ingest { file: PathBuf },
    /// Interactive chat on top of a session fixture (a Session JSON document).
    Chat {
        session_fixture: PathBuf,
        #[command(flatten)]
        pipeline: PipelineOpts,
        /// Print the full turn trace as JSON after each answer.
        #[arg(long)]
        trace: bool,
    },
    /// Compute the metric report for a judgments file.
    Eval {
        judgments: PathBuf,
        /// json or table
        #[arg(long, default_value = "table")]
        format: String,
        /// Only report the overall row.
        #[arg(long)]
        overall_only: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Train the linear embedder on a triplet file.
    TrainSts {
        triplets: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train the softmax intent classifier on a labelled dataset.
    TrainIntent {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Recall@k of the built-in scorers (and a trained embedder) on benchmark cases.
    RecallBench {
        cases: PathBuf,
        #[arg(long)]
        k: usize,
        /// Linear embedder written by `train-sts`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

pub fn build_pipeline(opts: &PipelineOpts, store: SessionStore) -> Result<Pipeline, CliError> {
    let config = match &opts.config {
        Some(p) => {
            load_config(&read(p)?).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    let catalog = match &opts.catalog {
        Some(p) => {
            let (index, report) = parse_catalog(&read(p)?);
            if !report.errors.is_empty() {
                eprintln!(
                    "{}: skipped {} bad line(s)",
                    p.display(),
                    report.errors.len()
                );
            }
            index
        }
        None => toy_catalog(),
    };
    let policies = match &opts.policies {
        Some(p) => PolicyStore::from_jsonl(&read(p)?)
            .map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?,
        None => toy_policies(),
    };
    let mut providers = Providers::from_config(&config);
    if let Some(p) = &opts.intent_model {
        providers.intent = Box::new(parse_json::<SoftmaxIntentModel>(p)?);
    }
    if let Some(p) = &opts.embedder_model {
        providers.embedder = Box::new(parse_json::<LinearEmbedder>(p)?);
    }
    let mut pipeline = Pipeline::new(config, catalog, Arc::new(policies), store, providers);
    if let Some(dir) = &opts.templates {
        let library = FewShotLibrary::load_dir(dir).map_err(|e| match e {
            TemplateError::Io { .. } => CliError::Io(e.to_string()),
            TemplateError::Missing(_) => CliError::Schema(e.to_string()),
        })?;
        pipeline = pipeline.with_fewshot(library);
    }
    Ok(pipeline)
}

fn serve(pipeline: Pipeline, addr: SocketAddr) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    runtime.block_on(async move {
        let app = router(AppState {
            pipeline: Arc::new(pipeline),
            exec: Execution::default(),
        });
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Io(format!("bind {addr}: {e}")))?;
        eprintln!(
            "listening on http://{}",
            listener
                .local_addr()
                .map_err(|e| CliError::Io(e.to_string()))?
        );
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}

fn chat(
    fixture: &Path,
    opts: &PipelineOpts,
    trace: bool,
    input: impl BufRead,
    mut out: impl Write,
) -> Result<(), CliError> {
    let session: Session = parse_json(fixture)?;
    let store = SessionStore::in_memory();
    store
        .import(&session)
        .map_err(|e| CliError::Schema(e.to_string()))?;
    let pipeline = build_pipeline(opts, store)?;
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    for line in input.lines() {
        let query = line.map_err(io)?;
        if query.trim().is_empty() {
            continue;
        }
        match pipeline.handle_turn(&session.session_id, &query) {
            Ok(t) => {
                writeln!(out, "[{:?}] {}", t.response.kind, t.response.text).map_err(io)?;
                if trace {
                    writeln!(
                        out,
                        "{}",
                        serde_json::to_string(&t).expect("traces serialize")
                    )
                    .map_err(io)?;
                }
            }
            Err(e) => writeln!(out, "error: {e}").map_err(io)?,
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    match cli.command {
        Command::Serve {
            pipeline,
            addr,
            session_log,
        } => {
            let store = match &session_log {
                Some(p) => SessionStore::open(p).map_err(|e| match e {
                    pqa_core::store::StoreError::Io { .. } => CliError::Io(e.to_string()),
                    other => CliError::Schema(other.to_string()),
                })?,
                None => SessionStore::in_memory(),
            };
            serve(build_pipeline(&pipeline, store)?, addr)
        }
        Command::Ingest { file } => {
            let (index, report) = parse_catalog(&read(&file)?);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("reports serialize")
            );
            eprintln!("{} products indexed", index.len());
            if report.errors.is_empty() {
                Ok(())
            } else {
                Err(CliError::Schema(format!(
                    "{} bad line(s)",
                    report.errors.len()
                )))
            }
        }
        Command::Chat {
            session_fixture,
            pipeline,
            trace,
        } => chat(
            &session_fixture,
            &pipeline,
            trace,
            std::io::stdin().lock(),
            stdout.lock(),
        ),
        Command::Eval {
            judgments,
            format,
            overall_only,
            sequential,
        } => {
            let report = run_eval_job(&judgments, !overall_only, exec(sequential))?;
            let text = emit_report(&report, &format).map_err(|e| CliError::Other(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
        Command::TrainSts {
            triplets,
            out,
            epochs,
            learning_rate,
            dim,
            alpha,
        } => {
            let data = load_triplets(&read(&triplets)?).map_err(|e| joined(&triplets, &e))?;
            let defaults = TripletTrainConfig::default();
            let cfg = TripletTrainConfig {
                dim: dim.unwrap_or(defaults.dim),
                alpha: alpha.unwrap_or(defaults.alpha),
                epochs: epochs.unwrap_or(defaults.epochs),
                learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
            };
            let (model, report) = train_triplet(&data, &cfg, Execution::default())
                .map_err(|e| CliError::Other(e.to_string()))?;
            if let Some(out) = &out {
                write(
                    out,
                    &serde_json::to_string(&model).expect("models serialize"),
                )?;
            }
            let summary = json!({
                "triplets": data.len(),
                "epochs_run": report.mean_losses.len(),
                "initial_mean_loss": report.mean_losses.first(),
                "final_mean_loss": report.mean_losses.last(),
            });
            println!("{summary}");
            Ok(())
        }
        Command::TrainIntent {
            dataset,
            out,
            epochs,
            learning_rate,
            seed,
        } => {
            let data = load_intent_dataset(&read(&dataset)?).map_err(|e| joined(&dataset, &e))?;
            let model = train_softmax(&data, epochs, learning_rate, seed)
                .map_err(|e| CliError::Schema(e.to_string()))?;
            let correct = data
                .iter()
                .filter(|(text, label)| model.predict(text).argmax().as_str() == label)
                .count();
            if let Some(out) = &out {
                write(
                    out,
                    &serde_json::to_string(&model).expect("models serialize"),
                )?;
            }
            println!(
                "{}",
                json!({ "examples": data.len(), "training_accuracy": correct as f64 / data.len() as f64 })
            );
            Ok(())
        }
        Command::RecallBench {
            cases,
            k,
            model,
            sequential,
        } => {
            let data = load_recall_cases(&read(&cases)?).map_err(|(line, msg)| {
                CliError::Schema(format!("{}: line {line}: {msg}", cases.display()))
            })?;
            let bow = HashedBowEmbedder::reference(TripletTrainConfig::default().dim);
            let trained = model
                .as_deref()
                .map(parse_json::<LinearEmbedder>)
                .transpose()?;
            let bow_scorer = EmbeddingScorer(&bow);
            let mut scorers: Vec<(&str, &dyn SnippetScorer)> = vec![
                ("hashed_bow", &bow_scorer),
                ("lexical_overlap", &LexicalOverlapScorer),
            ];
            let trained_scorer = trained.as_ref().map(|m| EmbeddingScorer(m));
            if let Some(s) = &trained_scorer {
                scorers.push(("trained", s));
            }
            let mut results = serde_json::Map::new();
            for (name, scorer) in scorers {
                let r = recall_at_k(&data, scorer, k, exec(sequential))
                    .map_err(|e| CliError::Schema(e.to_string()))?;
                results.insert(name.into(), json!(r));
            }
            println!(
                "{}",
                json!({ "k": k, "cases": data.len(), "recall": results })
            );
            Ok(())
        }
    }
}
