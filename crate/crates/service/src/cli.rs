use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use slc_core::cicero::parse_template;
use slc_core::concerto::parse_model;
use slc_core::pipeline::SystemClock;
use slc_core::qa::{BaselineExtractor, ChunkConfig};
use slc_core::retrieval::{load_library, MltParams, TemplateIndex};
use slc_core::tagger::{BaselineConfig, BaselineTagger, Threshold};
use slc_core::{ConversionJob, PipelineError};

use crate::api::{AppState, ServiceConfig, TaggerSetting};

#[derive(Debug, Parser)]
#[command(name = "slc", version, about = "Convert contract text into Cicero templates and Concerto data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Check a template library and print index statistics.
    Index {
        library: PathBuf,
    },
    /// Convert one contract with the baseline models.
    Convert(ConvertArgs),
    /// Inspect the template library.
    Templates {
        #[command(subcommand)]
        command: TemplatesCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum TemplatesCommand {
    List {
        #[arg(long, env = "SLC_LIBRARY", default_value = "library")]
        library: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SLC_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long, env = "SLC_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "SLC_PORT", default_value_t = 8080)]
    pub port: u16,
    /// Template library; defaults to `<data-dir>/library`.
    #[arg(long, env = "SLC_LIBRARY")]
    pub library: Option<PathBuf>,
    /// Tagger model server. Without it the baseline tagger is used.
    #[arg(long, env = "SLC_TAGGER_URL", conflicts_with = "gazetteer")]
    pub tagger_url: Option<String>,
    /// Baseline tagger configuration (JSON).
    #[arg(long, env = "SLC_GAZETTEER")]
    pub gazetteer: Option<PathBuf>,
    /// QA model server.
    #[arg(long, env = "SLC_QA_URL")]
    pub qa_url: Option<String>,
    #[arg(long, env = "SLC_THRESHOLD", default_value_t = 0.5)]
    pub threshold: f64,
    /// Model server timeout in seconds.
    #[arg(long, env = "SLC_TIMEOUT", default_value_t = 10)]
    pub timeout: u64,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub template: String,
    /// Answer key (JSON object of field or question to phrase).
    #[arg(long)]
    pub answers: Option<PathBuf>,
    /// Baseline tagger configuration (JSON).
    #[arg(long, env = "SLC_GAZETTEER")]
    pub gazetteer: Option<PathBuf>,
    #[arg(long, env = "SLC_LIBRARY", default_value = "library")]
    pub library: PathBuf,
    #[arg(long, env = "SLC_THRESHOLD", default_value_t = 0.5)]
    pub threshold: f64,
    /// Emit even if the instance fails validation.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit 1 for validation failures and runtime faults, 2 for bad input.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::UnknownTemplate(_)
            | PipelineError::EmptyDocument
            | PipelineError::Tagger(_)
            | PipelineError::Model(_)
            | PipelineError::Template(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn library(path: &Path) -> Result<TemplateIndex, CliError> {
    load_library(path, MltParams::default()).map_err(|e| CliError::Usage(e.to_string()))
}

fn threshold(value: f64) -> Result<Threshold, CliError> {
    Threshold::new(value).map_err(|e| CliError::Usage(e.to_string()))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn convert(args: &ConvertArgs) -> Result<ConversionJob, CliError> {
    let text = read_file(&args.file)?;
    let index = library(&args.library)?;
    let gazetteer: BaselineConfig = match &args.gazetteer {
        Some(path) => read_json(path)?,
        None => BaselineConfig::default(),
    };
    let answers: BTreeMap<String, String> = match &args.answers {
        Some(path) => read_json(path)?,
        None => BTreeMap::new(),
    };
    let tagger = BaselineTagger::new(gazetteer).map_err(|e| CliError::Usage(e.to_string()))?;
    let extractor = BaselineExtractor::new(answers);

    let mut job = ConversionJob::create(&text, &SystemClock)?;
    job.select_template(&index, &args.template)?;
    job.auto_mark(&tagger, threshold(args.threshold)?)?;
    job.auto_extract(&extractor, ChunkConfig::default())?;
    let output = job.emit_output(args.force, &SystemClock)?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::Failed(format!("{}: {e}", args.out.display())))?;
    write(&args.out.join("template.cicero"), &output.cicero_text)?;
    write(&args.out.join("instance.json"), &output.instance_json)?;
    let provenance = serde_json::to_string_pretty(&output.provenance).expect("provenance serializes");
    write(&args.out.join("provenance.json"), &provenance)?;
    for warning in &output.warnings {
        eprintln!("warning: {}: {}", warning.field, warning.message);
    }
    Ok(job)
}

/// Parses every template in the library and reports problems.
pub fn index(path: &Path) -> Result<String, CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!("{}: not a directory", path.display())));
    }
    let index = library(path)?;
    let mut problems = Vec::new();
    let mut records: Vec<_> = index.records().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    for record in records {
        if let Err(e) = parse_template(&record.cicero_text) {
            problems.push(format!("{}: template.cicero: {e}", record.id));
        }
        if let Err(e) = parse_model(&record.concerto_text) {
            problems.push(format!("{}: model.cto: {e}", record.id));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Failed(problems.join("\n")));
    }
    let stats = index.stats();
    Ok(format!(
        "{} templates, {} terms, average length {:.1}",
        stats.doc_count,
        stats.doc_frequencies.len(),
        stats.avg_doc_len
    ))
}

pub fn list_templates(path: &Path) -> Result<String, CliError> {
    let index = library(path)?;
    let mut rows: Vec<String> = index.records().map(|r| format!("{}\t{}", r.id, r.name)).collect();
    rows.sort();
    Ok(rows.into_iter().map(|r| r + "\n").collect())
}

fn serve(args: &ServeArgs) -> Result<(), CliError> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let mut config = ServiceConfig::new(&args.data_dir);
    config.library_dir = args.library.clone();
    config.threshold = threshold(args.threshold)?;
    config.timeout = Duration::from_secs(args.timeout);
    config.qa_url = args.qa_url.clone();
    config.tagger = match (&args.tagger_url, &args.gazetteer) {
        (Some(url), _) => TaggerSetting::Remote(url.clone()),
        (None, Some(path)) => TaggerSetting::Baseline(read_json(path)?),
        (None, None) => TaggerSetting::Baseline(BaselineConfig::default()),
    };
    let state = AppState::open(config).map_err(|e| CliError::Failed(format!("{}: {}", e.code, e.message)))?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Failed(format!("{addr}: {e}")))?;
        tracing::info!("listening on {addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        crate::serve(listener, Arc::new(state), shutdown)
            .await
            .map_err(|e| CliError::Failed(e.to_string()))
    })
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Serve(args) => serve(args).map(|()| String::new()),
        Command::Index { library } => index(library).map(|s| s + "\n"),
        Command::Convert(args) => convert(args).map(|job| {
            let out = job.output().expect("converted jobs are emitted");
            format!("{}\n", out.instance_json)
        }),
        Command::Templates {
            command: TemplatesCommand::List { library },
        } => list_templates(library),
    };
    match result {
        Ok(stdout) => {
            print!("{stdout}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (CliError::Usage(message) | CliError::Failed(message)) = &e;
            eprintln!("error: {message}");
            ExitCode::from(e.code())
        }
    }
}
