use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sre_core::backends::Mode;
use sre_core::config::{BackendKind, RunConfig};
use sre_core::dataset::{ingest_dataset, DatasetFormat, QueryRecord};
use sre_core::estimators::Method;
use sre_core::pipeline::{build_backend, run_experiment, RunSummary};
use sre_core::report::write_report;
use sre_core::sweep::{run_sweep, SweepGrid};
use sre_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_INGEST: u8 = 3;
const EXIT_FAILURES: u8 = 4;

#[derive(Parser)]
#[command(
    name = "sre",
    version,
    about = "Hallucination detection by semantic reformulation entropy"
)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dataset to question JSONL, optionally subsampled.
    Ingest(IngestArgs),
    /// Run the pipeline over a dataset, resuming an existing output directory.
    Run(RunArgs),
    /// Run the pipeline over a parameter grid.
    Sweep(SweepArgs),
    /// Compute metric tables for a finished run.
    Report(ReportArgs),
    /// Run in record mode, appending every backend response to a fixture store.
    RecordFixtures(RunArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// squad_v2, triviaqa or generic.
    #[arg(long, default_value = "generic")]
    format: String,
    #[arg(long)]
    no_context: bool,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags given here take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Drop dataset contexts from prompts.
    #[arg(long)]
    no_context: bool,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated method names, e.g. SE,SRE_SR_HSC.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Reformulations per question.
    #[arg(long = "n")]
    n: Option<usize>,
    /// Answers per reformulation.
    #[arg(long = "k")]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    tau_emb: Option<f64>,
    #[arg(long)]
    tau_nli: Option<f64>,
    #[arg(long)]
    tau_contra: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Also sample answers for the original question.
    #[arg(long)]
    include_original: bool,
    /// Gold labels by exact normalized match instead of containment.
    #[arg(long)]
    exact_match: bool,
    #[arg(long)]
    reformulation_prompt: Option<PathBuf>,
    #[arg(long)]
    fewshot: Option<PathBuf>,
    /// http or synthetic.
    #[arg(long)]
    backend: Option<String>,
    /// World file for the synthetic backend.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    chat_model: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    /// Embedding model for answers, if different from --embed-model.
    #[arg(long)]
    answer_embed_model: Option<String>,
    #[arg(long)]
    chat_url: Option<String>,
    #[arg(long)]
    embed_url: Option<String>,
    #[arg(long)]
    nli_url: Option<String>,
    /// live, record or replay.
    #[arg(long)]
    mode: Option<String>,
    /// Fixture store for record and replay.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    grid_n: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    grid_k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    grid_t: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_tau_emb: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_tau_nli: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    grid_delta: Vec<f64>,
    /// Method whose metrics fill the sweep table.
    #[arg(long, default_value = "SRE_SR_HSC")]
    metric: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding results.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// Where to write the tables; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        let d = &mut cfg.dataset;
        if let Some(p) = &self.dataset {
            d.path = Some(p.clone());
        }
        if let Some(f) = &self.format {
            d.format = f.parse()?;
        }
        if self.no_context {
            d.use_context = false;
        }
        if self.sample_size.is_some() {
            d.sample_size = self.sample_size;
        }
        if let Some(s) = self.seed {
            d.seed = s;
        }
        if let Some(ms) = &self.methods {
            cfg.methods = ms.iter().map(|m| m.trim().parse()).collect::<Result<_, _>>()?;
        }
        let r = &mut cfg.reformulation;
        r.target_count = self.n.unwrap_or(r.target_count);
        r.tau_min = self.tau_min.unwrap_or(r.tau_min);
        r.tau_max = self.tau_max.unwrap_or(r.tau_max);
        r.include_original |= self.include_original;
        let s = &mut cfg.sampler;
        s.samples_per_input = self.k.unwrap_or(s.samples_per_input);
        s.temperature = self.temperature.unwrap_or(s.temperature);
        s.gold.exact_match |= self.exact_match;
        let h = &mut cfg.hsc;
        h.tau_emb = self.tau_emb.unwrap_or(h.tau_emb);
        h.tau_nli = self.tau_nli.unwrap_or(h.tau_nli);
        h.tau_contra = self.tau_contra.unwrap_or(h.tau_contra);
        h.lambda = self.lambda.unwrap_or(h.lambda);
        h.delta = self.delta.unwrap_or(h.delta);
        if let Some(p) = &self.reformulation_prompt {
            cfg.load_reformulation_prompt(p)?;
        }
        if let Some(p) = &self.fewshot {
            cfg.load_fewshot(p)?;
        }
        let b = &mut cfg.backend;
        if let Some(kind) = &self.backend {
            b.kind = match kind.as_str() {
                "http" => BackendKind::Http,
                "synthetic" => BackendKind::Synthetic,
                other => {
                    return Err(config_err(format!(
                        "unknown backend {other:?} (expected http or synthetic)"
                    )))
                }
            };
        }
        if let Some(w) = &self.world {
            b.world = Some(w.clone());
            if self.backend.is_none() {
                b.kind = BackendKind::Synthetic;
            }
        }
        if let Some(m) = &self.chat_model {
            b.chat_model = m.clone();
        }
        if let Some(m) = &self.embed_model {
            b.embed_model = m.clone();
        }
        if let Some(m) = &self.answer_embed_model {
            b.answer_embed_model = Some(m.clone());
        }
        if let Some(u) = &self.chat_url {
            b.http.chat_url = Some(u.clone());
        }
        if let Some(u) = &self.embed_url {
            b.http.embed_url = Some(u.clone());
        }
        if let Some(u) = &self.nli_url {
            b.http.nli_url = Some(u.clone());
        }
        if let Some(m) = &self.mode {
            b.mode = m.parse::<Mode>().map_err(config_err)?;
        }
        if let Some(f) = &self.fixtures {
            b.fixtures = Some(f.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn load_questions(cfg: &RunConfig) -> Result<Vec<QueryRecord>, Error> {
    let d = &cfg.dataset;
    let path = d
        .path
        .as_ref()
        .ok_or_else(|| config_err("no dataset given (--dataset)"))?;
    ingest_dataset(path, d.format, d.use_context, d.sample_size, d.seed)
}

/// Exit status for a finished run.
fn run_status(cfg: &RunConfig, summaries: &[RunSummary]) -> u8 {
    let mut status = 0;
    for s in summaries {
        println!(
            "questions {}: completed {}, resumed {}, failed {}",
            s.total, s.completed, s.resumed, s.failed
        );
        if s.failure_rate() > cfg.max_failure_rate {
            eprintln!(
                "error: {:.1}% of questions failed (limit {:.1}%)",
                100.0 * s.failure_rate(),
                100.0 * cfg.max_failure_rate
            );
            status = EXIT_FAILURES;
        }
        if cfg.backend.mode == Mode::Replay && s.fixture_misses > 0 {
            eprintln!("error: {} questions missed the fixture store", s.fixture_misses);
            status = EXIT_FAILURES;
        }
    }
    status
}

fn cmd_ingest(args: &IngestArgs) -> Result<u8, Error> {
    let format: DatasetFormat = args.format.parse()?;
    let records = ingest_dataset(&args.dataset, format, !args.no_context, args.sample_size, args.seed)?;
    write_jsonl(&args.out, &records)?;
    println!("wrote {} questions to {}", records.len(), args.out.display());
    Ok(0)
}

fn write_jsonl(path: &Path, records: &[QueryRecord]) -> Result<(), Error> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn cmd_run(args: &RunArgs, force_record: bool) -> Result<u8, Error> {
    let mut cfg = args.resolve()?;
    if force_record {
        cfg.backend.mode = Mode::Record;
    }
    cfg.validate()?;
    let questions = load_questions(&cfg)?;
    let backend = build_backend(&cfg.backend)?;
    let summary = run_experiment(&cfg, &questions, backend.as_ref())?;
    if force_record {
        println!("fixture store holds {} responses", backend.store_len());
    }
    Ok(run_status(&cfg, &[summary]))
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8, Error> {
    let cfg = args.run.resolve()?;
    cfg.validate()?;
    let method: Method = args.metric.parse()?;
    let grid = SweepGrid {
        n: args.grid_n.clone(),
        k: args.grid_k.clone(),
        t: args.grid_t.clone(),
        tau_emb: args.grid_tau_emb.clone(),
        tau_nli: args.grid_tau_nli.clone(),
        lambda: args.grid_lambda.clone(),
        delta: args.grid_delta.clone(),
    };
    let questions = load_questions(&cfg)?;
    let backend = build_backend(&cfg.backend)?;
    let (rows, summaries) = run_sweep(&cfg, &grid, method, &questions, backend.as_ref())?;
    println!(
        "{} grid points written to {}",
        rows.len(),
        cfg.output_dir.join("sweep.csv").display()
    );
    Ok(run_status(&cfg, &summaries))
}

fn cmd_report(args: &ReportArgs) -> Result<u8, Error> {
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let report = write_report(&args.run, &out)?;
    for m in &report.metrics {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<20} AU {}  AR {}  F1@Best {}  (pos {}, neg {})",
            m.method.to_string(),
            f(m.au),
            f(m.ar),
            f(m.f1_best),
            m.n_pos,
            m.n_neg
        );
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Ingest { .. } => EXIT_INGEST,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Run(a) => cmd_run(a, false),
        Command::RecordFixtures(a) => cmd_run(a, true),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
