//! Command-line front end (`ddl`).
//!
//! Every run flag has a config-file counterpart; flags win over the file,
//! the file over built-in defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::consolidation::Strategy;
use crate::dape::PromptHistory;
use crate::evalcal::{improvement_table, kde, KdeSplit};
use crate::lvlm_client::{
    ChatClient, ChatMetaOptimizer, ClientError, Grounder, HttpGrounder, MetaOptimizer,
    MetaPromptKind, Proposal,
};
use crate::pipeline::artifacts::{
    self, history_jsonl, load_failures, load_history, load_predictions, load_report, report_json,
};
use crate::pipeline::synthetic::{mock_models, synthetic_corpus, CorpusSpec};
use crate::pipeline::{
    evaluate, load_manifest, run_ddl, with_strategy, ConfigError, ConfigOverrides, DatasetManifest,
    EvaluationReport, PipelineError, ReportContext, RunConfig, Runner, UncertaintyMode,
};

#[derive(Debug, Parser)]
#[command(name = "ddl", version, about = "Multi-view verified visual grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for an instruction prompt on the dev split.
    Evolve(RunArgs),
    /// Ground and consolidate the test split; writes all run artifacts.
    Ground(RunArgs),
    /// Recompute metrics from prediction records and a manifest.
    Eval(EvalArgs),
    /// Calibration and prompt-score densities from a run directory.
    Report(ReportArgs),
    /// Self-contained simulated run on a generated corpus.
    MockDemo(DemoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub target_url: Option<String>,
    #[arg(long)]
    pub target_model: Option<String>,
    #[arg(long)]
    pub meta_url: Option<String>,
    #[arg(long)]
    pub meta_model: Option<String>,
    /// Number of perturbed views.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub omega1: Option<f64>,
    #[arg(long)]
    pub omega2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_generations: Option<usize>,
    /// RHC, SA, WA or DBSCAN.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// visual or linguistic.
    #[arg(long)]
    pub uncertainty: Option<UncertaintyMode>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip prompt search and use this instruction.
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Score candidate prompts through the full multi-view pipeline.
    #[arg(long)]
    pub score_with_pipeline: bool,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// Use the built-in simulator instead of remote models.
    #[arg(long)]
    pub mock: bool,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub hallucination: Option<f64>,
    #[arg(long)]
    pub miss: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Line-delimited JSON manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: RunFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// predictions.jsonl, or a run directory containing it.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Where to write the report (printed only when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Recompute metrics against this manifest instead of reading report.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write the analysis as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "ddl-demo")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 24)]
    pub n_test: usize,
    #[arg(long, default_value_t = 4.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0.2)]
    pub hallucination: f64,
    #[arg(long, default_value_t = 4)]
    pub max_generations: usize,
}

/// Usage problems exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(ConfigError::Invalid(msg)) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| {
        CliError::Run(PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Layer defaults, the config file and flags.
pub fn resolve_config(flags: &RunFlags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Run(e.into()))?,
        None => RunConfig::default(),
    };
    let prompt = match (&flags.prompt, &flags.prompt_file) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(path)) => Some(read_text(path)?),
        (None, None) => None,
    };
    ConfigOverrides {
        target_url: flags.target_url.clone(),
        target_model: flags.target_model.clone(),
        meta_url: flags.meta_url.clone(),
        meta_model: flags.meta_model.clone(),
        views: flags.views,
        tau: flags.tau,
        omega1: flags.omega1,
        omega2: flags.omega2,
        seed: flags.seed,
        max_generations: flags.max_generations,
        strategy: flags.strategy,
        uncertainty: flags.uncertainty,
        parallelism: flags.parallelism,
        output_dir: flags.out.clone(),
        prompt,
        score_with_pipeline: flags.score_with_pipeline.then_some(true),
        max_tokens: flags.max_tokens,
        timeout_secs: flags.timeout,
        max_retries: flags.max_retries,
        mock: flags.mock.then_some(true),
        jitter_px: flags.jitter,
        hallucination_prob: flags.hallucination,
        miss_prob: flags.miss,
    }
    .apply(&mut cfg);
    cfg.validate()
        .map_err(|e| CliError::from(PipelineError::from(e)))?;
    Ok(cfg)
}

/// Stand-in when no meta endpoint is configured and none is needed.
struct NoMeta;

impl MetaOptimizer for NoMeta {
    fn propose(&self, _: MetaPromptKind, _: &str) -> Result<Proposal, ClientError> {
        Err(ClientError::Transport("no meta endpoint configured".into()))
    }
}

type Models = (Box<dyn Grounder>, Box<dyn MetaOptimizer>);

fn build_models(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Models, CliError> {
    if let Some(settings) = &cfg.mock {
        let (g, m) = mock_models(manifest, cfg.effective_seed(), settings);
        return Ok((Box::new(g), Box::new(m)));
    }
    let client = |ep: &crate::lvlm_client::ModelEndpoint| {
        ChatClient::new(ep.clone()).map_err(|e| CliError::Usage(e.to_string()))
    };
    let target = cfg
        .target
        .as_ref()
        .ok_or_else(|| CliError::Usage("no target endpoint configured".into()))?;
    let grounder: Box<dyn Grounder> = Box::new(HttpGrounder::new(client(target)?));
    let meta: Box<dyn MetaOptimizer> = match &cfg.meta {
        Some(ep) => Box::new(ChatMetaOptimizer::new(client(ep)?)),
        None => Box::new(NoMeta),
    };
    let missing = manifest.missing_images();
    if let Some(first) = missing.first() {
        log::warn!(
            "{} manifest images not found (first: {}); they will be recorded as failures",
            missing.len(),
            first.image_path.display()
        );
    }
    Ok((grounder, meta))
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("ddl-run"))
}

fn write_file(path: PathBuf, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| {
            CliError::Run(PipelineError::Io {
                path: parent.to_path_buf(),
                source,
            })
        })?;
    }
    std::fs::write(&path, contents)
        .map_err(|source| CliError::Run(PipelineError::Io { path, source }))
}

fn print_report(report: &EvaluationReport) {
    println!("strategy   {} ({:?})", report.strategy, report.uncertainty);
    println!(
        "images     {} evaluated, {} failed of {}",
        report.n_evaluated, report.n_failed, report.n_images
    );
    println!("{}", report.map);
    match (&report.calibration, &report.calibration_note) {
        (Some(c), _) => print!("{}", c.render_text()),
        (None, Some(note)) => println!("calibration unavailable: {note}"),
        (None, None) => {}
    }
}

fn cmd_evolve(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.flags)?;
    let manifest = load_manifest(&args.manifest).map_err(PipelineError::from)?;
    let (grounder, meta) = build_models(&cfg, &manifest)?;
    let runner = Runner::new(&cfg, grounder.as_ref(), meta.as_ref())?;
    let selection = runner.select_prompt(&manifest)?;
    let dir = out_dir(&cfg);
    if let Some(history) = &selection.history {
        write_file(
            dir.join(artifacts::HISTORY_FILE),
            &history_jsonl(history, cfg.effective_seed(), runner.config_hash()),
        )?;
        println!(
            "{} prompts scored; best {:.4}",
            history.len(),
            history.best().score
        );
    }
    write_file(dir.join("best_prompt.txt"), &selection.prompt)?;
    println!("{}", selection.prompt.trim_end());
    Ok(())
}

fn cmd_ground(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args.flags)?;
    let manifest = load_manifest(&args.manifest).map_err(PipelineError::from)?;
    let (grounder, meta) = build_models(&cfg, &manifest)?;
    let run = run_ddl(&cfg, &manifest, grounder.as_ref(), meta.as_ref())?;
    let dir = out_dir(&cfg);
    run.persist(&dir)?;
    print_report(&run.report);
    info!("artifacts written to {}", dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest).map_err(PipelineError::from)?;
    let (pred_path, fail_path) = if args.predictions.is_dir() {
        (
            args.predictions.join(artifacts::PREDICTIONS_FILE),
            args.predictions.join(artifacts::FAILURES_FILE),
        )
    } else {
        let dir = args.predictions.parent().unwrap_or(Path::new("."));
        (args.predictions.clone(), dir.join(artifacts::FAILURES_FILE))
    };
    let predictions = load_predictions(&pred_path)?;
    let failures = load_failures(&fail_path)?;
    let (seed, hash, strategy) = predictions
        .first()
        .map(|p| (p.seed, p.config_hash.clone(), p.strategy))
        .unwrap_or((0, String::new(), Strategy::Rhc));
    let ctx = ReportContext {
        seed,
        config_hash: &hash,
        strategy,
        uncertainty: UncertaintyMode::Visual,
        prompt: "",
    };
    let report = evaluate(&ctx, &manifest, &predictions, &failures, None);
    print_report(&report);
    if let Some(out) = &args.out {
        write_file(out.clone(), &report_json(&report))?;
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let report = match &args.manifest {
        Some(m) => {
            let manifest = load_manifest(m).map_err(PipelineError::from)?;
            let predictions = load_predictions(args.run.join(artifacts::PREDICTIONS_FILE))?;
            let failures = load_failures(args.run.join(artifacts::FAILURES_FILE))?;
            let stored = load_report(args.run.join(artifacts::REPORT_FILE)).ok();
            let (seed, hash, strategy, uncertainty, prompt) = match &stored {
                Some(r) => (
                    r.seed,
                    r.config_hash.clone(),
                    r.strategy,
                    r.uncertainty,
                    r.prompt.clone(),
                ),
                None => (
                    0,
                    String::new(),
                    Strategy::Rhc,
                    UncertaintyMode::Visual,
                    String::new(),
                ),
            };
            let ctx = ReportContext {
                seed,
                config_hash: &hash,
                strategy,
                uncertainty,
                prompt: &prompt,
            };
            evaluate(&ctx, &manifest, &predictions, &failures, None)
        }
        None => load_report(args.run.join(artifacts::REPORT_FILE))?,
    };
    print_report(&report);

    let history_path = args.run.join(artifacts::HISTORY_FILE);
    let history: Option<PromptHistory> = match std::fs::metadata(&history_path) {
        Ok(m) if m.len() > 0 => Some(load_history(&history_path)?),
        _ => None,
    };
    let curves = history.as_ref().and_then(|h| {
        let scores: Vec<f64> = h.records().iter().map(|r| r.score).collect();
        match kde(&scores, KdeSplit::Median) {
            Ok(c) => Some(c),
            Err(e) => {
                println!("prompt-score density unavailable: {e}");
                None
            }
        }
    });
    for c in curves.iter().flatten() {
        let (peak_i, peak) =
            c.density.iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc },
            );
        println!(
            "density {:?}: n={} h={:.4} peak {:.4} at score {:.4}",
            c.label, c.n, c.bandwidth, peak, c.grid[peak_i]
        );
    }
    if let Some(path) = &args.json {
        let value = serde_json::json!({ "report": report, "kde": curves.unwrap_or_default() });
        write_file(
            path.clone(),
            &(serde_json::to_string_pretty(&value).expect("serializes") + "\n"),
        )?;
    }
    Ok(())
}

fn cmd_mock_demo(args: &DemoArgs) -> Result<(), CliError> {
    let manifest = synthetic_corpus(
        args.seed,
        &CorpusSpec {
            n_dev: args.n_dev,
            n_test: args.n_test,
            ..CorpusSpec::default()
        },
    );
    write_file(args.out.join("manifest.jsonl"), &manifest.to_jsonl())?;
    let mut cfg = RunConfig::mock(args.seed);
    cfg.max_generations = args.max_generations;
    if let Some(m) = cfg.mock.as_mut() {
        m.jitter_px = args.jitter;
        m.hallucination_prob = args.hallucination;
    }
    let settings = cfg.mock.expect("mock config");
    let (grounder, meta) = mock_models(&manifest, args.seed, &settings);
    let run = run_ddl(&cfg, &manifest, &grounder, &meta)?;
    run.persist(args.out.join("rhc"))?;
    print_report(&run.report);

    // Baseline with the same prompt, skipping the search.
    let mut sa_cfg = with_strategy(&cfg, Strategy::Sa);
    sa_cfg.prompt = Some(run.prompt.clone());
    let sa = run_ddl(&sa_cfg, &manifest, &grounder, &meta)?;
    sa.persist(args.out.join("sa"))?;
    println!("\nRHC vs SA:");
    for row in improvement_table(&sa.report.map, &run.report.map) {
        println!(
            "  {:<7} {:.4} -> {:.4}  {}",
            row.metric, row.baseline, row.treated, row.rendered
        );
    }
    println!("\nartifacts in {}", args.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Evolve(a) => cmd_evolve(a),
        Command::Ground(a) => cmd_ground(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::MockDemo(a) => cmd_mock_demo(a),
    }
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
