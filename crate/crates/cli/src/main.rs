//! Command-line entry point: evaluation runs, curation runs, log
//! analytics, and the RL kernel self-check.
//!
//! Exit codes: 0 on success, 1 when a run fails or a check fails, 2 for
//! configuration and usage errors.

mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{parse_dataset_flag, BackendKind, HarnessConfig};
use stts_core::analysis;
use stts_core::backend::{CompletionBackend, HttpBackend, HttpBackendConfig, ScriptedBackend};
use stts_core::bench;
use stts_core::curate;
use stts_core::evaluate::{self, RunConfig};
use stts_core::model::{EvaluationReport, PreferenceInstance};
use stts_core::prompt::TemplateSpec;
use stts_core::rlmath::{self, SelfCheckOptions};
use stts_core::trace::ReflectiveLexicon;

#[derive(Parser)]
#[command(
    name = "stts",
    version,
    about = "Test-time scaling harness for pairwise LLM judges"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Evaluate judge accuracy under budget-forced reflection
    Eval(EvalArgs),
    /// Curate supervision data by rejection sampling with reflection cycles
    Curate(CurateArgs),
    /// Compute analytics over an attempt log
    Analyze(AnalyzeArgs),
    /// Run the RL objective kernel self-checks
    RlCheck(RlCheckArgs),
}

#[derive(Args, Clone)]
struct SharedArgs {
    /// Config file (TOML); flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset spec `path=...,format=...,tag=...[,limit=N][,seed=N]`
    /// (repeatable; replaces config datasets when given)
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    /// Attempt budget (attempt 1 plus budget-1 forced reflections)
    #[arg(long)]
    budget: Option<u32>,
    /// Injection string spliced in place of the end-of-think marker
    #[arg(long)]
    injection: Option<String>,
    /// Concurrent episodes
    #[arg(long)]
    parallelism: Option<usize>,
    /// Output directory
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed forwarded to the backend
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Skip instances whose episodes are already in the log
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CurateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Reflection cycles after the first pass
    #[arg(long)]
    cycles: Option<u32>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Attempt log (JSONL) to analyze
    log: PathBuf,
    #[command(flatten)]
    shared: SharedArgs,
    /// Reflective-count bin edges, e.g. `0,1,5` (first must be 0)
    #[arg(long)]
    bins: Option<String>,
    /// Histogram bin width for length stats
    #[arg(long, default_value_t = 256)]
    bin_width: u64,
    /// Also emit the word-frequency table
    #[arg(long)]
    word_freq: bool,
    /// Reflective lexicon override file (one phrase per line)
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Args)]
struct RlCheckArgs {
    /// Seeded repetitions for the randomized checks
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Token count for gradient-check batches
    #[arg(long, default_value_t = 32)]
    tokens: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Columnar batch fixture to include in the checks
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Force one check to fail (test hook)
    #[arg(long, hide = true)]
    inject_failure: bool,
}

/// Usage problems exit 2; run failures exit 1.
enum CmdError {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl CmdError {
    fn code(&self) -> ExitCode {
        match self {
            CmdError::Usage(_) => ExitCode::from(2),
            CmdError::Run(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &anyhow::Error {
        match self {
            CmdError::Usage(e) | CmdError::Run(e) => e,
        }
    }
}

fn usage<T>(result: Result<T>) -> Result<T, CmdError> {
    result.map_err(CmdError::Usage)
}

fn run_err<T>(result: Result<T>) -> Result<T, CmdError> {
    result.map_err(CmdError::Run)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Commands::Eval(args) => cmd_eval(args),
        Commands::Curate(args) => cmd_curate(args),
        Commands::Analyze(args) => cmd_analyze(args),
        Commands::RlCheck(args) => cmd_rl_check(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {:#}", error.message());
            error.code()
        }
    }
}

fn load_config(shared: &SharedArgs) -> Result<HarnessConfig, CmdError> {
    let mut config = match &shared.config {
        Some(path) => usage(HarnessConfig::load(path))?,
        None => HarnessConfig::default(),
    };
    config.apply_env();
    if !shared.datasets.is_empty() {
        let mut sections = Vec::new();
        for raw in &shared.datasets {
            sections.push(usage(parse_dataset_flag(raw))?);
        }
        config.datasets = sections;
    }
    if let Some(budget) = shared.budget {
        config.forcing.budget = budget;
    }
    if let Some(injection) = &shared.injection {
        config.forcing.injection = injection.clone();
    }
    if let Some(parallelism) = shared.parallelism {
        config.evaluate.parallelism = parallelism;
    }
    if let Some(output) = &shared.output {
        config.output_dir = output.clone();
    }
    if let Some(seed) = shared.seed {
        config.seed = seed;
    }
    usage(config.validate())?;
    Ok(config)
}

fn build_backend(config: &HarnessConfig) -> Result<Box<dyn CompletionBackend>> {
    match config.backend.kind {
        BackendKind::Scripted => {
            let path = config
                .backend
                .script
                .as_ref()
                .ok_or_else(|| anyhow!("scripted backend needs backend.script"))?;
            let backend = ScriptedBackend::from_jsonl(path)
                .with_context(|| format!("loading script `{}`", path.display()))?;
            Ok(Box::new(backend))
        }
        BackendKind::Http => {
            let backend = HttpBackend::new(HttpBackendConfig {
                url: config.backend.url.clone(),
                credential_env: config.backend.credential_env.clone(),
                retries: config.backend.retries,
                timeout: std::time::Duration::from_secs(config.backend.timeout_secs),
                backoff_base: std::time::Duration::from_millis(250),
                limiter_size: config.backend.limiter,
            })?;
            Ok(Box::new(backend))
        }
    }
}

fn build_template(config: &HarnessConfig) -> Result<TemplateSpec> {
    let markers = (
        config.forcing.verdict_a.clone(),
        config.forcing.verdict_b.clone(),
    );
    match &config.template.path {
        Some(path) => {
            let id = config.template.id.as_deref().unwrap_or("custom");
            TemplateSpec::from_file(id, path, markers)
                .with_context(|| format!("loading template `{}`", path.display()))
        }
        None => {
            let default = TemplateSpec::default();
            if markers != default.verdict_markers {
                bail!(
                    "custom verdict markers need a custom template file whose \
                     instructions name them (template.path)"
                );
            }
            match &config.template.id {
                Some(id) => Ok(TemplateSpec::new(id.clone(), default.body, markers)?),
                None => Ok(default),
            }
        }
    }
}

/// Resolved-config echo written before any run data.
fn write_provenance(config: &HarnessConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output dir `{}`", dir.display()))?;
    #[derive(serde::Serialize)]
    struct Provenance<'a> {
        harness_version: &'static str,
        config: &'a HarnessConfig,
    }
    let text = serde_json::to_string_pretty(&Provenance {
        harness_version: env!("CARGO_PKG_VERSION"),
        config,
    })?;
    std::fs::write(dir.join("provenance.json"), text)
        .with_context(|| format!("output dir `{}` is not writable", dir.display()))?;
    Ok(())
}

fn load_datasets(
    config: &HarnessConfig,
) -> Result<Vec<(String, Vec<PreferenceInstance>)>, CmdError> {
    let specs = usage(config.dataset_specs())?;
    if specs.is_empty() {
        return Err(CmdError::Usage(anyhow!(
            "no datasets configured; pass --dataset or add [[dataset]] sections"
        )));
    }
    let mut loaded = Vec::new();
    for spec in specs {
        let outcome = usage(
            bench::load(&spec).with_context(|| format!("loading `{}`", spec.path.display())),
        )?;
        if !outcome.rejected.is_empty() {
            eprintln!(
                "warning: {}: {} line(s) rejected during ingest",
                spec.path.display(),
                outcome.rejected.len()
            );
            for line in outcome.rejected.iter().take(5) {
                eprintln!("  line {}: {}", line.line, line.reason);
            }
        }
        loaded.push((spec.source_tag.clone(), outcome.instances));
    }
    Ok(loaded)
}

fn summary_row(tag: &str, report: &EvaluationReport) -> String {
    let acc1 = report.per_attempt_accuracy.first().copied().unwrap_or(0.0);
    let (best_idx, best) = report
        .per_attempt_accuracy
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("accuracies are finite"))
        .map(|(i, &v)| (i, v))
        .unwrap_or((0, 0.0));
    let delta = if best_idx == 0 {
        "-".to_string()
    } else {
        match report.delta_relative.get(best_idx - 1) {
            Some(Some(value)) => format!("{value:.1}"),
            _ => "-".to_string(),
        }
    };
    let trend = match report.trend_r {
        Some(r) => format!("{r:.4}"),
        None => "-".to_string(),
    };
    format!(
        "{tag:<20} {:>9} {acc1:>8.4} {best:>8.4} {:>6} {delta:>10} {trend:>8}",
        report.instances_evaluated,
        best_idx + 1
    )
}

const SUMMARY_HEADER: &str =
    "tag                  instances    acc@1     best best@k delta_rel%  trend_r";

fn cmd_eval(args: EvalArgs) -> Result<(), CmdError> {
    let config = load_config(&args.shared)?;
    usage(write_provenance(&config, &config.output_dir))?;
    let backend = usage(build_backend(&config))?;
    let template = usage(build_template(&config))?;
    let datasets = load_datasets(&config)?;

    println!("{SUMMARY_HEADER}");
    let mut log_paths = Vec::new();
    let mut all_labels: BTreeMap<String, u8> = BTreeMap::new();
    for (tag, instances) in &datasets {
        let run_config = RunConfig {
            forcing: config.forcing_config(config.forcing.eval_temperature),
            parallelism: config.evaluate.parallelism,
            output_dir: config.output_dir.join(tag),
            resume: args.resume,
            max_failure_fraction: config.evaluate.max_failure_fraction,
            harness_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let report = run_err(
            evaluate::evaluate_run(instances, &template, backend.as_ref(), &run_config)
                .with_context(|| format!("evaluation failed for `{tag}`")),
        )?;
        println!("{}", summary_row(tag, &report));
        log_paths.push(run_config.output_dir.join(evaluate::ATTEMPTS_FILE));
        for instance in instances {
            all_labels.insert(instance.id.clone(), instance.label);
        }
    }

    if datasets.len() > 1 {
        let mut records = Vec::new();
        for path in &log_paths {
            records.extend(run_err(
                evaluate::read_attempt_log(path).map_err(anyhow::Error::from),
            )?);
        }
        let episodes = evaluate::group_episodes(records, config.forcing.budget);
        let overall = run_err(
            evaluate::aggregate(&episodes, &all_labels, config.forcing.budget, 0)
                .map_err(anyhow::Error::from),
        )?;
        let overall_path = config.output_dir.join("overall.json");
        run_err(
            std::fs::write(
                &overall_path,
                serde_json::to_string_pretty(&overall).expect("report serializes"),
            )
            .with_context(|| format!("writing `{}`", overall_path.display())),
        )?;
        println!("{}", summary_row("overall", &overall));
    }
    Ok(())
}

fn cmd_curate(args: CurateArgs) -> Result<(), CmdError> {
    let mut config = load_config(&args.shared)?;
    if let Some(cycles) = args.cycles {
        config.curation.cycles = cycles;
    }
    usage(write_provenance(&config, &config.output_dir))?;
    let backend = usage(build_backend(&config))?;
    let template = usage(build_template(&config))?;
    let datasets = load_datasets(&config)?;

    let mut instances: Vec<PreferenceInstance> = Vec::new();
    for (_, mut batch) in datasets {
        instances.append(&mut batch);
    }
    let mut by_id: BTreeMap<String, PreferenceInstance> = BTreeMap::new();
    for instance in &instances {
        if by_id.insert(instance.id.clone(), instance.clone()).is_some() {
            return Err(CmdError::Usage(anyhow!(
                "instance id `{}` appears in more than one dataset",
                instance.id
            )));
        }
    }

    let forcing = config.forcing_config(config.forcing.rollout_temperature);
    let outcome = run_err(
        curate::curate(
            &instances,
            &template,
            backend.as_ref(),
            config.curation.cycles,
            &forcing,
            config.evaluate.parallelism,
        )
        .map_err(anyhow::Error::from),
    )?;

    let out = &config.output_dir;
    if outcome.accepted.is_empty() {
        eprintln!("notice: no trajectories accepted; skipping sft dataset");
    } else {
        run_err(
            curate::emit_sft_dataset(
                &outcome.accepted,
                &by_id,
                &forcing,
                &out.join("accepted.jsonl"),
            )
            .map_err(anyhow::Error::from),
        )?;
    }
    run_err(write_jsonl(
        &out.join("persistent.jsonl"),
        outcome
            .persistent_failures
            .iter()
            .map(|id| serde_json::json!({ "instance_id": id })),
    ))?;
    run_err(write_jsonl(
        &out.join("failed_io.jsonl"),
        outcome
            .failed_io
            .iter()
            .map(|(id, error)| serde_json::json!({ "instance_id": id, "error": error })),
    ))?;
    run_err(
        std::fs::write(
            out.join("stats.json"),
            serde_json::to_string_pretty(&outcome.stats).expect("stats serialize"),
        )
        .context("writing stats.json"),
    )?;

    print!("{}", curate::render_stats_table(&outcome.stats));
    println!(
        "accepted {} | persistent {} | failed-io {}",
        outcome.accepted.len(),
        outcome.persistent_failures.len(),
        outcome.failed_io.len()
    );
    Ok(())
}

fn write_jsonl(path: &Path, lines: impl Iterator<Item = serde_json::Value>) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("cannot create `{}`", path.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    for value in lines {
        writeln!(writer, "{value}")?;
    }
    writer.flush()?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CmdError> {
    if !args.log.exists() {
        return Err(CmdError::Usage(anyhow!(
            "attempt log not found: {}",
            args.log.display()
        )));
    }
    let config = load_config(&args.shared)?;
    let datasets = load_datasets(&config)?;
    let mut labels: BTreeMap<String, u8> = BTreeMap::new();
    for (_, instances) in &datasets {
        for instance in instances {
            labels.insert(instance.id.clone(), instance.label);
        }
    }

    // Malformed log lines carry their line number in the error.
    let records = run_err(evaluate::read_attempt_log(&args.log).map_err(anyhow::Error::from))?;
    if records.is_empty() {
        return Err(CmdError::Run(anyhow!(
            "attempt log `{}` is empty",
            args.log.display()
        )));
    }
    let budget = records
        .iter()
        .map(|r| r.attempt_index)
        .max()
        .expect("nonempty");

    let lexicon = match &args.lexicon {
        Some(path) => run_err(ReflectiveLexicon::from_file(path).map_err(anyhow::Error::from))?,
        None => ReflectiveLexicon::default(),
    };
    let bins = match &args.bins {
        Some(raw) => {
            let edges: Vec<u64> = usage(
                raw.split(',')
                    .map(|piece| piece.trim().parse::<u64>().context("bad bin edge"))
                    .collect::<Result<Vec<u64>>>(),
            )?;
            usage(analysis::CountBins::new(edges).map_err(anyhow::Error::from))?
        }
        None => analysis::CountBins::default(),
    };

    let out_dir = args
        .shared
        .output
        .clone()
        .unwrap_or_else(|| config.output_dir.join("analysis"));
    run_err(
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("cannot create `{}`", out_dir.display())),
    )?;

    let transitions = analysis::transitions(&records, &labels, budget);
    let frequency = analysis::reflective_frequency_table(&records, &labels, &lexicon, &bins);
    let lengths = analysis::length_stats(&records, &labels, args.bin_width);
    let by_reflection = analysis::accuracy_by_reflection(&records, &labels, &lexicon, &bins);

    let write_pair = |name: &str, json: String, csv: String| -> Result<()> {
        std::fs::write(out_dir.join(format!("{name}.json")), json)?;
        std::fs::write(out_dir.join(format!("{name}.csv")), csv)?;
        Ok(())
    };
    run_err(write_pair(
        "transitions",
        serde_json::to_string_pretty(&transitions).expect("serializes"),
        transitions.to_csv(),
    ))?;
    run_err(write_pair(
        "reflective_frequency",
        serde_json::to_string_pretty(&frequency).expect("serializes"),
        frequency.to_csv(),
    ))?;
    run_err(write_pair(
        "length_stats",
        serde_json::to_string_pretty(&lengths).expect("serializes"),
        lengths.to_csv(),
    ))?;
    run_err(write_pair(
        "accuracy_by_reflection",
        serde_json::to_string_pretty(&by_reflection).expect("serializes"),
        by_reflection.to_csv(),
    ))?;

    if args.word_freq {
        let words = analysis::word_frequency(&records, &analysis::default_stopwords());
        let mut csv = String::from("word,count\n");
        for (word, count) in &words {
            csv.push_str(&format!("{word},{count}\n"));
        }
        run_err(write_pair(
            "word_frequency",
            serde_json::to_string_pretty(&words).expect("serializes"),
            csv,
        ))?;
    }

    println!(
        "analyzed {} instances over {} attempts ({} excluded); outputs in {}",
        transitions.instances_counted,
        budget,
        transitions.excluded.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_rl_check(args: RlCheckArgs) -> Result<(), CmdError> {
    let fixture = match &args.fixture {
        Some(path) => Some(usage(
            rlmath::load_fixture(path)
                .with_context(|| format!("loading fixture `{}`", path.display())),
        )?),
        None => None,
    };
    let options = SelfCheckOptions {
        seeds: args.seeds.max(1),
        tokens: args.tokens.max(2),
        h: args.h,
        inject_failure: args.inject_failure,
        fixture,
    };
    let report = run_err(rlmath::run_self_check(&options).map_err(anyhow::Error::from))?;
    print!("{}", report.render());
    if report.all_passed() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CmdError::Run(anyhow!("self-check failed")))
    }
}
