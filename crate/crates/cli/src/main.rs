use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use schemalink::dataset::{
    build_cot_prompt, load_examples_with, load_spider_schemas, read_jsonl, sim_questions, to_jsonl,
    DatasetError, RunConfig, COT_PROMPT_VERSION,
};
use schemalink::metrics::{aggregate_report, MetricReport};
use schemalink::response::ParsedResponse;
use schemalink::reward::{total_reward, RewardBreakdown};
use schemalink::schema::{DbSchema, LinkedExample};
use schemalink::sim::{parse_run_log, render_run_log, train_loop, SimError};

#[derive(Parser, Debug)]
#[command(name = "schemalink", version, about = "Schema-linking RL harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Spider-format schema file; overrides the config.
    #[arg(long, global = true)]
    schemas: Option<PathBuf>,
    /// Output directory (or file, for `report`); overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    exclude_join_columns: bool,
    #[arg(long, global = true)]
    literal_set_difference: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract ground-truth linking from examples' SQL.
    Extract {
        /// Spider-format examples file; overrides the config.
        #[arg(long)]
        examples: Option<PathBuf>,
    },
    /// Emit CoT-generation prompts for the first N linked examples.
    Prompts {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Score model responses against the linked dataset.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Train the toy policy with GRPO.
    TrainSim {
        /// Linked dataset; extracted from the configured examples if omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Metric report for a predictions file.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Convert a run log into per-iteration CSV.
    Report {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.schemas {
        cfg.paths.schemas = p.clone();
    }
    if let Some(p) = &common.out {
        cfg.paths.output_dir = p.clone();
    }
    if let Some(seed) = common.seed {
        cfg.sim.grpo.seed = seed;
    }
    if common.exclude_join_columns {
        cfg.extract.include_join_columns = false;
    }
    if common.literal_set_difference {
        cfg.sim.reward.literal_set_difference_mode = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn extract(cfg: &RunConfig, examples: Option<PathBuf>) -> CliResult<()> {
    let schemas = load_spider_schemas(&cfg.paths.schemas)?;
    let path = examples.unwrap_or_else(|| cfg.paths.examples.clone());
    let loaded = load_examples_with(&path, &schemas, cfg.extract.options())?;
    let out = &cfg.paths.output_dir;
    write_file(&out.join("linked.jsonl"), &to_jsonl(&loaded.examples))?;
    write_file(&out.join("rejections.jsonl"), &to_jsonl(&loaded.rejections))?;
    for r in &loaded.rejections {
        eprintln!("rejected record {}: {}", r.index, r.reason);
    }
    eprintln!(
        "{} linked, {} rejected -> {}",
        loaded.examples.len(),
        loaded.rejections.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    id: &'a str,
    template: &'a str,
    prompt: String,
}

fn schema_for<'a>(
    schemas: &'a BTreeMap<String, DbSchema>,
    ex: &LinkedExample,
) -> CliResult<&'a DbSchema> {
    schemas
        .get(&ex.db_id)
        .ok_or_else(|| invalid(anyhow!("example {}: unknown db_id {:?}", ex.id, ex.db_id)))
}

fn prompts(cfg: &RunConfig, dataset: &Path, count: Option<usize>) -> CliResult<()> {
    let schemas = load_spider_schemas(&cfg.paths.schemas)?;
    let examples: Vec<LinkedExample> = read_jsonl(dataset)?;
    let n = count.unwrap_or(cfg.prompts.count);
    let records = examples
        .iter()
        .take(n)
        .map(|ex| {
            Ok(PromptRecord {
                id: &ex.id,
                template: COT_PROMPT_VERSION,
                prompt: build_cot_prompt(ex, schema_for(&schemas, ex)?),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let path = cfg.paths.output_dir.join("prompts.jsonl");
    write_file(&path, &to_jsonl(&records))?;
    eprintln!("{} prompts -> {}", records.len(), path.display());
    Ok(())
}

#[derive(Deserialize)]
struct Prediction {
    id: String,
    response: String,
}

#[derive(Serialize)]
struct ScoreRecord {
    id: String,
    #[serde(flatten)]
    reward: RewardBreakdown,
    format_ok: bool,
    token_len: usize,
}

struct Scored {
    records: Vec<ScoreRecord>,
    report: MetricReport,
}

fn score_predictions(cfg: &RunConfig, dataset: &Path, predictions: &Path) -> CliResult<Scored> {
    let schemas = load_spider_schemas(&cfg.paths.schemas)?;
    let examples: Vec<LinkedExample> = read_jsonl(dataset)?;
    let by_id: BTreeMap<&str, &LinkedExample> =
        examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    if preds.is_empty() {
        return Err(invalid(anyhow!(
            "{}: no predictions",
            predictions.display()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(preds.len());
    let mut pairs = Vec::with_capacity(preds.len());
    for p in preds {
        let ex = by_id.get(p.id.as_str()).ok_or_else(|| {
            invalid(anyhow!(
                "prediction {:?} has no ground truth in {}",
                p.id,
                dataset.display()
            ))
        })?;
        if !seen.insert(p.id.clone()) {
            return Err(invalid(anyhow!("duplicate prediction id {:?}", p.id)));
        }
        let schema = schema_for(&schemas, ex)?;
        let parsed = ParsedResponse::parse(&p.response, schema);
        let reward = total_reward(&parsed, &ex.truth, &cfg.sim.reward);
        pairs.push((
            parsed
                .predicted
                .clone()
                .unwrap_or_default(),
            ex.truth.clone(),
        ));
        records.push(ScoreRecord {
            id: p.id,
            reward,
            format_ok: parsed.format_ok,
            token_len: parsed.token_len,
        });
    }
    let report = aggregate_report(&pairs).map_err(invalid)?;
    Ok(Scored { records, report })
}

fn write_report(out: &Path, report: &MetricReport) -> CliResult<()> {
    write_file(&out.join("report.txt"), &format!("{report}\n"))?;
    let json = serde_json::to_string_pretty(report).map_err(runtime)?;
    write_file(&out.join("report.json"), &(json + "\n"))?;
    println!("{report}");
    Ok(())
}

fn score(cfg: &RunConfig, dataset: &Path, predictions: &Path) -> CliResult<()> {
    let scored = score_predictions(cfg, dataset, predictions)?;
    let out = &cfg.paths.output_dir;
    write_file(&out.join("scores.jsonl"), &to_jsonl(&scored.records))?;
    write_report(out, &scored.report)
}

fn eval(cfg: &RunConfig, dataset: &Path, predictions: &Path) -> CliResult<()> {
    let scored = score_predictions(cfg, dataset, predictions)?;
    write_report(&cfg.paths.output_dir, &scored.report)
}

fn train_sim(cfg: &RunConfig, dataset: Option<PathBuf>) -> CliResult<()> {
    let schemas = load_spider_schemas(&cfg.paths.schemas)?;
    let examples = match dataset {
        Some(path) => read_jsonl(&path)?,
        None => {
            let loaded = load_examples_with(&cfg.paths.examples, &schemas, cfg.extract.options())?;
            for r in &loaded.rejections {
                eprintln!("rejected record {}: {}", r.index, r.reason);
            }
            loaded.examples
        }
    };
    let questions = sim_questions(&examples, &schemas)?;
    let out = &cfg.paths.output_dir;
    let outcome = match train_loop(&questions, &cfg.sim) {
        Ok(o) => o,
        Err(SimError::UpdateFailed {
            iteration,
            source,
            checkpoint,
            log,
        }) => {
            write_file(&out.join("run_log.jsonl"), &render_run_log(&log))?;
            let snap = serde_json::to_string(&checkpoint).map_err(runtime)?;
            write_file(&out.join("policy.json"), &(snap + "\n"))?;
            return Err(runtime(anyhow!(
                "update failed at iteration {iteration}: {source}; last good policy saved"
            )));
        }
        Err(e @ (SimError::EmptyDataset | SimError::InvalidConfig(_) | SimError::Reward(_))) => {
            return Err(invalid(e))
        }
        Err(e) => return Err(runtime(e)),
    };
    write_file(&out.join("run_log.jsonl"), &render_run_log(&outcome.log))?;
    let snap = serde_json::to_string(&outcome.policy).map_err(runtime)?;
    write_file(&out.join("policy.json"), &(snap + "\n"))?;
    eprintln!(
        "final mean reward {:.4} (max {:.4}); run log -> {}",
        outcome.final_mean_reward,
        outcome.mean_max_reward,
        out.join("run_log.jsonl").display()
    );
    println!("{}", outcome.final_eval);
    Ok(())
}

fn report(common: &Common, log: &Path) -> CliResult<()> {
    let text = fs::read_to_string(log)
        .with_context(|| format!("reading {}", log.display()))
        .map_err(runtime)?;
    let records = parse_run_log(&text)
        .with_context(|| format!("parsing {}", log.display()))
        .map_err(invalid)?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in &records {
        writer.serialize(r).map_err(runtime)?;
    }
    let bytes = writer.into_inner().map_err(|e| runtime(anyhow!("{e}")))?;
    let csv = String::from_utf8(bytes).map_err(runtime)?;
    match &common.out {
        Some(path) => write_file(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::Report { log } = &cli.command {
        return report(&cli.common, log);
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Extract { examples } => extract(&cfg, examples),
        Command::Prompts { dataset, count } => prompts(&cfg, &dataset, count),
        Command::Score {
            dataset,
            predictions,
        } => score(&cfg, &dataset, &predictions),
        Command::TrainSim { dataset } => train_sim(&cfg, dataset),
        Command::Eval {
            dataset,
            predictions,
        } => eval(&cfg, &dataset, &predictions),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
