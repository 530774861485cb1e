//! Command-line front end.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::info;

use crate::config::{default_keys, Config, ConfigError};
use crate::derive_seed;
use crate::grpo::{evaluate_actor, train, Actor, Decode};
use crate::metrics::{EvalItem, EvalReport};
use crate::pipeline::{
    demos_from_records, run_pipeline, Annotator, ChoiceScorer, ExternalClient, SftRecord, ANNOTATOR_URL_ENV,
};
use crate::policy::{behavior_clone, Checkpoint, PolicyParams};
use crate::scenes::{generate_scene, SceneRecord};

#[derive(Debug, Parser)]
#[command(name = "adazoom", version, about = "Synthetic lab for learning when and where to zoom")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.lr=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for rollouts and generation.
    #[arg(long, global = true, value_name = "N")]
    pub parallel: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnnotatorKind {
    /// Built-in scripted annotator with privileged scene access.
    Oracle,
    /// HTTP annotator at the endpoint in ADAZOOM_ANNOTATOR_URL.
    External,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene and question corpus as JSONL.
    GenScenes {
        /// Output corpus JSONL.
        #[arg(long)]
        out: PathBuf,
        /// Number of questions (defaults to corpus.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Generate, score, filter and clean demonstrations.
    GenData {
        /// Scene corpus JSONL.
        #[arg(long)]
        scenes: PathBuf,
        /// Cleaned demonstrations JSONL.
        #[arg(long)]
        out: PathBuf,
        /// Action-index sidecar (defaults to OUT with `.actions.jsonl`).
        #[arg(long)]
        actions: Option<PathBuf>,
        /// Quality-control report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Annotator producing raw trajectories.
        #[arg(long, value_enum, default_value_t = AnnotatorKind::Oracle)]
        annotator: AnnotatorKind,
    },
    /// Fit a policy to demonstrations by maximum likelihood.
    Clone {
        /// Scene corpus JSONL.
        #[arg(long)]
        scenes: PathBuf,
        /// Demonstrations JSONL from `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log-likelihood curve as JSON.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Optimize a policy with group-relative policy optimization.
    Train {
        /// Training corpus JSONL.
        #[arg(long)]
        scenes: PathBuf,
        /// Starting checkpoint (zeros when omitted).
        #[arg(long)]
        init: Option<PathBuf>,
        /// KL reference checkpoint (defaults to the starting policy).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// JSONL log of update statistics and per-trajectory rewards.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a policy on a corpus.
    Eval {
        /// Evaluation corpus JSONL.
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint path, or one of `uniform`, `always-answer`, `always-zoom`.
        #[arg(long)]
        policy: String,
        /// Report JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-category table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Evaluation transcripts as JSONL.
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
    /// Tabulate evaluation reports as CSV.
    Report {
        /// Report JSON files from `eval`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys (TOML file via --config, or --set KEY=VALUE) and defaults:\n");
    for (k, v) in default_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str(&format!(
        "\nEnvironment:\n  {ANNOTATOR_URL_ENV}  endpoint for `gen-data --annotator external`\n  RUST_LOG  log filter (default info)\n\nExit codes: 0 success, 1 usage or configuration error, 2 runtime failure."
    ));
    s
}

fn command() -> clap::Command {
    let help = config_help();
    Cli::command()
        .after_help(help.clone())
        .mut_subcommands(move |s| s.after_help(help.clone()))
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = base.with_overrides(&cli.overrides)?;
    if let Some(n) = cli.parallel {
        if n == 0 {
            return Err(CliError::Usage("--parallel must be at least 1".into()));
        }
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenScenes { out, count } => gen_scenes(&cfg, &out, count.unwrap_or(cfg.corpus.count)),
        Command::GenData {
            scenes,
            out,
            actions,
            report,
            annotator,
        } => {
            let annotator: Box<dyn Annotator> = match annotator {
                AnnotatorKind::Oracle => Box::new(cfg.pipeline.oracle),
                AnnotatorKind::External => Box::new(
                    ExternalClient::from_env(Duration::from_secs(60))
                        .ok_or_else(|| CliError::Usage(format!("{ANNOTATOR_URL_ENV} is not set")))?,
                ),
            };
            let actions = actions.unwrap_or_else(|| out.with_extension("actions.jsonl"));
            gen_data(&cfg, annotator.as_ref(), &scenes, &out, &actions, report.as_deref())
        }
        Command::Clone {
            scenes,
            data,
            out,
            curve,
        } => clone(&cfg, &scenes, &data, &out, curve.as_deref()),
        Command::Train {
            scenes,
            init,
            reference,
            out,
            log,
        } => train_cmd(&cfg, &scenes, init.as_deref(), reference.as_deref(), &out, log.as_deref()),
        Command::Eval {
            scenes,
            policy,
            out,
            csv,
            transcripts,
        } => eval(&cfg, &scenes, &policy, out.as_deref(), csv.as_deref(), transcripts.as_deref()),
        Command::Report { reports, out } => report(&reports, out.as_deref()),
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<PolicyParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(PolicyParams::try_from(ck)?)
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> anyhow::Result<()> {
    write_json(path, &Checkpoint::from(params))
}

/// Scene corpus with seeds derived from the configured root seed.
pub fn build_corpus(cfg: &Config, count: usize) -> anyhow::Result<Vec<SceneRecord>> {
    (0..count)
        .map(|i| {
            let (scene, question) = generate_scene(derive_seed(cfg.seed, &[i as u64]), &cfg.scenes)?;
            Ok(SceneRecord { scene, question })
        })
        .collect()
}

fn gen_scenes(cfg: &Config, out: &Path, count: usize) -> Result<(), CliError> {
    let corpus = build_corpus(cfg, count)?;
    write_jsonl(out, &corpus)?;
    info!(count, path = %out.display(), "wrote scenes");
    Ok(())
}

fn gen_data(
    cfg: &Config,
    annotator: &dyn Annotator,
    scenes: &Path,
    out: &Path,
    actions: &Path,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let corpus: Vec<SceneRecord> = read_jsonl(scenes)?;
    let data = run_pipeline(&corpus, annotator, &ChoiceScorer, &cfg.pipeline, cfg.seed).map_err(anyhow::Error::from)?;
    write_jsonl(out, &data.records)?;
    write_jsonl(actions, &data.action_indices)?;
    if let Some(p) = report {
        write_json(p, &data.report)?;
    }
    let r = &data.report;
    info!(
        generated = r.generated,
        failed = r.failed,
        retained = r.retained,
        annotator = annotator.name(),
        "wrote demonstrations"
    );
    Ok(())
}

fn clone(cfg: &Config, scenes: &Path, data: &Path, out: &Path, curve: Option<&Path>) -> Result<(), CliError> {
    let corpus: Vec<SceneRecord> = read_jsonl(scenes)?;
    let records: Vec<SftRecord> = read_jsonl(data)?;
    let by_id: HashMap<String, &SceneRecord> = corpus.iter().map(|r| (r.question.question_id.clone(), r)).collect();
    let demos = demos_from_records(&records, &by_id, cfg.episode).map_err(anyhow::Error::from)?;
    if demos.is_empty() {
        return Err(anyhow::anyhow!("no representable decisions in {}", data.display()).into());
    }
    let (params, ll) = behavior_clone(&PolicyParams::zeros(), &demos, cfg.clone.lr, cfg.clone.epochs)
        .map_err(anyhow::Error::from)?;
    save_checkpoint(out, &params)?;
    if let Some(p) = curve {
        write_json(p, &ll)?;
    }
    info!(
        demos = demos.len(),
        final_log_likelihood = ll.last().copied().unwrap_or_default(),
        "wrote cloned policy"
    );
    Ok(())
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Update(&'a crate::grpo::UpdateStats),
    Trajectory(&'a crate::grpo::TrajectoryLog),
}

fn train_cmd(
    cfg: &Config,
    scenes: &Path,
    init: Option<&Path>,
    reference: Option<&Path>,
    out: &Path,
    log: Option<&Path>,
) -> Result<(), CliError> {
    let corpus: Vec<SceneRecord> = read_jsonl(scenes)?;
    let init = match init {
        Some(p) => load_checkpoint(p)?,
        None => PolicyParams::zeros(),
    };
    let reference = match reference {
        Some(p) => load_checkpoint(p)?,
        None => init.clone(),
    };
    let outcome = train(&init, &reference, &corpus, &cfg.train, &cfg.env(), |s, _| {
        info!(
            update = s.update,
            mean_reward = s.mean_reward,
            accuracy = s.accuracy,
            trigger_ratio = s.trigger_ratio,
            kl = s.kl,
            "update"
        );
    })
    .map_err(anyhow::Error::from)?;
    save_checkpoint(out, &outcome.params)?;
    if let Some(p) = log {
        let mut lines = Vec::with_capacity(outcome.updates.len() + outcome.trajectories.len());
        for u in &outcome.updates {
            lines.push(LogLine::Update(u));
            lines.extend(
                outcome
                    .trajectories
                    .iter()
                    .filter(|t| t.update == u.update)
                    .map(LogLine::Trajectory),
            );
        }
        write_jsonl(p, &lines)?;
    }
    Ok(())
}

fn eval(
    cfg: &Config,
    scenes: &Path,
    policy: &str,
    out: Option<&Path>,
    csv: Option<&Path>,
    transcripts: Option<&Path>,
) -> Result<(), CliError> {
    let corpus: Vec<SceneRecord> = read_jsonl(scenes)?;
    let params;
    let actor = match policy {
        "uniform" => Actor::UniformAnswer,
        "always-answer" => Actor::AlwaysAnswer,
        "always-zoom" => Actor::AlwaysZoom,
        path => {
            params = load_checkpoint(Path::new(path))?;
            Actor::Softmax {
                params: &params,
                decode: cfg.eval.decode,
            }
        }
    };
    let records = evaluate_actor(&actor, &corpus, &cfg.env(), cfg.eval.seed).map_err(anyhow::Error::from)?;
    let items: Vec<EvalItem> = records.iter().map(EvalItem::from).collect();
    let label = match (&actor, cfg.eval.decode) {
        (Actor::Softmax { .. }, Decode::Greedy) => format!("{policy}:greedy"),
        (Actor::Softmax { .. }, Decode::Sample) => format!("{policy}:sample"),
        _ => policy.to_owned(),
    };
    let rep = EvalReport::build(label, &items).map_err(anyhow::Error::from)?;
    match out {
        Some(p) => write_json(p, &rep)?,
        None => println!("{}", serde_json::to_string_pretty(&rep).map_err(anyhow::Error::from)?),
    }
    if let Some(p) = csv {
        std::fs::write(p, rep.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = transcripts {
        let ts: Vec<_> = records.iter().map(|r| &r.transcript).collect();
        write_jsonl(p, &ts)?;
    }
    Ok(())
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut table = String::new();
    for (i, p) in paths.iter().enumerate() {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rep: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let csv = rep.to_csv();
        let skip = usize::from(i > 0);
        for line in csv.lines().skip(skip) {
            table.push_str(line);
            table.push('\n');
        }
    }
    match out {
        Some(p) => std::fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{table}"),
    }
    Ok(())
}
