//! Command-line front end.
//!
//! Every run writes its artifacts plus a `manifest.json` (effective
//! arguments, seed, versions and SHA-256 digests of inputs and outputs) to
//! the output directory. Settings may come from a `key = value` config file
//! whose keys are long flag names; flags on the command line win.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analyzer::{build_grouping, rank_features, GroupingParams, GroupingReport};
use crate::bounds::{alpha_sweep_csv, leakage_bounds, theorem1_range};
use crate::defenses::{apply_buflo, apply_tamaraw, overhead, BufloParams, TamarawParams};
use crate::density::{DEFAULT_BETA, MODEL_FORMAT_VERSION};
use crate::features::{FeatureTable, LayoutMap, FEATURE_COUNT, LAYOUT_VERSION};
use crate::infotheory::{DiscreteDistribution, DiscretizedFeatures};
use crate::quantifier::{
    joint_leakage, per_category_leakage, LeakageReport, McConfig, NonMonitoredMode, OpenWorld, PriorSpec, QuantError,
    WorldConfig, DEFAULT_MC_SAMPLES,
};
use crate::traces::{load_dataset, write_dataset, Dataset};
use crate::validation::{bootstrap_ci, subsample_ci, ResampleConfig, ValidationError};

pub const THREADS_ENV: &str = "WFLEAK_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "wfleak",
    version,
    about = "Information leakage of website fingerprinting features"
)]
pub struct Cli {
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default from WFLEAK_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short = 'o', global = true, default_value = "out")]
    output: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
enum Command {
    /// Extract fingerprints from a trace directory into a feature CSV.
    Extract(ExtractArgs),
    /// Rank, prune and cluster features.
    Analyze(AnalyzeArgs),
    /// Estimate information leakage.
    #[command(subcommand)]
    Leakage(LeakageCommand),
    /// Apply a padding defense to every trace.
    Defend(DefendArgs),
    /// Accuracy-to-leakage bounds.
    Bounds(BoundsArgs),
    /// Confidence interval of joint leakage by resampling.
    Validate(ValidateArgs),
}

#[derive(Debug, Subcommand, Serialize)]
enum LeakageCommand {
    /// Leakage of the grouped top features together.
    Joint(LeakageArgs),
    /// Leakage of every feature on its own.
    Individual(IndividualArgs),
    /// Joint leakage restricted to each feature category.
    PerCategory(LeakageArgs),
}

#[derive(Debug, Args, Serialize)]
struct ExtractArgs {
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
struct InputArgs {
    /// Trace directory (`<website>/<visit>.trace`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Feature CSV written by `extract`.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ModelArgs {
    /// uniform, zipf, or file:PATH
    #[arg(long, default_value = "uniform")]
    prior: String,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: usize,
    #[arg(long, default_value_t = DEFAULT_MC_SAMPLES)]
    mc_samples: usize,
    #[arg(long)]
    seed: u64,
    /// Intermediate cache (default: <output>/cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GroupingArgs {
    #[arg(long, default_value_t = crate::analyzer::DEFAULT_TOP_N)]
    top_n: usize,
    #[arg(long, default_value_t = crate::analyzer::DEFAULT_PRUNE_THRESHOLD)]
    prune_threshold: f64,
    #[arg(long, default_value_t = crate::analyzer::DEFAULT_EPS)]
    eps: f64,
    /// Samples per individual-leakage estimate when ranking (default: --mc-samples).
    #[arg(long)]
    rank_samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum WorldKind {
    Closed,
    Open,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum NonMonitoredKind {
    Pooled,
    PerSite,
}

#[derive(Debug, Args, Serialize)]
struct WorldArgs {
    #[arg(long, value_enum, default_value = "closed")]
    world: WorldKind,
    /// Monitored websites (open world), comma separated.
    #[arg(long, value_delimiter = ',')]
    monitored: Vec<String>,
    #[arg(long, value_enum, default_value = "pooled")]
    non_monitored: NonMonitoredKind,
}

#[derive(Debug, Args, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grouping: GroupingArgs,
}

#[derive(Debug, Args, Serialize)]
struct LeakageArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grouping: GroupingArgs,
    #[command(flatten)]
    world: WorldArgs,
    /// Grouping JSON from `analyze`; built (and cached) when absent.
    #[arg(long = "grouping")]
    grouping_file: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct IndividualArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum DefenseKind {
    Buflo,
    Tamaraw,
}

#[derive(Debug, Args, Serialize)]
struct DefendArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    defense: DefenseKind,
    /// BuFLO minimum duration (s).
    #[arg(long)]
    tau: Option<f64>,
    /// BuFLO slot interval (s).
    #[arg(long)]
    rho: Option<f64>,
    /// BuFLO cell size (bytes).
    #[arg(long)]
    cell_size: Option<u32>,
    /// Tamaraw padding multiple.
    #[arg(long = "l")]
    l: Option<usize>,
    /// Tamaraw outgoing interval (s).
    #[arg(long)]
    rho_out: Option<f64>,
    /// Tamaraw incoming interval (s).
    #[arg(long)]
    rho_in: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct BoundsArgs {
    /// World size (taken from --prior-file when given).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    accuracy: f64,
    /// One probability per line, or `name,probability`.
    #[arg(long)]
    prior_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum ResampleMode {
    Bootstrap,
    Subsample,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    grouping: GroupingArgs,
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long = "grouping")]
    grouping_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bootstrap")]
    mode: ResampleMode,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0.9)]
    ci: f64,
    /// Websites per subsample.
    #[arg(long)]
    world_size: Option<usize>,
}

/// A failed run, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data { stage: &'static str, message: String },
    Numeric { stage: &'static str, message: String },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data { .. } => 3,
            Failure::Numeric { .. } => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data { stage, message } => write!(f, "{stage}: data error: {message}"),
            Failure::Numeric { stage, message } => write!(f, "{stage}: numeric failure: {message}"),
        }
    }
}

fn data(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> Failure {
    move |e| Failure::Data {
        stage,
        message: e.to_string(),
    }
}

fn io<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> Failure + 'a {
    move |e| Failure::Data {
        stage,
        message: format!("{}: {e}", path.display()),
    }
}

fn quant(stage: &'static str) -> impl Fn(QuantError) -> Failure {
    move |e| match e {
        QuantError::Density(_) | QuantError::Info(_) => Failure::Numeric {
            stage,
            message: e.to_string(),
        },
        _ => Failure::Data {
            stage,
            message: e.to_string(),
        },
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match merge_config(&raw) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("{f}");
            return f.exit_code();
        }
    };
    let matches = match command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, &argv[1..]) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("wfleak: {f}");
            f.exit_code()
        }
    }
}

fn command() -> clap::Command {
    fn overriding(cmd: clap::Command) -> clap::Command {
        let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
        let mut cmd = cmd.args_override_self(true);
        for name in names {
            cmd = cmd.mut_subcommand(name, overriding);
        }
        cmd
    }
    overriding(Cli::command())
}

/// Splices config-file settings in right after the subcommand names, so
/// any explicit flag later on the line overrides them.
fn merge_config(raw: &[OsString]) -> Result<Vec<OsString>, Failure> {
    let tokens: Vec<String> = raw.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, t) in tokens.iter().enumerate() {
        if let Some(v) = t.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if t == "--config" {
            config = tokens.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = config else {
        return Ok(raw.to_vec());
    };
    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;

    // Locate the (sub)subcommand chain.
    let root = command();
    let takes_value = ["--config", "--threads", "--output", "-o"];
    let mut cmd = &root;
    let mut insert_at = None;
    let mut i = 1;
    while i < tokens.len() {
        let t = &tokens[i];
        if takes_value.contains(&t.as_str()) {
            i += 2;
            continue;
        }
        if let Some(sub) = cmd.find_subcommand(t) {
            cmd = sub;
            insert_at = Some(i + 1);
            if sub.get_subcommands().next().is_none() {
                break;
            }
        } else if insert_at.is_some() && !t.starts_with('-') {
            break;
        }
        i += 1;
    }
    let Some(at) = insert_at else {
        return Ok(raw.to_vec());
    };
    let known: Vec<String> = cmd
        .get_arguments()
        .chain(root.get_arguments())
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    let mut extra: Vec<OsString> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if !known.contains(&key) {
            return Err(Failure::Usage(format!("config line {}: unknown setting {key}", n + 1)));
        }
        if key == "config" {
            continue;
        }
        extra.push(format!("--{key}").into());
        extra.push(value.trim().into());
    }
    let mut merged = raw[..at].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&raw[at..]);
    Ok(merged)
}

fn configure_threads(requested: Option<usize>) -> Result<(), Failure> {
    let n = match requested {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a positive integer")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Usage("thread count must be positive".into()));
        }
        // A pool may already exist when running several commands in one
        // process; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    layout_version: u32,
    model_format_version: u32,
    command: Vec<&'static str>,
    args: Vec<String>,
    config: &'a Cli,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

/// Tracks inputs read and files written during a run.
struct Run<'a> {
    out: &'a Path,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<'a> Run<'a> {
    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), Failure> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io("output", dir))?;
        }
        fs::write(&path, contents).map_err(io("output", &path))?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(contents),
        });
        Ok(())
    }

    fn note_input(&mut self, path: &Path, digest: String) {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: digest,
        });
    }
}

fn command_path(c: &Command) -> Vec<&'static str> {
    match c {
        Command::Extract(_) => vec!["extract"],
        Command::Analyze(_) => vec!["analyze"],
        Command::Leakage(LeakageCommand::Joint(_)) => vec!["leakage", "joint"],
        Command::Leakage(LeakageCommand::Individual(_)) => vec!["leakage", "individual"],
        Command::Leakage(LeakageCommand::PerCategory(_)) => vec!["leakage", "per-category"],
        Command::Defend(_) => vec!["defend"],
        Command::Bounds(_) => vec!["bounds"],
        Command::Validate(_) => vec!["validate"],
    }
}

fn seed_of(c: &Command) -> Option<u64> {
    match c {
        Command::Analyze(a) => Some(a.model.seed),
        Command::Leakage(LeakageCommand::Joint(a) | LeakageCommand::PerCategory(a)) => Some(a.model.seed),
        Command::Leakage(LeakageCommand::Individual(a)) => Some(a.model.seed),
        Command::Validate(a) => Some(a.model.seed),
        _ => None,
    }
}

fn execute(cli: &Cli, args: &[OsString]) -> Result<(), Failure> {
    configure_threads(cli.threads)?;
    fs::create_dir_all(&cli.output).map_err(io("output", &cli.output))?;
    let mut run = Run {
        out: &cli.output,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Extract(a) => extract(&mut run, a)?,
        Command::Analyze(a) => analyze(&mut run, a)?,
        Command::Leakage(LeakageCommand::Joint(a)) => leakage(&mut run, a, false)?,
        Command::Leakage(LeakageCommand::PerCategory(a)) => leakage(&mut run, a, true)?,
        Command::Leakage(LeakageCommand::Individual(a)) => individual(&mut run, a)?,
        Command::Defend(a) => defend(&mut run, a)?,
        Command::Bounds(a) => bounds(&mut run, a)?,
        Command::Validate(a) => validate(&mut run, a)?,
    }
    let manifest = Manifest {
        tool: "wfleak",
        version: env!("CARGO_PKG_VERSION"),
        layout_version: LAYOUT_VERSION,
        model_format_version: MODEL_FORMAT_VERSION,
        command: command_path(&cli.command),
        args: args.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config: cli,
        seed: seed_of(&cli.command),
        inputs: std::mem::take(&mut run.inputs),
        outputs: std::mem::take(&mut run.outputs),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = cli.output.join("manifest.json");
    fs::write(&path, json + "\n").map_err(io("output", &path))
}

/// Digest over every trace file of a dataset directory, by relative path.
fn dataset_digest(root: &Path) -> Result<String, Failure> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(io("load", &dir))? {
            let path = entry.map_err(io("load", &dir))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "trace") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().into_owned();
        let bytes = fs::read(&f).map_err(io("load", &f))?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn read_traces(root: &Path) -> Result<Dataset, Failure> {
    let (dataset, report) = load_dataset(root).map_err(|e| data("load")(&e))?;
    for (path, reason) in &report.skipped {
        log::warn!("skipped {}: {reason}", path.display());
    }
    Ok(dataset)
}

fn extract_table(dataset: &Dataset) -> Result<(FeatureTable, Vec<(String, String, String)>), Failure> {
    let (table, failed) = FeatureTable::from_dataset(dataset).map_err(|e| data("extract")(&e))?;
    Ok((
        table,
        failed.into_iter().map(|(w, v, e)| (w, v, e.to_string())).collect(),
    ))
}

fn cache_dir(run: &Run, model: &ModelArgs) -> PathBuf {
    model.cache_dir.clone().unwrap_or_else(|| run.out.join("cache"))
}

/// Loads the feature table from a CSV or a trace directory; extraction
/// results are cached by dataset digest. Returns the table and its digest.
fn load_features(run: &mut Run, input: &InputArgs, cache: &Path) -> Result<(FeatureTable, String), Failure> {
    let csv_path = if let Some(path) = &input.features {
        path.clone()
    } else {
        let root = input.dataset.as_ref().expect("clap enforces one input");
        let digest = dataset_digest(root)?;
        let cached = cache.join(format!("features-v{LAYOUT_VERSION}-{}.csv", &digest[..16]));
        if !cached.exists() {
            let dataset = read_traces(root)?;
            let (table, _) = extract_table(&dataset)?;
            fs::create_dir_all(cache).map_err(io("cache", cache))?;
            table.write_csv(&cached).map_err(|e| data("cache")(&e))?;
        } else {
            log::info!("using cached features {}", cached.display());
        }
        run.note_input(root, digest);
        cached
    };
    let bytes = fs::read(&csv_path).map_err(io("load", &csv_path))?;
    let digest = sha256_hex(&bytes);
    if input.features.is_some() {
        run.note_input(&csv_path, digest.clone());
    }
    let table = FeatureTable::read_csv(&csv_path).map_err(|e| data("load")(&e))?;
    Ok((table, digest))
}

/// Entries of a prior file: `probability` or `name,probability` per line.
fn read_prior_file(path: &Path) -> Result<Vec<(Option<String>, f64)>, Failure> {
    let text = fs::read_to_string(path).map_err(io("prior", path))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, p) = match line.rsplit_once(',') {
            Some((name, p)) => (Some(name.trim().to_string()), p),
            None => (None, line),
        };
        let p: f64 = p.trim().parse().map_err(|_| Failure::Data {
            stage: "prior",
            message: format!("{} line {}: bad probability", path.display(), n + 1),
        })?;
        entries.push((name, p));
    }
    Ok(entries)
}

fn prior_spec(run: &mut Run, spec: &str, websites: &[String]) -> Result<PriorSpec, Failure> {
    match spec {
        "uniform" => Ok(PriorSpec::Uniform),
        "zipf" => Ok(PriorSpec::Zipf),
        other => {
            let Some(path) = other.strip_prefix("file:") else {
                return Err(Failure::Usage(format!(
                    "unknown prior {other:?} (uniform, zipf, file:PATH)"
                )));
            };
            let path = Path::new(path);
            let bytes = fs::read(path).map_err(io("prior", path))?;
            run.note_input(path, sha256_hex(&bytes));
            let entries = read_prior_file(path)?;
            let probs = if entries.iter().all(|e| e.0.is_some()) {
                websites
                    .iter()
                    .map(|w| {
                        entries
                            .iter()
                            .find(|e| e.0.as_deref() == Some(w.as_str()))
                            .map(|e| e.1)
                            .ok_or_else(|| Failure::Data {
                                stage: "prior",
                                message: format!("no prior for website {w}"),
                            })
                    })
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                entries.into_iter().map(|e| e.1).collect()
            };
            Ok(PriorSpec::Explicit(probs))
        }
    }
}

fn world_config(world: &WorldArgs, prior: PriorSpec) -> Result<WorldConfig, Failure> {
    let open = match world.world {
        WorldKind::Closed => None,
        WorldKind::Open => {
            if world.monitored.is_empty() {
                return Err(Failure::Usage("--world open needs --monitored".into()));
            }
            Some(OpenWorld {
                monitored: world.monitored.clone(),
                mode: match world.non_monitored {
                    NonMonitoredKind::Pooled => NonMonitoredMode::Pooled,
                    NonMonitoredKind::PerSite => NonMonitoredMode::PerSite,
                },
            })
        }
    };
    Ok(WorldConfig { prior, open })
}

fn grouping_params(model: &ModelArgs, g: &GroupingArgs) -> Result<GroupingParams, Failure> {
    if !(0.0..=1.0).contains(&g.prune_threshold) {
        return Err(Failure::Usage("--prune-threshold must lie in [0, 1]".into()));
    }
    if !(g.eps > 0.0 && g.eps <= 1.0) {
        return Err(Failure::Usage("--eps must lie in (0, 1]".into()));
    }
    if g.top_n == 0 || model.mc_samples == 0 {
        return Err(Failure::Usage("--top-n and --mc-samples must be positive".into()));
    }
    Ok(GroupingParams {
        top_n: g.top_n,
        prune_threshold: g.prune_threshold,
        eps: g.eps,
        beta: model.beta,
        mc: McConfig::new(g.rank_samples.unwrap_or(model.mc_samples), model.seed),
    })
}

/// Builds the grouping, reusing a cached one keyed by the feature digest,
/// the parameters and the prior.
fn grouping_for(
    table: &FeatureTable,
    digest: &str,
    prior: &PriorSpec,
    params: GroupingParams,
    cache: &Path,
) -> Result<GroupingReport, Failure> {
    let key = serde_json::to_string(&(digest, prior, params)).expect("key serializes");
    let cached = cache.join(format!("grouping-{}.json", &sha256_hex(key.as_bytes())[..16]));
    if let Ok(text) = fs::read_to_string(&cached) {
        if let Ok(report) = serde_json::from_str::<GroupingReport>(&text) {
            log::info!("using cached grouping {}", cached.display());
            return Ok(report);
        }
    }
    let resolved = prior.resolve(table.class_count()).map_err(quant("analyze"))?;
    let report = build_grouping(table, &resolved, params).map_err(quant("analyze"))?;
    fs::create_dir_all(cache).map_err(io("cache", cache))?;
    fs::write(&cached, report.to_json()).map_err(io("cache", &cached))?;
    Ok(report)
}

fn read_grouping(run: &mut Run, path: &Path) -> Result<GroupingReport, Failure> {
    let text = fs::read_to_string(path).map_err(io("load", path))?;
    run.note_input(path, sha256_hex(text.as_bytes()));
    serde_json::from_str(&text).map_err(|e| data("load")(&e))
}

fn extract(run: &mut Run, a: &ExtractArgs) -> Result<(), Failure> {
    run.note_input(&a.dataset, dataset_digest(&a.dataset)?);
    let dataset = read_traces(&a.dataset)?;
    let (table, failed) = extract_table(&dataset)?;
    run.write("features.csv", &table.to_csv_bytes())?;
    let layout = serde_json::to_string_pretty(&LayoutMap::current()).expect("layout serializes");
    run.write("layout.json", layout.as_bytes())?;
    #[derive(Serialize)]
    struct Report {
        traces: usize,
        websites: usize,
        failed: Vec<(String, String, String)>,
    }
    let report = Report {
        traces: table.len(),
        websites: table.class_count(),
        failed,
    };
    run.write(
        "extract_report.json",
        serde_json::to_string_pretty(&report).expect("serializes").as_bytes(),
    )?;
    println!("extracted {} traces from {} websites", table.len(), table.class_count());
    Ok(())
}

fn ranking_csv(report: &GroupingReport) -> String {
    let mut out = String::from("rank,feature,name,bits,stderr,error\n");
    for (i, r) in report.ranking.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            i + 1,
            r.feature,
            report.feature_names[r.feature],
            r.bits,
            r.stderr,
            r.error.as_deref().unwrap_or("")
        );
    }
    out
}

fn analyze(run: &mut Run, a: &AnalyzeArgs) -> Result<(), Failure> {
    let cache = cache_dir(run, &a.model);
    let (table, digest) = load_features(run, &a.input, &cache)?;
    let prior = prior_spec(run, &a.model.prior, &table.websites())?;
    let params = grouping_params(&a.model, &a.grouping)?;
    let report = grouping_for(&table, &digest, &prior, params, &cache)?;
    run.write("grouping.json", report.to_json().as_bytes())?;
    run.write("ranking.csv", ranking_csv(&report).as_bytes())?;
    let columns: Vec<Vec<f64>> = (0..table.width()).map(|f| table.column(f)).collect();
    let nmi = DiscretizedFeatures::new(&columns).map_err(|e| Failure::Numeric {
        stage: "analyze",
        message: e.to_string(),
    })?;
    let kept = &report.grouping.kept_features;
    let names: Vec<String> = kept.iter().map(|&f| table.names()[f].clone()).collect();
    run.write("nmi.csv", nmi.matrix(kept).to_csv(&names).as_bytes())?;
    println!(
        "kept {} features in {} clusters ({} pruned as redundant)",
        kept.len(),
        report.grouping.clusters.len(),
        report.grouping.pruned_redundant.len()
    );
    Ok(())
}

fn leakage(run: &mut Run, a: &LeakageArgs, per_category: bool) -> Result<(), Failure> {
    let cache = cache_dir(run, &a.model);
    let (table, digest) = load_features(run, &a.input, &cache)?;
    let prior = prior_spec(run, &a.model.prior, &table.websites())?;
    let world = world_config(&a.world, prior.clone())?;
    let report = match &a.grouping_file {
        Some(path) => read_grouping(run, path)?,
        None => grouping_for(&table, &digest, &prior, grouping_params(&a.model, &a.grouping)?, &cache)?,
    };
    let mc = McConfig::new(a.model.mc_samples, a.model.seed);
    let groups = &report.grouping.clusters;
    let est = joint_leakage(&table, groups, &world, mc, a.model.beta).map_err(quant("leakage"))?;
    let categories = if per_category {
        if table.width() != FEATURE_COUNT {
            return Err(Failure::Data {
                stage: "leakage",
                message: "per-category leakage needs the full fingerprint layout".into(),
            });
        }
        per_category_leakage(&table, groups, &world, mc, a.model.beta).map_err(quant("leakage"))?
    } else {
        Vec::new()
    };
    if per_category {
        let mut csv = String::from("category,name,features,bits,stderr\n");
        for c in &categories {
            let fmt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                c.category,
                c.name,
                c.features,
                fmt(c.bits),
                fmt(c.stderr)
            );
        }
        run.write("per_category.csv", csv.as_bytes())?;
    }
    let result = LeakageReport::new(&world, mc, &est, categories);
    run.write(
        "leakage.json",
        (serde_json::to_string_pretty(&result).expect("serializes") + "\n").as_bytes(),
    )?;
    println!("{:.4} bits (MC standard error {:.4})", est.bits, est.mc_standard_error);
    Ok(())
}

fn individual(run: &mut Run, a: &IndividualArgs) -> Result<(), Failure> {
    if a.model.mc_samples == 0 {
        return Err(Failure::Usage("--mc-samples must be positive".into()));
    }
    let cache = cache_dir(run, &a.model);
    let (table, _) = load_features(run, &a.input, &cache)?;
    let prior = prior_spec(run, &a.model.prior, &table.websites())?
        .resolve(table.class_count())
        .map_err(quant("leakage"))?;
    let features: Vec<usize> = (0..table.width()).collect();
    let ranking = rank_features(
        &table,
        &features,
        &prior,
        McConfig::new(a.model.mc_samples, a.model.seed),
        a.model.beta,
    );
    let mut entries = ranking.entries().to_vec();
    entries.sort_by_key(|e| e.feature);
    let mut csv = String::from("feature,name,bits,stderr,error\n");
    for e in &entries {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            e.feature,
            table.names()[e.feature],
            e.bits,
            e.stderr,
            e.error.as_deref().unwrap_or("")
        );
    }
    run.write("individual.csv", csv.as_bytes())?;
    if let Some(top) = ranking.entries().first() {
        println!(
            "most informative: {} ({:.4} bits)",
            table.names()[top.feature],
            top.bits
        );
    }
    Ok(())
}

fn defend(run: &mut Run, a: &DefendArgs) -> Result<(), Failure> {
    let missing = |flag: &str| Failure::Usage(format!("--{flag} is required for this defense"));
    let bad = |e: crate::defenses::DefenseError| Failure::Usage(e.to_string());
    run.note_input(&a.dataset, dataset_digest(&a.dataset)?);
    let dataset = read_traces(&a.dataset)?;
    let (defended, cell_size) = match a.defense {
        DefenseKind::Buflo => {
            let p = BufloParams::new(
                a.tau.ok_or_else(|| missing("tau"))?,
                a.rho.ok_or_else(|| missing("rho"))?,
                a.cell_size.ok_or_else(|| missing("cell-size"))?,
            )
            .map_err(bad)?;
            (dataset.map_traces(|t| apply_buflo(t, &p)), p.cell_size)
        }
        DefenseKind::Tamaraw => {
            let p = TamarawParams::new(
                a.l.ok_or_else(|| missing("l"))?,
                a.rho_out.ok_or_else(|| missing("rho-out"))?,
                a.rho_in.ok_or_else(|| missing("rho-in"))?,
            )
            .map_err(bad)?;
            (
                dataset.map_traces(|t| apply_tamaraw(t, &p)),
                crate::traces::DEFAULT_CELL_SIZE,
            )
        }
    };
    let dir = run.out.join("defended");
    write_dataset(&defended, &dir).map_err(io("defend", &dir))?;
    let mut csv = String::from("website_id,visit_id,real_cells,defended_cells,bandwidth_overhead,latency_overhead\n");
    let (mut real, mut padded) = (0usize, 0usize);
    for (orig, def) in dataset.iter().zip(defended.iter()) {
        let o = overhead(orig, def, cell_size);
        real += o.real_cells;
        padded += o.defended_cells;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            orig.website_id,
            orig.visit_id,
            o.real_cells,
            o.defended_cells,
            o.bandwidth,
            o.latency.map_or(String::new(), |l| l.to_string())
        );
    }
    run.write("overhead.csv", csv.as_bytes())?;
    run.outputs.push(FileDigest {
        path: "defended/".into(),
        sha256: dataset_digest(&dir)?,
    });
    println!(
        "defended {} traces; bandwidth overhead {:.3}",
        defended.len(),
        padded as f64 / real as f64
    );
    Ok(())
}

fn bounds(run: &mut Run, a: &BoundsArgs) -> Result<(), Failure> {
    let usage = |e: crate::bounds::BoundsError| Failure::Usage(e.to_string());
    let prior = match &a.prior_file {
        Some(path) => {
            let bytes = fs::read(path).map_err(io("prior", path))?;
            run.note_input(path, sha256_hex(&bytes));
            let probs: Vec<f64> = read_prior_file(path)?.into_iter().map(|e| e.1).collect();
            let prior = DiscreteDistribution::new(probs).map_err(|e| data("prior")(&e))?;
            if a.n.is_some_and(|n| n != prior.len()) {
                return Err(Failure::Usage("--n disagrees with the prior file".into()));
            }
            prior
        }
        None => {
            let n =
                a.n.ok_or_else(|| Failure::Usage("--n or --prior-file is required".into()))?;
            if n < 2 {
                return Err(usage(crate::bounds::BoundsError::WorldSize(n)));
            }
            DiscreteDistribution::uniform(n)
        }
    };
    let csv = alpha_sweep_csv(&prior, a.accuracy).map_err(usage)?;
    run.write("bounds.csv", csv.as_bytes())?;
    let b = leakage_bounds(&prior, a.accuracy).map_err(usage)?;
    let range = theorem1_range(prior.len(), a.accuracy).map_err(usage)?;
    println!(
        "n = {}, accuracy {}: leakage in [{:.4}, {:.4}] bits, range {:.4}",
        prior.len(),
        a.accuracy,
        b.min_bits,
        b.max_bits,
        range
    );
    Ok(())
}

fn validate(run: &mut Run, a: &ValidateArgs) -> Result<(), Failure> {
    let cache = cache_dir(run, &a.model);
    let (table, digest) = load_features(run, &a.input, &cache)?;
    let prior = prior_spec(run, &a.model.prior, &table.websites())?;
    let report = match &a.grouping_file {
        Some(path) => read_grouping(run, path)?,
        None => grouping_for(&table, &digest, &prior, grouping_params(&a.model, &a.grouping)?, &cache)?,
    };
    let config = ResampleConfig::new(a.trials, a.ci, a.model.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let mc = McConfig::new(a.model.mc_samples, a.model.seed);
    let groups = report.grouping.clusters.clone();
    let world_args = &a.world;
    let beta = a.model.beta;
    let validation_failure = |e: ValidationError| match e {
        ValidationError::WorldSize { .. } | ValidationError::Trials(_) | ValidationError::Level(_) => {
            Failure::Usage(e.to_string())
        }
        other => Failure::Numeric {
            stage: "validate",
            message: other.to_string(),
        },
    };
    let interval = match a.mode {
        ResampleMode::Bootstrap => {
            let world = world_config(world_args, prior.clone())?;
            bootstrap_ci(
                &table,
                |t| joint_leakage(t, &groups, &world, mc, beta).map(|e| e.bits),
                &config,
            )
            .map_err(validation_failure)?
        }
        ResampleMode::Subsample => {
            let size = a
                .world_size
                .ok_or_else(|| Failure::Usage("--world-size is required for subsampling".into()))?;
            if !matches!(prior, PriorSpec::Uniform | PriorSpec::Zipf) {
                return Err(Failure::Usage("subsampling supports uniform or zipf priors".into()));
            }
            let world = world_config(world_args, prior.clone())?;
            subsample_ci(
                &table,
                |t| joint_leakage(t, &groups, &world, mc, beta).map(|e| e.bits),
                size,
                &config,
            )
            .map_err(validation_failure)?
        }
    };
    #[derive(Serialize)]
    struct Out<'a> {
        mode: &'a ResampleMode,
        trials: usize,
        ci_level: f64,
        seed: u64,
        world_size: Option<usize>,
        low: f64,
        high: f64,
        point: Option<f64>,
        values: &'a [Option<f64>],
    }
    let out = Out {
        mode: &a.mode,
        trials: a.trials,
        ci_level: a.ci,
        seed: a.model.seed,
        world_size: a.world_size,
        low: interval.low,
        high: interval.high,
        point: interval.point,
        values: &interval.trials,
    };
    run.write(
        "validation.json",
        (serde_json::to_string_pretty(&out).expect("serializes") + "\n").as_bytes(),
    )?;
    run.write("validation_trials.csv", interval.to_csv().as_bytes())?;
    println!(
        "{:.0}% interval [{:.4}, {:.4}] bits",
        a.ci * 100.0,
        interval.low,
        interval.high
    );
    Ok(())
}
