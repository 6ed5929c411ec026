mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use sbfa::attack::{self, AttackReport, Census, Termination};
use sbfa::bitcodec::FormatSpec;
use sbfa::error::BundleError;
use sbfa::export;
use sbfa::nnet::{self, Architecture, TaskSuite, TrainConfig};
use sbfa::tensormodel::{self, ModelBundle};

use settings::{AttackArgs, Settings};

const EXIT_USAGE: u8 = 64;
const EXIT_DATAERR: u8 = 65;

const CSV_HELP: &str = "\
Output files (attack writes one seed-<N>/ directory per seed):
  report.json       full deterministic audit trail of the run
  timings.json      wall-clock seconds per phase
Every CSV starts with a `# config: {...}` line echoing the configuration.
  flips.csv         iteration,tensor,layer_index,param_kind,flat_index,bit_position,
                    old_value,new_value,delta,impact_score,sneaky,accuracy_after
  census.csv        rank,tensor,layer_index,param_kind,flat_index,bit_position,delta,
                    impact_score,post_acc,critical
  distribution.csv  layer_index,param_kind,count   (critical single flips per component)
  timings.csv       phase,name,seconds,share
  transfer.csv      task,pre_acc,post_acc,numerical_error
  summary.csv       seed,pre_acc,post_acc,flips,crit_1flip,termination,exit_code,best
Floats use the shortest round-trip decimal; nan, inf and -inf are spelled out;
an empty cell means the value is absent (e.g. a forward pass failed).

Exit codes: 0 below threshold, 2 iteration budget spent, no candidate or stalled,
3 numerical error, 64 usage error, 65 input file error.";

#[derive(Parser, Debug)]
#[command(name = "sbfa", version, about = "Sneaky bit-flip attacks on toy networks", after_help = CSV_HELP)]
struct Cli {
    /// Worker threads for search and candidate evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a victim on the built-in task suite and save it.
    TrainToy(TrainArgs),
    /// Convert every matrix of a bundle to per-row INT8.
    Quantize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attack once per seed.
    Attack(AttackArgs),
    /// Count critical single flips, reusing a run's first iteration if given.
    Census(CensusArgs),
    /// Replay a run's flips on other tasks.
    Transfer(TransferArgs),
    /// Regenerate CSVs from the JSON reports under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ArchKind {
    Linear,
    Mlp,
    Attention,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, env = "SBFA_OUT_DIR")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mlp")]
    arch: ArchKind,
    /// Storage format of the saved weights: bf16, fp16 or fp32.
    #[arg(long, default_value = "bf16", value_parser = parse_format)]
    format: FormatSpec,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Gaussian-mixture features per sample (a task one-hot is appended).
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Attention only: number of tokens the input is split into.
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
}

#[derive(Args, Debug)]
struct CensusArgs {
    /// Run directory holding report.json; its first iteration is reused.
    #[arg(long, conflicts_with_all = ["bundle", "tasks"])]
    dir: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackArgs,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Run directory holding report.json.
    #[arg(long)]
    dir: PathBuf,
    /// The pre-attack bundle the run started from.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    /// Tasks to evaluate (default: every task in the suite).
    #[arg(long = "task", value_delimiter = ',')]
    targets: Vec<String>,
}

fn parse_format(s: &str) -> Result<FormatSpec, String> {
    match FormatSpec::from_tag(s) {
        Ok(f) if f.is_float() => Ok(f),
        Ok(_) => Err("train-toy stores floats; use `quantize` for int8".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// What `train-toy` writes next to the bundle.
#[derive(Debug, Serialize, Deserialize)]
pub struct TaskFile {
    pub suite: TaskSuite,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub format: String,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_DATAERR, message: message.into() }
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        let code = match e {
            BundleError::Mode { .. } | BundleError::Pattern { .. } | BundleError::AlreadyQuantized => EXIT_USAGE,
            _ => EXIT_DATAERR,
        };
        Failure { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<u8> {
    match command {
        Command::TrainToy(args) => train_toy(&args).map(|_| 0),
        Command::Quantize { bundle, out } => {
            let b = tensormodel::load_bundle(&bundle)?;
            let q = tensormodel::quantize_int8(&b)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            tensormodel::save_bundle(&q, &out)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Attack(args) => attack_cmd(&args),
        Command::Census(args) => census_cmd(&args).map(|_| 0),
        Command::Transfer(args) => transfer_cmd(&args).map(|_| 0),
        Command::Report { dir } => report_cmd(&dir).map(|_| 0),
    }
}

fn build_arch(args: &TrainArgs, suite: &TaskSuite) -> CliResult<Architecture> {
    let input_dim = suite.input_dim();
    let num_classes = suite.max_classes();
    Ok(match args.arch {
        ArchKind::Linear => Architecture::Linear { input_dim, num_classes },
        ArchKind::Mlp => {
            Architecture::Mlp { input_dim, width: args.width, hidden: args.hidden, blocks: args.blocks, num_classes }
        }
        ArchKind::Attention => {
            if args.tokens == 0 || !input_dim.is_multiple_of(args.tokens) {
                return Err(Failure::usage(format!(
                    "input width {input_dim} (features + task one-hot) is not divisible into {} tokens",
                    args.tokens
                )));
            }
            Architecture::Attention {
                tokens: args.tokens,
                token_dim: input_dim / args.tokens,
                width: args.width,
                hidden: args.hidden,
                num_classes,
            }
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn train_toy(args: &TrainArgs) -> CliResult<()> {
    if args.feature_dim == 0 || args.width == 0 || args.hidden == 0 || args.epochs == 0 {
        return Err(Failure::usage("dimensions and epochs must be positive"));
    }
    let suite = TaskSuite::toy(args.seed, args.feature_dim);
    let arch = build_arch(args, &suite)?;
    let config =
        TrainConfig { epochs: args.epochs, learning_rate: args.learning_rate, seed: args.seed, ..TrainConfig::default() };
    info!("training {} parameters", arch.num_params());
    let params = nnet::train(&arch, &suite, &config).map_err(|e| Failure::data(format!("training diverged: {e}")))?;
    let bundle = ModelBundle::from_params(arch.clone(), &params, args.format)?;
    create_dir(&args.out)?;
    let model = args.out.join("model.json");
    tensormodel::save_bundle(&bundle, &model)?;
    let tasks = args.out.join("tasks.json");
    write_json(&tasks, &TaskFile { suite: suite.clone(), architecture: arch, train: config, format: args.format.tag().into() })?;
    for task in &suite.tasks {
        let acc = nnet::evaluate(&bundle, &task.batch(nnet::Split::Eval { run_seed: 0 }))
            .map_err(|e| Failure::data(e.to_string()))?;
        println!("{:<10} held-out accuracy {acc:.3}", task.name);
    }
    println!("wrote {} and {}", model.display(), tasks.display());
    Ok(())
}

fn load_tasks(path: &Path) -> CliResult<TaskFile> {
    let bytes = fs::read(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    let file: TaskFile =
        serde_json::from_slice(&bytes).map_err(|e| Failure::data(format!("malformed {}: {e}", path.display())))?;
    file.suite.validate().map_err(Failure::data)?;
    Ok(file)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn attack_cmd(args: &AttackArgs) -> CliResult<u8> {
    let settings = Settings::resolve(args)?;
    let bundle_path = settings.bundle.as_ref().ok_or_else(|| Failure::usage("--bundle is required"))?;
    let tasks_path = settings.tasks.as_ref().ok_or_else(|| Failure::usage("--tasks is required"))?;
    let bundle = tensormodel::load_bundle(bundle_path)?;
    let tasks = load_tasks(tasks_path)?;
    let task = tasks
        .suite
        .get(&settings.task)
        .ok_or_else(|| Failure::usage(format!("no task `{}` in {}", settings.task, tasks_path.display())))?;
    let config = settings.attack_config(task);
    config.validate().map_err(Failure::usage)?;
    let transfer_tasks: Vec<_> = settings
        .transfer_to
        .iter()
        .map(|n| tasks.suite.get(n).ok_or_else(|| Failure::usage(format!("no task `{n}` to transfer to"))))
        .collect::<CliResult<_>>()?;

    let mut reports = Vec::new();
    for &seed in &config.seeds {
        info!("seed {seed}: attacking {} with {}", task.name, config.method);
        let mut run = attack::run_attack(&bundle, task, &config, seed)?;
        if !transfer_tasks.is_empty() {
            run.report.transfer =
                attack::transfer_eval(&bundle, &run.report.applied_flips, &transfer_tasks, config.eval_samples, seed)?;
        }
        export::write_attack_run(&seed_dir(&settings.out, seed), &run)?;
        print_run(&run.report);
        print_timings(&run.timings);
        reports.push(run.report);
    }
    let best = attack::best_run(&reports);
    export::write_summary(&settings.out, &reports, best)?;
    let Some(best) = best else {
        return Ok(Termination::MaxIter.exit_code() as u8);
    };
    let r = &reports[best];
    println!(
        "best: seed {} post_acc {} after {} flips ({})",
        r.seed,
        export::fmt_f64(r.post_acc),
        r.flip_count(),
        r.termination.as_str()
    );
    Ok(r.termination.exit_code() as u8)
}

fn print_run(r: &AttackReport) {
    println!(
        "seed {}: pre_acc {} post_acc {} #flip {} #crit-1flip {} termination {}",
        r.seed,
        export::fmt_f64(r.pre_acc),
        export::fmt_f64(r.post_acc),
        r.flip_count(),
        r.census.display_count(),
        r.termination.as_str()
    );
    if let Some(e) = &r.numerical_error {
        println!("  {e}");
    }
    for t in &r.transfer {
        println!("  transfer {}: {} -> {}", t.task, export::fmt_f64(t.pre_acc), t.post_acc.map(export::fmt_f64).unwrap_or("error".into()));
    }
}

fn print_timings(t: &attack::PhaseTimings) {
    let total = t.total();
    for (phase, name, secs) in t.rows() {
        let share = if total > 0.0 { 100.0 * secs / total } else { 0.0 };
        println!("  phase {phase} {name:<34} {secs:>9.3}s {share:>5.1}%");
    }
}

fn census_cmd(args: &CensusArgs) -> CliResult<()> {
    if let Some(dir) = &args.dir {
        let mut report = export::read_report(dir)?;
        if let Some(t) = args.attack.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Failure::usage(format!("threshold {t} outside (0, 1)")));
            }
            report.config.critical_threshold = t;
        }
        let census = recount(&report.census, report.config.critical_threshold);
        let line = export::config_line(&report.config, Some(report.seed));
        write_census(dir, &line, &census)?;
        println!("#crit-1flip {} (threshold {})", census.display_count(), export::fmt_f64(census.threshold));
        return Ok(());
    }
    let settings = Settings::resolve(&args.attack)?;
    let (Some(bundle_path), Some(tasks_path)) = (&settings.bundle, &settings.tasks) else {
        return Err(Failure::usage("census needs --dir, or --bundle with --tasks"));
    };
    let bundle = tensormodel::load_bundle(bundle_path)?;
    let tasks = load_tasks(tasks_path)?;
    let task = tasks.suite.get(&settings.task).ok_or_else(|| Failure::usage(format!("no task `{}`", settings.task)))?;
    let config = settings.attack_config(task);
    config.validate().map_err(Failure::usage)?;
    for &seed in &config.seeds {
        let census = attack::census_crit_1flip(&bundle, task, &config, seed)?;
        let dir = seed_dir(&settings.out, seed);
        create_dir(&dir)?;
        write_census(&dir, &export::config_line(&config, Some(seed)), &census)?;
        println!("seed {seed}: #crit-1flip {}", census.display_count());
    }
    Ok(())
}

/// Re-applies `threshold` to persisted per-candidate accuracies.
fn recount(census: &Census, threshold: f64) -> Census {
    let mut entries = census.entries.clone();
    for e in &mut entries {
        e.critical = e.post_acc.is_some_and(|a| a < threshold);
    }
    let count = entries.iter().filter(|e| e.critical).count();
    Census { threshold, count, entries }
}

fn write_census(dir: &Path, line: &str, census: &Census) -> CliResult<()> {
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", p.display())))
    };
    write(export::CENSUS_CSV, export::census_table(line, census))?;
    write(export::DISTRIBUTION_CSV, export::distribution_table(line, census))
}

fn transfer_cmd(args: &TransferArgs) -> CliResult<()> {
    let mut report = export::read_report(&args.dir)?;
    let bundle = tensormodel::load_bundle(&args.bundle)?;
    if bundle.checksum() != report.bundle_checksum {
        return Err(Failure::data(format!("{} is not the bundle this run attacked", args.bundle.display())));
    }
    let tasks = load_tasks(&args.tasks)?;
    let targets: Vec<_> = if args.targets.is_empty() {
        tasks.suite.tasks.iter().collect()
    } else {
        args.targets
            .iter()
            .map(|n| tasks.suite.get(n).ok_or_else(|| Failure::usage(format!("no task `{n}`"))))
            .collect::<CliResult<_>>()?
    };
    report.transfer =
        attack::transfer_eval(&bundle, &report.applied_flips, &targets, report.config.eval_samples, report.seed)?;
    let timings = export::read_timings(&args.dir)?;
    export::write_run(&args.dir, &report, &timings)?;
    for t in &report.transfer {
        println!("{:<10} pre {} post {}", t.task, export::fmt_f64(t.pre_acc), t.post_acc.map(export::fmt_f64).unwrap_or("error".into()));
    }
    Ok(())
}

fn report_cmd(dir: &Path) -> CliResult<()> {
    if dir.join(export::REPORT_FILE).is_file() {
        export::regenerate_csvs(dir)?;
        println!("regenerated {}", dir.display());
        return Ok(());
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(export::REPORT_FILE).is_file())
        .collect();
    if runs.is_empty() {
        return Err(Failure::data(format!("no {} under {}", export::REPORT_FILE, dir.display())));
    }
    runs.sort();
    let mut reports = Vec::new();
    for run in &runs {
        export::regenerate_csvs(run)?;
        reports.push(export::read_report(run)?);
    }
    // Summary rows follow the configured seed order, as written by `attack`.
    let order = reports[0].config.seeds.clone();
    reports.sort_by_key(|r| order.iter().position(|&s| s == r.seed).unwrap_or(usize::MAX));
    export::write_summary(dir, &reports, attack::best_run(&reports))?;
    println!("regenerated {} runs under {}", runs.len(), dir.display());
    Ok(())
}
