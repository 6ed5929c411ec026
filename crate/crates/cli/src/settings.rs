//! Attack settings: explicit flags override the `--config` TOML file, which
//! overrides the built-in defaults.

use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Deserialize;

use sbfa::attack::{AttackConfig, Method};
use sbfa::nnet::TaskSpec;
use sbfa::tensormodel::AttackMode;

use crate::Failure;

pub const DEFAULT_TASK: &str = "toy-mmlu";
pub const DEFAULT_OUT: &str = "sbfa-out";

#[derive(Args, Debug, Clone, Default)]
pub struct AttackArgs {
    /// TOML file with any of the keys below (snake_case); flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundle manifest (model.json).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Task suite file written by train-toy (tasks.json).
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Task to attack [default: toy-mmlu].
    #[arg(long)]
    pub task: Option<String>,
    /// sbfa, bfa-no-range, bfa-in-range or bfa-sign-only [default: sbfa].
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// float, int8 or mixed [default: float].
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AttackMode>,
    /// Top-k queue size [default: 100].
    #[arg(long)]
    pub k: Option<usize>,
    /// Accuracy strictly below this ends the attack [default: task chance level].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Comma-separated run seeds [default: 1,2,3].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Tensor-name glob to leave untouched; repeatable.
    #[arg(long = "exclude")]
    pub exclude: Vec<String>,
    /// Keep each tensor's [min, max] from before the attack instead of
    /// rescanning after every applied flip.
    #[arg(long)]
    pub freeze_range: bool,
    /// Evaluate candidates on only the first N evaluation samples.
    #[arg(long)]
    pub fast_eval: Option<usize>,
    /// Iteration budget [default: 500].
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Gradient samples per iteration [default: 200].
    #[arg(long)]
    pub grad_samples: Option<usize>,
    /// Evaluation samples [default: 100].
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Comma-separated tasks to evaluate the found flips on.
    #[arg(long, value_delimiter = ',')]
    pub transfer_to: Vec<String>,
    /// Output directory [default: sbfa-out].
    #[arg(long, env = "SBFA_OUT_DIR")]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<AttackMode, String> {
    s.parse()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    bundle: Option<PathBuf>,
    tasks: Option<PathBuf>,
    task: Option<String>,
    method: Option<Method>,
    mode: Option<AttackMode>,
    k: Option<usize>,
    threshold: Option<f64>,
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    exclude: Vec<String>,
    #[serde(default)]
    freeze_range: bool,
    fast_eval: Option<usize>,
    max_iter: Option<usize>,
    grad_samples: Option<usize>,
    eval_samples: Option<usize>,
    #[serde(default)]
    transfer_to: Vec<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub bundle: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub task: String,
    pub method: Method,
    pub mode: AttackMode,
    pub k: usize,
    pub threshold: Option<f64>,
    pub seeds: Vec<u64>,
    pub exclude: Vec<String>,
    pub freeze_range: bool,
    pub fast_eval: Option<usize>,
    pub max_iter: usize,
    pub grad_samples: usize,
    pub eval_samples: usize,
    pub transfer_to: Vec<String>,
    pub out: PathBuf,
}

fn or_vec(flag: &[String], file: Vec<String>) -> Vec<String> {
    if flag.is_empty() {
        file
    } else {
        flag.to_vec()
    }
}

impl Settings {
    pub fn resolve(args: &AttackArgs) -> Result<Settings, Failure> {
        let file = match &args.config {
            None => FileConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Failure::usage(format!("bad config {}: {e}", p.display())))?
            }
        };
        let defaults = AttackConfig::for_task(&placeholder_task(), AttackMode::Float);
        Ok(Settings {
            bundle: args.bundle.clone().or(file.bundle),
            tasks: args.tasks.clone().or(file.tasks),
            task: args.task.clone().or(file.task).unwrap_or_else(|| DEFAULT_TASK.into()),
            method: args.method.or(file.method).unwrap_or(Method::Sbfa),
            mode: args.mode.or(file.mode).unwrap_or(AttackMode::Float),
            k: args.k.or(file.k).unwrap_or(defaults.k),
            threshold: args.threshold.or(file.threshold),
            seeds: args.seeds.clone().or(file.seeds).unwrap_or(defaults.seeds),
            exclude: or_vec(&args.exclude, file.exclude),
            freeze_range: args.freeze_range || file.freeze_range,
            fast_eval: args.fast_eval.or(file.fast_eval),
            max_iter: args.max_iter.or(file.max_iter).unwrap_or(defaults.max_iterations),
            grad_samples: args.grad_samples.or(file.grad_samples).unwrap_or(defaults.grad_samples),
            eval_samples: args.eval_samples.or(file.eval_samples).unwrap_or(defaults.eval_samples),
            transfer_to: or_vec(&args.transfer_to, file.transfer_to),
            out: args.out.clone().or(file.out).unwrap_or_else(|| DEFAULT_OUT.into()),
        })
    }

    pub fn attack_config(&self, task: &TaskSpec) -> AttackConfig {
        AttackConfig {
            task: task.name.clone(),
            method: self.method,
            mode: self.mode,
            k: self.k,
            grad_samples: self.grad_samples,
            eval_samples: self.eval_samples,
            critical_threshold: self.threshold.unwrap_or(task.chance_level),
            max_iterations: self.max_iter,
            seeds: self.seeds.clone(),
            exclusions: self.exclude.clone(),
            freeze_range: self.freeze_range,
            fast_eval: self.fast_eval,
        }
    }
}

fn placeholder_task() -> TaskSpec {
    sbfa::nnet::TaskSuite::toy(0, 1).tasks.remove(0)
}
