//! `kvg`: synthesize composite grounding scenes, package SFT data, filter
//! RL samples, train the toy GRPO policy, score rewards, evaluate, and
//! compare token distributions.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 internal invariant violation.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Override;

#[derive(Debug, Parser)]
#[command(name = "kvg", version, about = "Knowledge-intensive visual grounding pipeline")]
struct Cli {
    /// TOML config file. Flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key, e.g. `--set grpo.beta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (config key `paths.out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 0 picks one per core. Never changes outputs.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compose multi-object scenes from a source manifest and split them.
    Synth {
        #[arg(long)]
        sources: Option<PathBuf>,
    },
    /// Emit CoT prompts for stage-1 scenes and pack teacher CoT into SFT records.
    PackSft {
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        cots: Option<PathBuf>,
    },
    /// Keep only queries the policy sometimes, but not always, gets right.
    Filter {
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Recorded responses (query_id, sample_index, response) instead of the toy scorer.
        #[arg(long)]
        responses: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train the softmax toy policy with GRPO.
    TrainToy {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Reward computations.
    Reward {
        #[command(subcommand)]
        action: RewardAction,
    },
    /// Score predictions against ground truth and aggregate accuracy.
    Eval(EvalArgs),
    /// Per-segment KL divergence over token distribution traces.
    AnalyzeKl {
        /// Directory of `*.jsonl` trace files.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum RewardAction {
    /// Score (response, gt) pairs.
    Score {
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Earlier `eval_report.json` to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Tag column to group by. Repeatable.
    #[arg(long = "tag-column")]
    tag_columns: Vec<String>,
    /// `tagged` or `bare_box`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<kvg_core::Error> for CliError {
    fn from(e: kvg_core::Error) -> Self {
        let code = if e.is_invariant_violation() {
            3
        } else if e.is_data_error() {
            2
        } else {
            1
        };
        CliError { code, message: e.to_string() }
    }
}

impl Cli {
    fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut out: Vec<Override> = self.sets.iter().map(|s| Override::parse(s)).collect::<Result<_, _>>()?;
        if let Some(s) = self.seed {
            out.push(Override::new("seed", s as i64));
        }
        if let Some(p) = &self.out {
            out.push(Override::path("paths.out_dir", p));
        }
        let path = |out: &mut Vec<Override>, key: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                out.push(Override::path(key, p));
            }
        };
        match &self.command {
            Command::Synth { sources } => path(&mut out, "paths.sources", sources),
            Command::PackSft { scenes, cots } => {
                path(&mut out, "paths.scenes", scenes);
                path(&mut out, "paths.cots", cots);
            }
            Command::Filter { scenes, responses, n_samples, threshold } => {
                path(&mut out, "paths.scenes", scenes);
                path(&mut out, "paths.responses", responses);
                if let Some(n) = n_samples {
                    out.push(Override::new("filter.n_samples", *n as i64));
                }
                if let Some(t) = threshold {
                    out.push(Override::new("filter.threshold", *t));
                }
            }
            Command::TrainToy { iterations, beta } => {
                if let Some(n) = iterations {
                    out.push(Override::new("grpo.iterations", *n as i64));
                }
                if let Some(b) = beta {
                    out.push(Override::new("grpo.beta", *b));
                }
            }
            Command::Reward { action: RewardAction::Score { pairs } } => path(&mut out, "paths.pairs", pairs),
            Command::Eval(a) => {
                path(&mut out, "paths.gt", &a.gt);
                path(&mut out, "paths.predictions", &a.predictions);
                path(&mut out, "paths.baseline", &a.baseline);
                if let Some(t) = a.threshold {
                    out.push(Override::new("eval.threshold", t));
                }
                if !a.tag_columns.is_empty() {
                    let cols: Vec<toml::Value> = a.tag_columns.iter().cloned().map(toml::Value::String).collect();
                    out.push(Override::new("eval.tag_columns", cols));
                }
                if let Some(m) = &a.mode {
                    out.push(Override::new("eval.mode", m.replace('-', "_")));
                }
            }
            Command::AnalyzeKl { traces } => path(&mut out, "paths.traces", traces),
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        match self.command {
            Command::Synth { .. } => "synth",
            Command::PackSft { .. } => "pack-sft",
            Command::Filter { .. } => "filter",
            Command::TrainToy { .. } => "train-toy",
            Command::Reward { .. } => "reward score",
            Command::Eval(_) => "eval",
            Command::AnalyzeKl { .. } => "analyze-kl",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides()?)?;
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError { code: 3, message: format!("thread pool: {e}") })?;
    }
    let ctx = output::Context::new(cli.name(), cfg)?;
    match cli.command {
        Command::Synth { .. } => commands::synth(&ctx),
        Command::PackSft { .. } => commands::pack_sft(&ctx),
        Command::Filter { .. } => commands::filter(&ctx),
        Command::TrainToy { .. } => commands::train_toy(&ctx),
        Command::Reward { action: RewardAction::Score { .. } } => commands::reward_score(&ctx),
        Command::Eval(_) => commands::eval(&ctx),
        Command::AnalyzeKl { .. } => commands::analyze_kl(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvg: {e}");
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kvg_core::Error;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| CliError::from(e).code;
        assert_eq!(code(Error::InvalidArgument("x".into())), 1);
        assert_eq!(code(Error::InvalidBox("x".into())), 2);
        assert_eq!(code(Error::UnknownInstance("x".into())), 2);
        assert_eq!(code(Error::MissingCot { scene_id: "s".into(), target: 0 }), 2);
        assert_eq!(code(Error::NonFinite("x".into())), 3);
        assert_eq!(code(Error::Invariant("x".into())), 3);
    }
}
