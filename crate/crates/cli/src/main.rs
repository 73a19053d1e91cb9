mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ttr_core::eval::CloudAlign;
use ttr_core::metrics::DepthAlign;
use ttr_core::net::PromptMode;
use ttr_core::ttt::NormMode;
use ttr_core::autodiff::AutodiffError;
use ttr_core::Error;

#[derive(Parser)]
#[command(name = "ttr", version, about = "Pointmap regression, prompt-only test-time adaptation and global alignment")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene archive.
    Synth(SynthArgs),
    /// Train the pair network from scratch (or resume).
    Pretrain(PretrainArgs),
    /// Tune prompt tokens on one scene with the cross-pair consistency loss.
    Adapt(AdaptArgs),
    /// Predict all pairs and fuse them by global alignment.
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction or scene against ground truth.
    Eval(EvalArgs),
    /// Tabulate cross-pair disagreement of reference-view pointmaps.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Camera offsets of a few centimetres.
    #[arg(long)]
    pub short_baseline: bool,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on this single scene archive.
    #[arg(long)]
    pub overfit: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long, value_enum)]
    pub prompt_mode: Option<PromptModeArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub triplet_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Tuned prompt checkpoint; the plain backbone is used without it.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Comma-separated `ref-src` pairs, e.g. `0-1,1-0,1-2`.
    #[arg(long)]
    pub pairs: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Reconstruction directory or scene archive to score.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth scene archive.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    /// Depth scale alignment.
    #[arg(long, value_enum)]
    pub align: Option<DepthAlignArg>,
    /// Frame alignment of the predicted cloud.
    #[arg(long, value_enum)]
    pub cloud_align: Option<CloudAlignArg>,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Reference views to diagnose (repeatable).
    #[arg(long = "ref")]
    pub references: Vec<usize>,
    /// Diagnose every view as reference.
    #[arg(long, conflicts_with = "references")]
    pub all_refs: bool,
}

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum PromptModeArg {
    PerLayer,
    FirstLayerOnly,
}

impl From<PromptModeArg> for PromptMode {
    fn from(m: PromptModeArg) -> Self {
        match m {
            PromptModeArg::PerLayer => PromptMode::PerLayer,
            PromptModeArg::FirstLayerOnly => PromptMode::FirstLayerOnly,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum NormArg {
    MeanL2,
    SumL2,
}

impl From<NormArg> for NormMode {
    fn from(m: NormArg) -> Self {
        match m {
            NormArg::MeanL2 => NormMode::MeanL2,
            NormArg::SumL2 => NormMode::SumL2,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum DepthAlignArg {
    Med,
    None,
}

impl From<DepthAlignArg> for DepthAlign {
    fn from(m: DepthAlignArg) -> Self {
        match m {
            DepthAlignArg::Med => DepthAlign::Median,
            DepthAlignArg::None => DepthAlign::None,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum CloudAlignArg {
    None,
    Pose,
    Icp,
}

impl From<CloudAlignArg> for CloudAlign {
    fn from(m: CloudAlignArg) -> Self {
        match m {
            CloudAlignArg::None => CloudAlign::None,
            CloudAlignArg::Pose => CloudAlign::Pose,
            CloudAlignArg::Icp => CloudAlign::Icp,
        }
    }
}

/// 0 success, 1 input error, 2 numerical failure, 3 contract violation.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::Rank(_) | Error::Domain(_) => 2,
        Error::Autodiff(AutodiffError::Domain { .. }) => 2,
        Error::Contract(_) | Error::Autodiff(_) => 3,
        _ => 1,
    }
}

struct StderrLogger {
    level: log::LevelFilter,
}

impl log::Log for StderrLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= self.level
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            match r.level() {
                log::Level::Info => eprintln!("{}", r.args()),
                l => eprintln!("{}: {}", l.as_str().to_lowercase(), r.args()),
            }
        }
    }

    fn flush(&self) {}
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = log::set_boxed_logger(Box::new(StderrLogger { level }));
    log::set_max_level(level);
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
        Command::Diagnose(a) => commands::diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Input("x".into())), 1);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 2);
        assert_eq!(exit_code(&Error::Contract("x".into())), 3);
        assert_eq!(exit_code(&AutodiffError::Domain { op: "log", value: f64::NAN }.into()), 2);
        assert_eq!(exit_code(&AutodiffError::Contract("x".into()).into()), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
