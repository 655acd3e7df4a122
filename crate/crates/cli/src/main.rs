//! `concern`: decompose a CNN classifier into per-class modules and work
//! with the resulting module sets.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concern::composer::{ClDirection, ClassLabel, VoteMode};
use concern::modularizer::{BlnRule, Pipeline};
use concern::synth::Arch;

#[derive(Parser, Debug)]
#[command(name = "concern", version, about = "Decompose a CNN classifier into per-class modules and recompose them")]
struct Cli {
    /// Worker threads; CONCERN_JOBS overrides this. Defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Also write the report as `key = value` lines to this file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build one module per requested class.
    Decompose(DecomposeArgs),
    /// Evaluate the module set of a scenario on its test datasets.
    Compose(SetArgs),
    /// Pick labels out of one or more module sets, optionally with continual
    /// learning against the other datasets.
    Reuse(ReuseArgs),
    /// Swap modules for others, keeping their labels.
    Replace(ReplaceArgs),
    /// Drop modules from a set.
    Remove(RemoveArgs),
    /// Re-check a model's predictions on watched classes with a module set.
    Verify(VerifyArgs),
    /// Apply the scenario's continual-learning sources and save the modules.
    Continual(ContinualArgs),
    /// Jaccard index between a module and its model.
    Jaccard(JaccardArgs),
    /// Energy and CO2e estimate from a power log.
    Co2e(Co2eArgs),
    /// Accuracy of a model or of a scenario's module set.
    Eval(EvalArgs),
    /// Generate a synthetic dataset, train a model and write a fixture directory.
    Synth(SynthArgs),
    /// Check a fixture directory against its manifest.
    CheckFixture(CheckFixtureArgs),
}

/// Pipeline names on the command line. The long forms are accepted too.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum PipelineArg {
    /// Channeling only, nothing masked.
    Channel,
    /// Concern and tangling identification, then channeling.
    #[value(alias = "ci-ti-mc")]
    Mc,
    /// As `mc`, then backtracking through the dense layers.
    #[value(alias = "ci-ti-mc-bln")]
    Bln,
    /// As `bln`, then backtracking through the convolutions.
    #[value(alias = "ci-ti-mc-bln-bi")]
    Bi,
}

impl From<PipelineArg> for Pipeline {
    fn from(p: PipelineArg) -> Self {
        match p {
            PipelineArg::Channel => Pipeline::Mc,
            PipelineArg::Mc => Pipeline::CiTiMc,
            PipelineArg::Bln => Pipeline::CiTiMcBln,
            PipelineArg::Bi => Pipeline::CiTiMcBlnBi,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RuleArg {
    AsWritten,
    Swapped,
}

impl From<RuleArg> for BlnRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::AsWritten => BlnRule::AsWritten,
            RuleArg::Swapped => BlnRule::Swapped,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VoteArg {
    Probability,
    Logit,
}

impl From<VoteArg> for VoteMode {
    fn from(v: VoteArg) -> Self {
        match v {
            VoteArg::Probability => VoteMode::Probability,
            VoteArg::Logit => VoteMode::Logit,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Reinstate,
    Remove,
}

impl From<DirectionArg> for ClDirection {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Reinstate => ClDirection::Reinstate,
            DirectionArg::Remove => ClDirection::Remove,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    PlainCnn,
    TinyResnet,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::PlainCnn => Arch::PlainCnn,
            ArchArg::TinyResnet => Arch::TinyResNet,
        }
    }
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Training split the modules are identified on.
    #[arg(long)]
    data: PathBuf,
    /// `all` or a comma-separated list of class indices.
    #[arg(long, default_value = "all")]
    classes: String,
    #[arg(long, value_enum, default_value = "bln")]
    pipeline: PipelineArg,
    /// Concerned examples per module.
    #[arg(long, default_value_t = 200)]
    n_inputs: usize,
    /// Backtracking threshold.
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, value_enum, default_value = "as-written")]
    rule: RuleArg,
    /// Shuffle unconcerned examples with this seed instead of taking them in
    /// dataset order.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `class-<c>.cnnmodule` files and the `set.txt` manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SetArgs {
    /// Scenario file listing models, modules and test datasets.
    #[arg(long)]
    scenario: PathBuf,
    /// Extra test datasets, on top of the scenario's.
    #[arg(long)]
    test: Vec<PathBuf>,
    /// Overrides the scenario's vote mode.
    #[arg(long, value_enum)]
    vote: Option<VoteArg>,
}

#[derive(Args, Debug)]
struct ReuseArgs {
    #[command(flatten)]
    set: SetArgs,
    /// Labels to keep, on top of the scenario's `select` lines.
    #[arg(long)]
    select: Vec<ClassLabel>,
    /// Also report the selection after continual learning.
    #[arg(long)]
    continual: bool,
    #[command(flatten)]
    cl: ClArgs,
    /// Write the resulting set manifest here. Updated modules go next to it.
    #[arg(long)]
    set_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClArgs {
    #[arg(long, value_enum, default_value = "reinstate")]
    direction: DirectionArg,
    /// Foreign examples taken from each continual source.
    #[arg(long, default_value_t = 500)]
    cl_examples: usize,
}

#[derive(Args, Debug)]
struct ReplaceArgs {
    #[command(flatten)]
    set: SetArgs,
    /// `LABEL=PATH` replacements, on top of the scenario's `replace` lines.
    #[arg(long = "with", value_parser = parse_replacement)]
    with: Vec<(ClassLabel, PathBuf)>,
    #[arg(long)]
    set_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RemoveArgs {
    #[command(flatten)]
    set: SetArgs,
    /// Labels to drop, on top of the scenario's `remove` lines.
    #[arg(long)]
    label: Vec<ClassLabel>,
    #[arg(long)]
    set_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    set: SetArgs,
    /// The model whose predictions are checked.
    #[arg(long)]
    model: PathBuf,
    /// Dataset name the model's classes are labelled with.
    #[arg(long)]
    dataset_name: String,
    /// Watched labels, on top of the scenario's `watch` lines.
    #[arg(long)]
    watch: Vec<ClassLabel>,
}

#[derive(Args, Debug)]
struct ContinualArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    cl: ClArgs,
    /// Directory for the updated modules and their set manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct JaccardArgs {
    #[arg(long)]
    module: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct Co2eArgs {
    /// CSV with header `t_seconds,p_cpu_w,p_dram_w,p_gpu_w`.
    #[arg(long)]
    log: PathBuf,
    /// Training time in hours.
    #[arg(long)]
    hours: f64,
    #[arg(long, default_value_t = 0)]
    gpus: u32,
    /// Idle CPU draw in watts, subtracted from the average.
    #[arg(long, default_value_t = 0.0)]
    baseline_cpu: f64,
    /// Idle DRAM draw in watts, subtracted from the average.
    #[arg(long, default_value_t = 0.0)]
    baseline_dram: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Evaluate a module set.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    scenario: Option<PathBuf>,
    /// Evaluate a whole model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    test: Vec<PathBuf>,
    #[arg(long, value_enum)]
    vote: Option<VoteArg>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Dataset name, used as the label prefix of its modules.
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, value_enum, default_value = "plain-cnn")]
    arch: ArchArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 600)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

#[derive(Args, Debug)]
struct CheckFixtureArgs {
    dir: PathBuf,
}

fn parse_replacement(s: &str) -> Result<(ClassLabel, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected LABEL=PATH, got {s:?}"))?;
    Ok((label.parse().map_err(|e| format!("{e}"))?, PathBuf::from(path)))
}

fn jobs(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    match std::env::var("CONCERN_JOBS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => anyhow::bail!("CONCERN_JOBS must be a positive integer, got {v:?}"),
        },
        Err(_) => match flag {
            Some(0) => anyhow::bail!("--jobs must be at least 1"),
            other => Ok(other),
        },
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = jobs(cli.jobs)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let report = match cli.command {
        Command::Decompose(a) => commands::decompose(a)?,
        Command::Compose(a) => commands::compose(a)?,
        Command::Reuse(a) => commands::reuse(a)?,
        Command::Replace(a) => commands::replace(a)?,
        Command::Remove(a) => commands::remove(a)?,
        Command::Verify(a) => commands::verify(a)?,
        Command::Continual(a) => commands::continual(a)?,
        Command::Jaccard(a) => commands::jaccard_index(a)?,
        Command::Co2e(a) => commands::co2e(a)?,
        Command::Eval(a) => commands::eval(a)?,
        Command::Synth(a) => commands::synth(a)?,
        Command::CheckFixture(a) => commands::check_fixture(a)?,
    };
    print!("{}", report.text());
    if let Some(path) = &cli.out {
        concern::container::write_atomic(path, report.key_values().as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
