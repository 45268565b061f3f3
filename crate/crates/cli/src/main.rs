//! `mmi`: run membership inference experiments on synthetic captioning data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmi_core::pipeline::{read_summary, run_scenario, run_stage, Config, Stage};
use mmi_core::scenario::{parse_scenario, ScenarioSpec};
use mmi_core::Error;

#[derive(Parser)]
#[command(name = "mmi", version, about = "Membership inference attacks against image captioning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory holding run directories [default: $MMI_RUNS_DIR or ./runs]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides shadow/target families and architectures, e.g. FRFR or CRFV.
    #[arg(long, value_name = "CODE")]
    scenario: Option<ScenarioSpec>,
    /// Overrides the run name.
    #[arg(long, value_name = "NAME")]
    name: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run all stages (or just one with --stage).
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Run only this stage.
        #[arg(long, value_name = "NAME")]
        stage: Option<Stage>,
        /// Rerun stages that already completed.
        #[arg(long)]
        fresh: bool,
    },
    /// Generate and split the synthetic corpora.
    GenData(RunArgs),
    /// Train the target captioner (with the configured defense).
    TrainTarget(RunArgs),
    /// Train the shadow captioner.
    TrainShadow(RunArgs),
    /// Pretrain the multi-modal feature extractor on the public split.
    TrainMfe(RunArgs),
    /// Fit the metric-based attack on shadow scores.
    AttackMb(RunArgs),
    /// Train the feature-based attack model on shadow features.
    AttackFb(RunArgs),
    /// Query the target and record attack predictions.
    Evaluate(RunArgs),
    /// Write ROC curves, plots and summaries.
    Report(RunArgs),
    /// Print a scenario code's shadow, target and class.
    Scenario {
        /// Two- or four-letter code.
        code: String,
    },
    /// Print the effective config as TOML.
    ShowConfig(RunArgs),
}

fn load_config(args: &RunArgs) -> Result<Config, Error> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &args.scenario {
        cfg.apply_scenario(&ScenarioSpec {
            attack: cfg.attack.kind,
            defense: None,
            ..s.clone()
        });
    }
    if let Some(name) = &args.name {
        cfg.name = name.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summaries(cfg: &Config, dir: &std::path::Path) {
    for (attack, runs) in [("mb", cfg.attack.kind.runs_mb()), ("fb", cfg.attack.kind.runs_fb())] {
        if !runs {
            continue;
        }
        if let Ok((acc, auc)) = read_summary(dir, attack) {
            println!("{} {attack}: accuracy {acc:.4}  auc {auc:.4}", cfg.scenario().code());
        }
    }
}

fn single(args: &RunArgs, stage: Stage) -> Result<(), Error> {
    let cfg = load_config(args)?;
    let dir = cfg.run_dir(args.out.as_deref());
    run_stage(&cfg, &dir, stage)?;
    if stage == Stage::Report {
        print_summaries(&cfg, &dir);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { args, stage, fresh } => {
            let cfg = load_config(&args)?;
            let dir = cfg.run_dir(args.out.as_deref());
            match stage {
                Some(s) => run_stage(&cfg, &dir, s)?,
                None => run_scenario(&cfg, &dir, !fresh)?,
            }
            println!("artifacts: {}", dir.display());
            print_summaries(&cfg, &dir);
            Ok(())
        }
        Command::GenData(a) => single(&a, Stage::GenData),
        Command::TrainTarget(a) => single(&a, Stage::TrainTarget),
        Command::TrainShadow(a) => single(&a, Stage::TrainShadow),
        Command::TrainMfe(a) => single(&a, Stage::TrainMfe),
        Command::AttackMb(a) => single(&a, Stage::AttackMb),
        Command::AttackFb(a) => single(&a, Stage::AttackFb),
        Command::Evaluate(a) => single(&a, Stage::Evaluate),
        Command::Report(a) => single(&a, Stage::Report),
        Command::Scenario { code } => {
            let s = parse_scenario(&code)?;
            println!(
                "shadow={}{} target={}{} class={}",
                s.shadow.family, s.shadow.arch, s.target.family, s.target.arch, s.class()
            );
            Ok(())
        }
        Command::ShowConfig(a) => {
            print!("{}", load_config(&a)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // stage errors already name the stage
            eprintln!("mmi: {e}");
            ExitCode::FAILURE
        }
    }
}
