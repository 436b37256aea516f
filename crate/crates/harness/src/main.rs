use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use opd_core::calibration::Strategy;
use opd_harness::commands::{self, Overrides};
use opd_harness::config::{load_policy, RunConfig, TeacherMode};
use opd_harness::error::write_file;
use opd_harness::reference::{self, ReferenceSetup};
use opd_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(
    name = "opd",
    about = "On-policy distillation with outcome-aware return calibration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_enum)]
    teacher_mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    calibration: Option<CalibrationArg>,
    /// Output directory, overriding the configured one
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Local,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrationArg {
    None,
    Mask,
    Shift,
}

#[derive(Subcommand)]
enum Command {
    /// Profile prompt difficulty and write sampling weights
    BalanceOffline,
    /// Train the student
    Train,
    /// Report pass@k of a checkpoint
    Eval {
        /// Defaults to the final checkpoint in the output directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated k values
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Responses per prompt
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Export per-token rewards of fresh rollouts for one prompt
    Heatmap {
        #[arg(long)]
        prompt_id: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Serve one configured teacher over HTTP
    ServeTeacher {
        #[arg(long)]
        teacher: String,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: String,
    },
    /// Write the reference experiment (dataset, checkpoints, config) to a directory
    InitReference {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::Config("--config is required".into()))?;
    let mut config = RunConfig::load(path)?;
    let overrides = Overrides {
        seed: cli.seed,
        steps: cli.steps,
        teacher_mode: cli.teacher_mode.map(|m| match m {
            ModeArg::Local => TeacherMode::Local,
            ModeArg::Remote => TeacherMode::Remote,
        }),
        calibration: cli.calibration.map(|c| match c {
            CalibrationArg::None => Strategy::None,
            CalibrationArg::Mask => Strategy::Mask,
            CalibrationArg::Shift => Strategy::Shift,
        }),
        out: cli.out.clone(),
    };
    overrides.apply(&mut config)?;
    eprintln!("effective config:\n{}", config.effective_json());
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::InitReference { dir } = &cli.command {
        let path = reference::write_reference(dir, &ReferenceSetup::default())?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let config = load_config(&cli)?;
    match cli.command {
        Command::BalanceOffline => {
            let (profile, shape) = commands::balance_offline(&config)?;
            println!("histogram {:?}", profile.histogram);
            println!("shape {}", serde_json::to_string(&shape).expect("shape"));
            println!("wrote {}", config.profile_path().display());
        }
        Command::Train => {
            let summary = commands::train_run(&config)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary"));
        }
        Command::Eval { checkpoint, k, samples } => {
            let checkpoint = checkpoint.unwrap_or_else(|| commands::final_checkpoint_path(&config));
            let samples = samples.unwrap_or(config.eval.samples);
            let ks = k.unwrap_or_else(|| config.eval.k.clone());
            let report = commands::evaluate(&config, &checkpoint, samples, &ks)?;
            let text = serde_json::to_string_pretty(&report).expect("report") + "\n";
            write_file(&config.output_dir.join("eval.json"), &text)?;
            for (k, v) in report.k.iter().zip(&report.mean_pass_at_k) {
                println!("pass@{k} {v:.6}");
            }
        }
        Command::Heatmap {
            prompt_id,
            checkpoint,
            rollouts,
        } => {
            let checkpoint = checkpoint.unwrap_or_else(|| commands::final_checkpoint_path(&config));
            let records = commands::heatmap(
                &config,
                &checkpoint,
                &prompt_id,
                rollouts.unwrap_or(config.train.group_size),
            )?;
            let path = config.output_dir.join(format!("heatmap_{prompt_id}.jsonl"));
            write_file(&path, &commands::heatmap_jsonl(&records))?;
            println!("wrote {}", path.display());
        }
        Command::ServeTeacher { teacher, bind } => {
            let path = config
                .teachers
                .get(&teacher)
                .ok_or_else(|| HarnessError::Config(format!("unknown teacher `{teacher}`")))?;
            opd_serving::serve_blocking(teacher, load_policy(path)?, &bind)?;
        }
        Command::InitReference { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
