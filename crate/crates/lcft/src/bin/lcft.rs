//! Command-line pipeline: `synth`, `train`, `finetune`, `report`, and the
//! `example1` ranking walkthrough. Exit codes: 0 success, 2 usage or
//! config error, 3 data error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lcft::example_one::{self, ExampleOneConfig};
use lcft::experiment::{
    run_finetune, run_report, run_synth, run_train, ExperimentConfig, PipelineError,
};

#[derive(Parser)]
#[command(
    name = "lcft",
    version,
    about = "Label-corrected on-device fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config file (TOML, `schema = 1`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; all artifacts land here.
    #[arg(long)]
    out: PathBuf,
    /// Overrides every stage seed in the config (synth = S, init = S+1,
    /// cloud = S+2, finetune = S+3).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fleet TSV and its stats file.
    Synth(StageArgs),
    /// Train the global model over the pooled train split.
    Train(StageArgs),
    /// Fine-tune the fleet under each configured policy and write one
    /// per-user store per policy.
    Finetune {
        #[command(flatten)]
        stage: StageArgs,
        /// Comma-separated policy list overriding the config.
        #[arg(long, value_delimiter = ',')]
        policy: Option<Vec<String>>,
    },
    /// Emit the comparison CSVs from the fine-tune stores.
    Report(StageArgs),
    /// Run the three-item drift walkthrough and verify its rankings.
    Example1 {
        /// Samples per involved item (a positive multiple of 10).
        #[arg(long, default_value_t = 40)]
        samples_per_item: usize,
    },
}

fn load_config(stage: &StageArgs) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = ExperimentConfig::load(&stage.config)?;
    if let Some(seed) = stage.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(stage) => {
            let cfg = load_config(&stage)?;
            let s = run_synth(&cfg, &stage.out)?;
            println!(
                "synth: {} users, {} samples, global CTR {:.4}",
                s.num_users, s.num_samples, s.global_ctr
            );
            println!("  data  -> {}", s.data_path.display());
            println!("  stats -> {}", s.stats_path.display());
        }
        Command::Train(stage) => {
            let cfg = load_config(&stage)?;
            let s = run_train(&cfg, &stage.out)?;
            println!(
                "train: {} users, {} samples, global CTR {:.4}",
                s.pool_users, s.pool_samples, s.global_ctr
            );
            for (i, l) in s.epoch_losses.iter().enumerate() {
                println!("  epoch {i}: loss {l:.6}");
            }
            match s.train_auc {
                Some(a) => println!("  train AUC {a:.4}"),
                None => println!("  train AUC undefined (single-class pool)"),
            }
            println!("  checkpoint -> {}", s.checkpoint_path.display());
            println!("  manifest   -> {}", s.manifest_path.display());
        }
        Command::Finetune { stage, policy } => {
            let cfg = load_config(&stage)?;
            let s = run_finetune(&cfg, &stage.out, policy.as_deref())?;
            println!(
                "finetune: {} fleet users, global CTR {:.4}",
                s.fleet_users, s.global_ctr
            );
            for (name, path, ok, failed) in &s.policies {
                println!(
                    "  {name}: {ok} tuned, {failed} fell back -> {}",
                    path.display()
                );
            }
        }
        Command::Report(stage) => {
            let cfg = load_config(&stage)?;
            let s = run_report(&cfg, &stage.out)?;
            println!("policy          auc_avg   excluded  vs_cloud  vs_local");
            for r in &s.rows {
                println!(
                    "{:<15} {:.4}    {:<8}  {:<8}  {}",
                    r.policy,
                    r.auc_avg,
                    r.excluded_users,
                    r.vs_cloud.as_deref().unwrap_or("-"),
                    r.vs_local.as_deref().unwrap_or("-")
                );
            }
            println!("  summary  -> {}", s.summary_path.display());
            println!("  per-user -> {}", s.per_user_path.display());
            println!("  fig2     -> {}", s.fig2_path.display());
            println!("  fig3     -> {}", s.fig3_path.display());
        }
        Command::Example1 { samples_per_item } => {
            let cfg = ExampleOneConfig {
                samples_per_item,
                ..ExampleOneConfig::default()
            };
            let outcome = example_one::run(&cfg).map_err(|e| match e {
                example_one::ExampleError::BadSampleCount(_) => {
                    PipelineError::Config(e.to_string())
                }
                other => PipelineError::Training(lcft::training::TrainingError::Contract(
                    other.to_string(),
                )),
            })?;
            print!("{}", example_one::transcript(&outcome));
            if example_one::verify(&outcome).iter().any(|c| !c.passed) {
                return Err(PipelineError::Training(
                    lcft::training::TrainingError::Contract("example1 checks failed".to_string()),
                ));
            }
        }
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
