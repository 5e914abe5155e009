use std::path::{Path, PathBuf};

use aemlab::trainer::{train, ExperimentConfig, RunArtifacts};
use clap::Args;

use crate::config::{load_config, render_config};
use crate::error::{CliError, CliResult};
use crate::manifest::{ManifestBuilder, CONFIG_FILE};
use crate::output::create_dir;

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Experiment file (TOML with [env] and [train] tables); defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as train.lr=20; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<ExperimentConfig> {
        load_config(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for logs, checkpoints and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

/// Trains one configuration into `dir` with a config snapshot and manifest.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path, command: &str) -> CliResult<RunArtifacts> {
    create_dir(dir)?;
    let mut manifest = ManifestBuilder::new(command, config.train.seed, config)?;
    let snapshot = dir.join(CONFIG_FILE);
    std::fs::write(&snapshot, render_config(config)?).map_err(|e| CliError::io(&snapshot, e))?;
    manifest.output(snapshot);
    let run = train(config, Some(dir))?;
    manifest.outputs(run.outputs.iter().cloned());
    manifest.timings(run.timings);
    manifest.finish(dir)?;
    Ok(run)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let config = args.config.load()?;
    let run = run_experiment(&config, &args.out, "train")?;
    let s = &run.summary;
    println!(
        "steps {} success {:.4} reward {:.4} entropy first {:.4} last {:.4}",
        s.steps, s.final_success_rate, s.final_mean_reward, s.first_quartile_entropy, s.last_quartile_entropy
    );
    Ok(())
}
