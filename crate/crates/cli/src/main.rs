use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfirl::envs::{build_env, EnvConfig, EnvName, EnvVariant, DEFAULT_GAMMA, DEFAULT_HORIZON};
use mfirl::harness::{
    expert_return, generate_demos, reproduce_table1, Algorithm, ExperimentConfig, Table1Config,
};
use mfirl::irl::RewardModel;
use mfirl::metrics::evaluate_reward;
use mfirl::mfg::DemoSet;
use mfirl::{Error, Result};

#[derive(Parser)]
#[command(name = "mfirl", version, about = "Mean-field game equilibria and inverse reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the expert equilibrium and sample demonstrations from it.
    GenExperts {
        #[arg(long)]
        env: String,
        #[arg(long, default_value = "original")]
        variant: String,
        #[arg(long, default_value_t = 100)]
        agents: usize,
        #[arg(long, default_value_t = 10)]
        plays: usize,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Demonstration JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the expert equilibrium JSON here.
        #[arg(long)]
        equilibrium: Option<PathBuf>,
    },
    /// Learn a reward model from demonstrations.
    Train {
        #[arg(long, value_enum, default_value_t = AlgoArg::Mfirl)]
        algo: AlgoArg,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        env: String,
        /// Experiment config JSON; its `irl` and `solver` blocks are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reward model JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV to write.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a reward model against the ground truth of a game.
    Eval {
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value = "new")]
        variant: String,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        /// Experiment config JSON; its `solver` block is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluation JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a predefined experiment suite.
    Reproduce {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        /// Suite config JSON overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an experiment grid from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Mfirl,
    #[value(name = "mfg-mdp")]
    MfgMdp,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Mfirl => Algorithm::Mfirl,
            AlgoArg::MfgMdp => Algorithm::MfgMdp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Table1,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json(&read(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_env(env: &str, variant: &str) -> Result<(EnvName, EnvVariant)> {
    Ok((env.parse()?, variant.parse()?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenExperts {
            env,
            variant,
            agents,
            plays,
            horizon,
            gamma,
            seed,
            out,
            equilibrium,
        } => {
            let (name, variant) = parse_env(&env, &variant)?;
            if agents == 0 || plays == 0 || horizon == 0 {
                return Err(Error::Config("agents, plays and horizon must be at least 1".into()));
            }
            let spec = build_env(
                &EnvConfig::new(name, variant)
                    .with_horizon(horizon)
                    .with_gamma(gamma),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            let (_, eq) = expert_return(&spec, &Default::default())?;
            if !eq.converged {
                return Err(Error::Numeric(format!(
                    "expert equilibrium did not converge (residual {:e})",
                    eq.residual
                )));
            }
            let demos = generate_demos(&spec, &eq.policy, name, variant, agents, plays, seed)?;
            write(&out, demos.to_json()?.as_bytes())?;
            if let Some(path) = equilibrium {
                write(&path, eq.to_json()?.as_bytes())?;
            }
        }
        Command::Train {
            algo,
            demos,
            env,
            config,
            out,
            log,
        } => {
            let cfg = load_config(config.as_ref())?;
            let demos = DemoSet::from_json(&read(&demos)?)
                .map_err(|e| Error::Config(format!("demonstrations: {e}")))?;
            let (name, variant) = parse_env(&env, demos.variant())?;
            if demos.env() != name.key() {
                return Err(Error::Config(format!(
                    "demonstrations are for {}, not {}",
                    demos.env(),
                    name.key()
                )));
            }
            let spec = build_env(
                &EnvConfig::new(name, variant)
                    .with_horizon(demos.horizon())
                    .with_gamma(demos.gamma()),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            let (model, training_log) = Algorithm::from(algo).train(&spec, &demos, &cfg.irl)?;
            write(&out, model.to_json()?.as_bytes())?;
            if let Some(path) = log {
                write(&path, training_log.to_csv_string()?.as_bytes())?;
            }
        }
        Command::Eval {
            reward,
            env,
            variant,
            horizon,
            config,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let model = RewardModel::from_json(&read(&reward)?)
                .map_err(|e| Error::Config(format!("reward model: {e}")))?;
            let (name, variant) = parse_env(&env, &variant)?;
            let spec = build_env(
                &EnvConfig::new(name, variant)
                    .with_horizon(horizon)
                    .with_gamma(model.gamma),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            model
                .check_spec(&spec)
                .map_err(|e| Error::Config(e.to_string()))?;
            let evaluation = evaluate_reward(&model, &spec, &cfg.solver)?;
            let doc = serde_json::json!({
                "env": name.key(),
                "variant": variant.key(),
                "horizon": horizon,
                "evaluation": evaluation,
            });
            write(&out, serde_json::to_string_pretty(&doc)?.as_bytes())?;
            if !evaluation.converged {
                return Err(Error::Numeric("an equilibrium did not converge".into()));
            }
        }
        Command::Reproduce { suite, out, config } => match suite {
            Suite::Table1 => {
                let cfg = match config {
                    Some(p) => Table1Config::from_json(&read(&p)?)?,
                    None => Table1Config::default(),
                };
                for row in reproduce_table1(&cfg, &out)? {
                    println!(
                        "{:<8} {:<8} return {:>10.3}  dev_mf {:>8.4}  dev_policy {:>8.4}",
                        row.env, row.algorithm, row.expected_return, row.dev_mf, row.dev_policy
                    );
                }
            }
        },
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_json(&read(&config)?)?;
            mfirl::harness::run_experiment(&cfg, &out)?;
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
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
