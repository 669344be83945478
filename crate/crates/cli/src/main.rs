//! `metagate` experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metagate::baselines::BaselineKind;
use metagate::experiment::{ExperimentConfig, Run};

#[derive(Parser, Debug)]
#[command(name = "metagate", version, about = "Meta-gated resource allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then
    /// `$METAGATE_OUT/<config stem>`, then `runs/<config stem>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use artifacts produced by a different config.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training tasks and the test stream.
    GenerateData,
    /// Meta-train the gated model; writes a checkpoint and a training curve.
    Train,
    /// Run the sequential online test from the checkpoint.
    Evaluate,
    /// Train and evaluate comparison methods.
    Baseline {
        /// Restrict to these kinds (joint, mismatch, tl, ewc, wogate).
        #[arg(long, value_delimiter = ',')]
        kind: Vec<BaselineKind>,
    },
    /// Aggregate records into variance, continuity and CDS tables.
    Report,
    /// Held-out rate against the number of adaptation steps.
    SweepJq,
    /// Variance and mean rate per transmit power budget.
    SweepPmax,
    /// Variance and mean rate per number of pairs.
    SweepK,
    /// EWC displacement and rate per penalty weight.
    SweepWp,
    /// Seen against unseen channel rates for the proposed and joint methods.
    NakagamiGen,
}

fn output_dir(common: &Common, cfg: &ExperimentConfig, config_path: &Path) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = &cfg.output_dir {
        return o.clone();
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    let root = std::env::var_os("METAGATE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

fn run(cli: Cli) -> metagate::Result<()> {
    let path = cli
        .common
        .config
        .clone()
        .ok_or_else(|| metagate::Error::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(&path)?;
    // Train and test blocks always follow the top-level seed.
    let cfg = cfg.with_seed(cli.common.seed.unwrap_or(cfg.seed));
    let out = output_dir(&cli.common, &cfg, &path);
    let run = Run::new(cfg, &out, cli.common.force);
    log::info!("config {} seed {} -> {}", run.hash, run.cfg.seed, out.display());
    match cli.command {
        Command::GenerateData => {
            let (train, test) = run.generate_data()?;
            println!(
                "train: {} tasks, {} samples; test: {} episodes, {} samples",
                train.tasks, train.samples, test.tasks, test.samples
            );
        }
        Command::Train => {
            let r = run.train()?;
            let last = r.history.last().map_or(f64::NAN, |h| h.meta_loss);
            println!("trained {} epochs, final meta loss {last:.6}", r.history.len());
        }
        Command::Evaluate => {
            for r in run.evaluate()? {
                println!("episode {} {}: {:.4}", r.episode, r.channel_id, r.normalized_rate);
            }
        }
        Command::Baseline { kind } => {
            for (name, recs) in run.baselines(&kind)? {
                let last = recs.last().map(|r| r.episode).unwrap_or(0);
                let finals: Vec<String> = recs
                    .iter()
                    .filter(|r| r.episode == last)
                    .map(|r| format!("{} {:.4}", r.channel_id, r.normalized_rate))
                    .collect();
                println!("{name}: {}", finals.join(", "));
            }
        }
        Command::Report => {
            let rep = run.report()?;
            for m in &rep.methods {
                let v = m.variance.map_or("-".into(), |v| format!("{v:.6}"));
                println!("{:<10} variance {v} rates {:?}", m.method, m.current_rates);
            }
        }
        Command::SweepJq => {
            for r in run.sweep_jq()? {
                println!("{} J_q={} {:.4}", r.channel_id, r.jq, r.normalized_rate);
            }
        }
        Command::SweepPmax | Command::SweepK => {
            let rows = if matches!(cli.command, Command::SweepPmax) {
                run.sweep_pmax()?
            } else {
                run.sweep_k()?
            };
            for r in rows {
                println!("{} {:<10} variance {:.6} mean {:.4}", r.value, r.method, r.variance, r.mean_rate);
            }
        }
        Command::SweepWp => {
            for r in run.sweep_wp()? {
                println!("w_p={:e} displacement {:.6e} rate {:.4}", r.w_p, r.displacement, r.current_rate);
            }
        }
        Command::NakagamiGen => {
            for r in run.nakagami_gen()? {
                let tag = if r.seen { "seen" } else { "unseen" };
                println!("{:<10} {} ({tag}) {:.4}", r.method, r.channel_id, r.normalized_rate);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
