use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use qmix::env::write_trace;
use qmix::harness::{
    dump_qtot_table, evaluate, final_metric, load_checkpoint, metric_rows, run_experiment, save_checkpoint,
    stream_rng, summarise, write_metrics_csv, write_train_log, Algorithm, CliOverrides, EnvKind, ResolvedConfig,
    Stream,
};
use rand::Rng;

#[derive(Parser)]
#[command(name = "qmix", about = "Train and evaluate value-factorised multi-agent Q-learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or evaluate the scripted baseline) and write metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        algo: Option<Algorithm>,
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also record the final evaluation episodes as JSON-lines traces.
        #[arg(long)]
        traces: bool,
    },
    /// Greedy evaluation of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the joint-value tables of a two-step checkpoint.
    DumpQtot {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Show every effective config value and where it came from.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algo: Option<Algorithm>,
        #[arg(long)]
        env: Option<EnvKind>,
    },
}

fn resolve(config: Option<&Path>, cli: CliOverrides) -> Result<ResolvedConfig> {
    let text = match config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    Ok(ResolvedConfig::resolve(&text, &cli)?)
}

fn run(resolved: ResolvedConfig, seeds: u64, out: &Path, traces: bool) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let base = resolved.config.clone();
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    let mut used = Vec::new();
    for k in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = base.seed + k;
        let output = run_experiment(&cfg)?;
        let value = final_metric(&output);
        let tag = format!("{}_{}_seed{}", cfg.algorithm, cfg.scenario_name(), cfg.seed);
        println!(
            "seed {:>4}: {} episodes, {} env steps, final {} = {value:.4}",
            cfg.seed,
            output.episodes,
            output.env_steps,
            if cfg.env == EnvKind::MicroCombat { "test win rate" } else { "test return" },
        );
        rows.extend(metric_rows(&cfg, &output.report));
        if let Some(learner) = &output.learner {
            save_checkpoint(&out.join(format!("{tag}.ckpt")), &cfg, &output.params)?;
            write_train_log(BufWriter::new(File::create(out.join(format!("{tag}_train.jsonl")))?), &output.train_log)?;
            if traces {
                let mut rng = stream_rng(cfg.seed, Stream::Eval);
                let seeds: Vec<u64> = (0..cfg.eval.episodes).map(|_| rng.random()).collect();
                let mut recorded = Vec::new();
                evaluate(&cfg, Some((learner, &output.params)), &seeds, Some(&mut recorded))?;
                let mut w = BufWriter::new(File::create(out.join(format!("{tag}_traces.jsonl")))?);
                for episode in &recorded {
                    write_trace(&mut w, episode)?;
                }
            }
        }
        finals.push(value);
        used.push(cfg.seed);
    }
    let csv_path = out.join("metrics.csv");
    write_metrics_csv(BufWriter::new(File::create(&csv_path)?), &rows)?;
    println!("metrics written to {}", csv_path.display());
    if seeds > 1 {
        let s = summarise(&used, &finals)?;
        println!(
            "median over {} seeds: {:.4} (95% bootstrap CI {:.4} .. {:.4})",
            used.len(),
            s.median,
            s.ci_low,
            s.ci_high
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            seeds,
            algo,
            env,
            out,
            traces,
        } => {
            let resolved = resolve(
                config.as_deref(),
                CliOverrides {
                    env,
                    algorithm: algo,
                    seed,
                },
            )?;
            run(resolved, seeds, &out, traces)
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            let (cfg, learner, params) = load_checkpoint(&checkpoint)?;
            let mut rng = stream_rng(seed, Stream::Eval);
            let seeds: Vec<u64> = (0..episodes).map(|_| rng.random()).collect();
            let (win_rate, mean, _) = evaluate(&cfg, Some((&learner, &params)), &seeds, None)?;
            match win_rate {
                Some(w) => println!("test win rate {w:.4}, mean return {mean:.4} over {episodes} episodes"),
                None => println!("mean test return {mean:.4} over {episodes} episodes"),
            }
            Ok(())
        }
        Command::DumpQtot { checkpoint } => {
            let (cfg, learner, params) = load_checkpoint(&checkpoint)?;
            print!("{}", dump_qtot_table(&cfg, &learner, &params)?);
            Ok(())
        }
        Command::PrintConfig { config, algo, env } => {
            let resolved = resolve(
                config.as_deref(),
                CliOverrides {
                    env,
                    algorithm: algo,
                    seed: None,
                },
            )?;
            print!("{}", resolved.render()?);
            Ok(())
        }
    }
}
