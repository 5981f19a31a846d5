use std::path::PathBuf;
use std::process::ExitCode;

use anomaly_recon::pipeline::{
    generate_toy, Pipeline, PipelineConfig, StageOutput, ToySpec, TOY_CATEGORY, TOY_PRESET,
};
use anomaly_recon::Error;
use clap::{Parser, Subcommand};

/// Self-supervised anomaly detection with diffusion-synthesized anomalies.
#[derive(Parser)]
#[command(name = "anomaly-recon", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Override a configuration key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the donor diffusion model on normal images.
    TrainDiffusion,
    /// Sample donor images with perturbed reverse diffusion.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
        s_range: Option<Vec<f64>>,
    },
    /// Select feature channels against synthetic anomaly masks.
    Afs,
    /// Train reconstructors and discriminator.
    Train,
    /// Score the test split and write reports and score maps.
    Eval,
    /// Generate the toy texture benchmark if needed and run every stage.
    Benchmark {
        /// Rewrite the toy dataset even if it exists.
        #[arg(long)]
        regenerate: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Data(_)
        | Error::MissingPath(_)
        | Error::UndefinedMetric(_)
        | Error::Provenance(_) => 4,
        _ => 1,
    }
}

fn print_stage(stage: &str, outputs: &[StageOutput]) {
    for o in outputs {
        let state = if o.cached { "cached" } else { "done" };
        println!("{stage} [{}] {state}: {}", o.group, o.path.display());
    }
}

fn run(cli: Cli) -> anomaly_recon::Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    let mut base = None;
    match &cli.command {
        Command::Synth { count, s_range } => {
            if let Some(c) = count {
                overrides.push(format!("synth.count={c}"));
            }
            if let Some(r) = s_range {
                overrides.push(format!("synth.s_min={}", r[0]));
                overrides.push(format!("synth.s_max={}", r[1]));
            }
        }
        Command::Benchmark { .. } => base = Some(TOY_PRESET),
        _ => {}
    }
    let cfg = PipelineConfig::load(base, cli.config.as_deref(), &overrides)?;
    if let Command::Benchmark { regenerate } = cli.command {
        let data = &cfg.paths.dataset;
        if regenerate || !data.join(TOY_CATEGORY).is_dir() {
            println!("writing toy benchmark to {}", data.display());
            generate_toy(data, &ToySpec::default())?;
        }
    }
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::TrainDiffusion => print_stage("train-diffusion", &pipeline.train_diffusion()?),
        Command::Synth { .. } => print_stage("synth", &pipeline.synth()?),
        Command::Afs => {
            for (o, cache) in pipeline.afs()? {
                let state = if o.cached { "cache hit" } else { "computed" };
                println!("afs [{}] {state}: {}", o.group, o.path.display());
                for (k, layer) in cache.layers.iter().enumerate() {
                    let mean = layer.losses.iter().sum::<f64>() / layer.losses.len().max(1) as f64;
                    println!(
                        "  layer {k}: kept {} channels, mean loss {mean:.5}",
                        layer.m
                    );
                }
            }
        }
        Command::Train => print_stage("train", &pipeline.train()?),
        Command::Eval | Command::Benchmark { .. } => {
            let report = if matches!(cli.command, Command::Eval) {
                pipeline.eval()?
            } else {
                pipeline.run_all()?
            };
            print!("{}", report.to_table());
            println!("config digest {}", report.config_digest);
            println!(
                "report written to {}",
                pipeline
                    .config()
                    .paths
                    .work_dir
                    .join("report.json")
                    .display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
