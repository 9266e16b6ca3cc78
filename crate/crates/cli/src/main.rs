use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use lqa::commands::{self, TrainOptions};
use lqa::{exit_code, report, Invalid, EXIT_OK, EXIT_VALIDATION};
use lqa_core::config::{Baseline, RunConfig, ABLATIONS};

#[derive(Parser)]
#[command(name = "lqa", version, about = "Lifelong question answering with key-routed prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size defaults.
    Reference,
    /// Small model and prompts; about a minute per run on one core.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Full,
    Finetune,
    Multitask,
}

#[derive(Subcommand)]
enum Command {
    /// Train over the task curriculum, one run directory per seed.
    Train {
        /// Flat TOML config; unknown keys are rejected.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Starting values before the config file is applied.
        #[arg(long, value_enum, default_value = "reference")]
        preset: Preset,
        /// Repeat for several runs; defaults to the configured seed.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        order_seed: Option<u64>,
        /// Ablation switch, repeatable.
        #[arg(long = "ablate")]
        ablations: Vec<String>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Stream file instead of the synthetic generator.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Root directory; each run goes to `<out>/<variant>/seed-<n>`.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing run directories.
        #[arg(long)]
        force: bool,
        /// Continue runs from their last completed stage.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Evaluate a checkpoint or a run directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Stream file, or a generator spec ending in `.toml`.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Aggregate completed runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// One row per variant instead of one group.
        #[arg(long)]
        by_variant: bool,
        /// Also write tables and series files here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic stream file.
    GenStream {
        /// Generator spec (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    config: Option<PathBuf>,
    preset: Preset,
    order_seed: Option<u64>,
    ablations: &[String],
    baseline: Option<BaselineArg>,
    stream: Option<PathBuf>,
) -> anyhow::Result<RunConfig> {
    let base = match preset {
        Preset::Reference => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let mut table: toml::Table = toml::from_str(&base.to_toml_string())?;
            let over: toml::Table = toml::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?;
            table.extend(over);
            RunConfig::from_toml_str(&toml::to_string(&table)?)?
        }
        None => base,
    };
    if order_seed.is_some() {
        cfg.order_seed = order_seed;
    }
    for a in ablations {
        cfg.set_ablation(a)
            .map_err(|_| Invalid(format!("unknown ablation `{a}`; expected one of {}", ABLATIONS.join(", "))))?;
    }
    if let Some(b) = baseline {
        cfg.baseline = match b {
            BaselineArg::Full => Baseline::Full,
            BaselineArg::Finetune => Baseline::Finetune,
            BaselineArg::Multitask => Baseline::Multitask,
        };
    }
    if let Some(s) = stream {
        cfg.stream_path = Some(s.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            preset,
            seeds,
            order_seed,
            ablations,
            baseline,
            stream,
            out,
            force,
            resume,
        } => {
            let cfg = build_config(config, preset, order_seed, &ablations, baseline, stream)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let mut dirs = Vec::new();
            for seed in seeds {
                let mut c = cfg.clone();
                c.seed = seed;
                let dir = out.join(c.variant_name()).join(format!("seed-{seed}"));
                let s = commands::train(
                    &c,
                    &TrainOptions {
                        out: dir.clone(),
                        force,
                        resume,
                    },
                )?;
                println!(
                    "{}: A_N {} A_N' {} F_N {}",
                    dir.display(),
                    fmt_pct(s.a_n),
                    fmt_pct(s.a_n_unseen),
                    fmt_pct(s.f_n)
                );
                dirs.push(dir);
            }
            if dirs.len() > 1 {
                let runs = report::load_runs(&dirs)?;
                print!("{}", report::render(&report::build(&runs, false)?));
            }
        }
        Command::Eval { ckpt, stream, json } => {
            let r = commands::eval(&ckpt, stream.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                print!("{}", commands::render_eval(&r));
            }
        }
        Command::Report { runs, by_variant, out } => {
            let loaded = report::load_runs(&runs)?;
            let r = report::build(&loaded, by_variant)?;
            print!("{}", report::render(&r));
            if let Some(out) = out {
                report::write(&r, &loaded, &out)?;
            }
        }
        Command::GenStream { spec, out } => {
            let s = commands::gen_stream(spec.as_deref(), &out)?;
            println!(
                "wrote {} seen and {} unseen tasks to {}",
                s.seen.len(),
                s.unseen.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", x * 100.0)).unwrap_or_else(|| "n/a".into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
