use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use loraloop_cli::commands::{self, Axis};
use loraloop_cli::config::{set_key, ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "loraloop", version, about = "Continual VLM learning with LoRA-adapted synthetic replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run a grid of configurations and write mean ± std per cell.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Axis as `key=v1,v2,...`; repeat for a product grid.
        #[arg(long = "grid")]
        grid: Vec<Axis>,
        /// Named grid: components, rank, l, lora_policy, filter_policy, m_pre.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long = "set")]
        set: Vec<String>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Summarise runs with deltas against a reference run.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
    /// Write base and adapted samples of one class with confidences.
    GenPreview {
        run: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task-suite utilities.
    Taskgen {
        #[command(subcommand)]
        command: TaskgenCommand,
    },
    /// Re-score a stored VLM checkpoint on every column of the run's suite.
    Eval {
        run: PathBuf,
        #[arg(long, default_value = "vlm_final")]
        checkpoint: String,
    },
}

#[derive(Subcommand)]
enum TaskgenCommand {
    /// Write the suite as PGM images plus a JSON manifest.
    Dump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

fn load_config(
    path: &Path,
    seeds: Option<Vec<u64>>,
    set: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(path)?;
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("--set expects key=value, got `{kv}`")))?;
        set_key(&mut cfg, k.trim(), v.trim())?;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if cfg.seeds.is_empty() {
        return Err(ConfigError::Invalid("no seeds to run".into()));
    }
    cfg.run_config(cfg.seeds[0])
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            set,
        } => {
            let cfg = load_config(&config, seeds, &set)?;
            for s in commands::cmd_run(&cfg, &out)? {
                let r = &s.report;
                println!(
                    "{}  Transfer {}  Avg {:.4}  Last {:.4}",
                    s.dir.display(),
                    r.transfer.map_or("-".into(), |v| format!("{v:.4}")),
                    r.avg.unwrap_or(f64::NAN),
                    r.last.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Ablate {
            config,
            out,
            mut grid,
            preset,
            seeds,
            set,
            csv,
        } => {
            let cfg = load_config(&config, seeds, &set)?;
            if let Some(p) = preset {
                grid.extend(commands::preset(&p)?);
            }
            let results = commands::cmd_ablate(&cfg, &grid, &out)?;
            let text = commands::ablation_csv(&results);
            match csv {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Report {
            runs,
            reference,
            format,
        } => {
            let reference = commands::load_run(&reference)?;
            let runs = runs
                .iter()
                .map(|r| commands::load_run(r))
                .collect::<Result<Vec<_>>>()?;
            let rows = commands::report_rows(&runs, &reference)?;
            match format {
                Format::Markdown => print!("{}", commands::report_markdown(&rows)),
                Format::Csv => print!("{}", commands::report_csv(&rows)),
            }
        }
        Command::GenPreview {
            run,
            class,
            count,
            out,
        } => {
            let m = commands::cmd_gen_preview(&run, &class, count, &out)?;
            let show = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.4}"));
            println!(
                "{}: base {}  adapted {}  ({} files)",
                m.class,
                show(m.mean_base_confidence),
                show(m.mean_adapted_confidence),
                m.entries.len()
            );
        }
        Command::Taskgen {
            command:
                TaskgenCommand::Dump {
                    config,
                    seed,
                    out,
                    per_class,
                },
        } => {
            let cfg = load_config(&config, None, &[])?;
            let suite = loraloop::taskgen::SuiteConfig {
                seed,
                ..cfg.run.suite.clone()
            };
            let tasks = commands::cmd_taskgen_dump(&suite, &out, per_class)?;
            let files: usize = tasks.iter().map(|t| t.files.len()).sum();
            println!("wrote {} tasks, {files} images to {}", tasks.len(), out.display());
        }
        Command::Eval { run, checkpoint } => {
            let row = commands::cmd_eval(&run, &checkpoint)?;
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            println!("{}", cells.join(","));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
