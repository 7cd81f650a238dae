use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use storydiff::config::{Ablation, RunConfig};
use storydiff::metrics::MetricReport;
use storydiff::pipeline::{self, Layout};
use storydiff::sampler::Task;

#[derive(Parser, Debug)]
#[command(name = "storydiff", version, about = "Story generation with adaptive history context and guided sampling")]
struct Cli {
    /// JSON config; keys given override the named profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in profile: desk, reference, pororo-full, flintstones-full.
    #[arg(long, global = true)]
    profile: Option<String>,

    /// One seed for data, training and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Where this command writes its output (dataset, images or reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root for datasets, checkpoints and generated stories.
    #[arg(long, global = true, env = "STORYDIFF_HOME", default_value = "storydiff-home")]
    home: PathBuf,

    /// Dataset directory, when not under the home.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    show_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct AblationArgs {
    /// Sample with g = 0.
    #[arg(long)]
    no_guidance: bool,
    /// Use history vectors without the attention update.
    #[arg(long)]
    no_attention: bool,
    /// Drop the residual around history attention.
    #[arg(long)]
    no_attention_residual: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic story dataset.
    MakeData {
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train encoders, the character classifier and the denoiser.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Sample test stories frame by frame.
    Generate {
        #[arg(long)]
        task: Option<Task>,
        /// Comma-separated story ids (default: the configured test stories).
        #[arg(long, value_delimiter = ',')]
        stories: Option<Vec<String>>,
        /// Write the real frames instead of sampling.
        #[arg(long)]
        ground_truth: bool,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Score generated stories against the test set.
    Evaluate {
        /// Output of `generate` (default: this config's generation directory).
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        /// Ablation rows to train, generate and score, e.g. full,no-guidance,no-attention.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<String>>,
        #[command(flatten)]
        ablation: AblationArgs,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut patch = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| storydiff::Error::Invalid(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    if let Some(name) = &cli.profile {
        patch["profile"] = serde_json::Value::String(name.clone());
    }
    let mut cfg = RunConfig::from_json(&patch.to_string())?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let ablation = match &cli.command {
        Command::Train { ablation, .. } | Command::Generate { ablation, .. } | Command::Evaluate { ablation, .. } => ablation.clone(),
        Command::MakeData { .. } => AblationArgs::default(),
    };
    cfg.ablation = Ablation {
        no_guidance: cfg.ablation.no_guidance || ablation.no_guidance,
        no_attention: cfg.ablation.no_attention || ablation.no_attention,
        no_attention_residual: cfg.ablation.no_attention_residual || ablation.no_attention_residual,
    };
    match &cli.command {
        Command::Train { epochs: Some(e), .. } => cfg.training.epochs = *e,
        Command::Generate { task: Some(t), .. } | Command::Evaluate { task: Some(t), .. } => cfg.task = *t,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.show_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let layout = Layout { home: cli.home.clone(), data_dir: cli.data.clone() };
    match &cli.command {
        Command::MakeData { force } => {
            let dir = cli.out.clone().unwrap_or_else(|| layout.data());
            let data = pipeline::make_data(&cfg, &dir, *force)?;
            print!("{}", pipeline::split_table(&data));
            println!("checksum {}", pipeline::dataset_checksum(&data));
            println!("written to {}", dir.display());
        }
        Command::Train { .. } => {
            let s = pipeline::train(&cfg, &layout)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Generate { stories, ground_truth, .. } => {
            let system = if *ground_truth { "ground-truth".to_string() } else { pipeline::system_name(&cfg.ablation) };
            let out = cli.out.clone().unwrap_or_else(|| layout.generated(&system, cfg.task));
            if *ground_truth {
                pipeline::export_ground_truth(&cfg, &layout, &out, cfg.task, stories.as_deref())?;
            } else {
                pipeline::generate(&cfg, &layout, &out, cfg.task, stories.as_deref())?;
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate { generated, sweep: Some(rows), .. } => {
            if generated.is_some() {
                return Err(storydiff::Error::Invalid("--sweep generates its own outputs; drop --generated".into()).into());
            }
            let names: Vec<&str> = rows.iter().map(String::as_str).collect();
            let reports = pipeline::sweep(&cfg, &layout, &names)?;
            write_reports(cli.out.as_deref(), &reports)?;
            print!("{}", MetricReport::table(&reports));
        }
        Command::Evaluate { generated, .. } => {
            let dir = generated.clone().unwrap_or_else(|| layout.generated(&pipeline::system_name(&cfg.ablation), cfg.task));
            let report = pipeline::evaluate(&cfg, &layout, &dir, None)?;
            if cli.out.is_some() {
                write_reports(cli.out.as_deref(), std::slice::from_ref(&report))?;
            }
            print!("{}", MetricReport::table(std::slice::from_ref(&report)));
            if let Some(r) = report.firing_rate {
                println!("anchor firing rate {r:.3}");
            }
        }
    }
    Ok(())
}

fn write_reports(out: Option<&Path>, reports: &[MetricReport]) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(reports)?)?;
    std::fs::write(dir.join("report.txt"), MetricReport::table(reports))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<storydiff::Error>() {
        Some(e) if !e.is_validation() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
