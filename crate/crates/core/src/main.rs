use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptrec::config::RunConfig;
use promptrec::model::Variant;
use promptrec::pipeline::{self, SweepParam};
use promptrec::{Error, Result};

#[derive(Parser)]
#[command(name = "promptrec", version, about = "Prompt-based text cross-domain sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by `corpus.synthetic`.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Read JSONL event files, filter, remove shared users and save a corpus.
    Ingest {
        #[arg(long = "events", required = true, num_args = 1..)]
        events: Vec<PathBuf>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 5)]
        min_seq_len: usize,
        #[arg(long, default_value_t = 5)]
        min_item_freq: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Stage 1 over every domain.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2 on the target domain from an existing checkpoint directory.
    Tune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recall@K / NDCG@K of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Both stages and evaluation for the configured variant.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Every variant × seed, plus a combined CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "FULL,PR,PT,CA,SH,SP,SSP")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// One run per value of `d_w` or `tau`.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Item-ID embedding and popularity baselines.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Intra- and inter-domain cosine distances of a text and an ID checkpoint.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        id: PathBuf,
    },
    /// Finite-difference check of every unfrozen tensor's gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn done(dir: &Path) {
    println!("{{\"status\": \"ok\", \"output\": {:?}}}", dir.display().to_string());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg } => {
            let cfg = load(&cfg)?;
            pipeline::cmd_synth(&cfg, &cfg.output_dir)?;
            done(&cfg.output_dir);
        }
        Command::Ingest {
            events,
            target,
            min_seq_len,
            min_item_freq,
            out,
        } => {
            pipeline::cmd_ingest(&events, target.as_deref(), min_seq_len, min_item_freq, &out)?;
            done(&out);
        }
        Command::Pretrain { cfg } => {
            let cfg = load(&cfg)?;
            pipeline::cmd_pretrain(&cfg)?;
            done(&cfg.output_dir);
        }
        Command::Tune { cfg, checkpoint } => {
            let cfg = load(&cfg)?;
            pipeline::cmd_tune(&cfg, &checkpoint)?;
            done(&cfg.output_dir);
        }
        Command::Eval { cfg, checkpoint } => {
            let cfg = load(&cfg)?;
            print_json(&pipeline::cmd_eval(&cfg, &checkpoint)?)?;
        }
        Command::Run { cfg } => {
            let cfg = load(&cfg)?;
            print_json(&pipeline::cmd_run(&cfg)?)?;
        }
        Command::Ablate { cfg, variants, seeds } => {
            let cfg = load(&cfg)?;
            pipeline::cmd_ablate(&cfg, &variants, &seeds)?;
            done(&cfg.output_dir);
        }
        Command::Sweep { cfg, param, values } => {
            let cfg = load(&cfg)?;
            print!("{}", pipeline::cmd_sweep(&cfg, param, &values)?);
        }
        Command::Baseline { cfg } => {
            let cfg = load(&cfg)?;
            print_json(&pipeline::cmd_baseline(&cfg)?)?;
        }
        Command::Analyze { cfg, text, id } => {
            let cfg = load(&cfg)?;
            print_json(&pipeline::cmd_analyze(&cfg, &text, &id)?)?;
        }
        Command::Gradcheck { cfg } => {
            let cfg = load(&cfg)?;
            print_json(&pipeline::cmd_gradcheck(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: Error) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}
