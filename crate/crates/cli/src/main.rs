use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lowbit::strategies::BitSchedule;
use lowbit_cli::commands::{self, Start};
use lowbit_cli::{CliError, ExperimentConfig, Result, DATA_DIR_ENV};

/// Low-bit quantization-aware training experiments.
///
/// Settings are resolved as: built-in defaults, then `--config`, then
/// `--set` overrides, then the dedicated flags.
#[derive(Parser)]
#[command(name = "lowbit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding `mnist/` and `cifar10/`.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target bit-width (quantize, plan), or `K` / `W,A` to re-quantize (eval).
    #[arg(long)]
    bits: Option<String>,
    /// `baseline`, or any of `ts`, `pq`, `guided` joined by `+`.
    #[arg(long)]
    strategy: Option<String>,
    /// Guidance loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Keep the full-precision twin frozen during guided training.
    #[arg(long)]
    no_joint: bool,
    /// Leave the first convolution and last fully-connected layer at full precision.
    #[arg(long)]
    keep_first_last_fp: bool,
    /// Omit wall-clock timings so metrics files are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Any config key, e.g. `--set quant_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model.
    Pretrain(Common),
    /// Run a quantization plan starting from a checkpoint.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint [default: <out>/pretrain/final.ckpt].
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue after the phase stored in this phase checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1/top-5 accuracy of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the phases a quantize run would execute.
    Plan(Common),
}

fn resolve(c: &Common, target_bits: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    if let Some(d) = &c.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let (Some(b), true) = (&c.bits, target_bits) {
        cfg.bits = b
            .parse()
            .map_err(|_| CliError::Usage(format!("--bits expects one bit-width here, got `{b}`")))?;
    }
    if let Some(s) = &c.strategy {
        cfg.apply_override(&format!("strategy={s}"))?;
    }
    if let Some(l) = c.lambda {
        cfg.lambda = l;
    }
    if c.no_joint {
        cfg.joint = false;
    }
    if c.keep_first_last_fp {
        cfg.quantize_first_last = false;
    }
    if c.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn print(line: &str) {
    println!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            if common.bits.is_some() {
                return Err(CliError::Usage(
                    "pretrain always trains at full precision; drop --bits".into(),
                ));
            }
            let cfg = resolve(&common, false)?;
            let out = commands::pretrain(&cfg, &mut print)?;
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Quantize { common, init, resume } => {
            let cfg = resolve(&common, true)?;
            let start = match &resume {
                Some(p) => Start::Resume(p),
                None => Start::Init(init.as_deref()),
            };
            let out = commands::quantize(&cfg, start, &mut print)?;
            for p in &out.checkpoints {
                println!("checkpoint {}", p.display());
            }
            if let Some(t) = &out.twin {
                println!("twin {}", t.display());
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common, false)?;
            let bits = common.bits.as_deref().map(commands::parse_bits_override).transpose()?;
            let m = commands::eval(&cfg, &checkpoint, bits)?;
            println!("samples {}", m.samples);
            println!("top1 {:.4}", m.top1);
            if cfg.dataset.classes() >= 5 {
                println!("top5 {:.4}", m.top5);
            }
        }
        Command::Plan(common) => {
            let cfg = resolve(&common, true)?;
            let phases = commands::plan(&cfg)?;
            let schedule: BitSchedule = cfg.resolved_schedule()?;
            println!("# {} to {} bits over {:?}", cfg.strategy, cfg.bits, schedule.bits());
            for p in phases {
                println!("{p}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                CliError::Usage(_) | CliError::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
