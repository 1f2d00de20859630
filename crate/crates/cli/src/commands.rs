//! The four subcommands as library functions.
//!
//! Output layout under `out`:
//!
//! ```text
//! pretrain/{config.txt, metrics.csv, final.ckpt}
//! <strategy>-<k>bit/{config.txt, metrics.csv, phase-NN-<name>.ckpt, twin.ckpt}
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use lowbit::data::Dataset;
use lowbit::nn::Model;
use lowbit::strategies::{evaluate, run_plan, run_pretrain, EvalMetrics, Phase, PhaseResult, TrainContext};

use crate::checkpoint::{write_atomic, Checkpoint, Position};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::metrics::MetricsFile;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const PRETRAIN_CHECKPOINT: &str = "final.ckpt";
pub const TWIN_CHECKPOINT: &str = "twin.ckpt";

/// Progress sink for human-readable status lines.
pub type Log<'a> = &'a mut dyn FnMut(&str);

pub fn phase_checkpoint_name(phase: &Phase) -> String {
    format!("phase-{:02}-{}.ckpt", phase.index, phase.name)
}

/// `(train, val)` for a config: the configured training subset, and the
/// leading `val_subset` test samples normalized with the training mean.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Arc<Dataset>, Arc<Dataset>)> {
    let dir = cfg.data_dir.join(cfg.dataset.subdir());
    let (train, test) = cfg.dataset.load(&dir).map_err(|source| match source {
        lowbit::Error::Io { .. } => CliError::MissingDataset {
            path: dir.clone(),
            source,
        },
        other => other.into(),
    })?;
    let train = if cfg.train_subset > 0 {
        train.take(cfg.train_subset)
    } else {
        train
    };
    let val = if cfg.val_subset > 0 {
        test.take(cfg.val_subset)
    } else {
        test
    };
    Ok((Arc::new(train), Arc::new(val)))
}

pub fn context(cfg: &ExperimentConfig, train: Arc<Dataset>, val: Arc<Dataset>) -> Result<TrainContext> {
    let augment = cfg.augment_config();
    augment.validate(cfg.dataset)?;
    let mut ctx = TrainContext::new(train, val, cfg.seed);
    ctx.augment = augment;
    ctx.prefetch = cfg.prefetch;
    ctx.eval_batch = cfg.eval_batch.max(1);
    ctx.deterministic = cfg.deterministic;
    Ok(ctx)
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(CONFIG_FILE), cfg.render().as_bytes())
}

fn summary(r: &PhaseResult) -> String {
    format!(
        "{:<12} start {:.4}  final {:.4}  ({} epochs)",
        r.phase,
        r.initial_val_acc,
        r.final_val_acc(),
        r.logs.len()
    )
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub result: PhaseResult,
}

pub fn pretrain(cfg: &ExperimentConfig, log: Log) -> Result<PretrainOutput> {
    let (train, val) = load_data(cfg)?;
    pretrain_on(cfg, train, val, log)
}

/// [`pretrain`] on already loaded data.
pub fn pretrain_on(cfg: &ExperimentConfig, train: Arc<Dataset>, val: Arc<Dataset>, log: Log) -> Result<PretrainOutput> {
    let ctx = context(cfg, train, val)?;
    let dir = cfg.out.join(PRETRAIN_DIR);
    write_config(cfg, &dir)?;
    let mut model = Model::new(cfg.model_spec(), cfg.quant_base(), cfg.seed)?;
    log(&format!(
        "pretraining {} ({} parameters) on {} {} samples",
        cfg.model.name(),
        model.param_count(),
        ctx.train.len(),
        cfg.dataset.name()
    ));
    let result = run_pretrain(&ctx, &mut model, &cfg.pretrain_schedule())?;
    let checkpoint = dir.join(PRETRAIN_CHECKPOINT);
    let position = Position {
        phase_index: 0,
        phase_name: "pretrain".into(),
        seed: cfg.seed,
        next_stream: 1,
    };
    Checkpoint::new(model, position).save(&checkpoint)?;
    let mut metrics = MetricsFile::default();
    metrics.extend(&result.logs);
    metrics.write(&dir.join(METRICS_FILE))?;
    log(&summary(&result));
    Ok(PretrainOutput {
        dir,
        checkpoint,
        result,
    })
}

#[derive(Debug)]
pub struct QuantizeOutput {
    pub dir: PathBuf,
    pub phases: Vec<Phase>,
    /// Checkpoints of the phases run by this call, in order.
    pub checkpoints: Vec<PathBuf>,
    pub results: Vec<PhaseResult>,
    pub twin: Option<PathBuf>,
}

/// Where a quantize run starts.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// From a (usually pretrained) checkpoint; `None` means the pretrain
    /// checkpoint under `out`.
    Init(Option<&'a Path>),
    /// After the phase stored in a phase checkpoint of the same plan.
    Resume(&'a Path),
}

pub fn quantize(cfg: &ExperimentConfig, start: Start, log: Log) -> Result<QuantizeOutput> {
    let (train, val) = load_data(cfg)?;
    quantize_on(cfg, start, train, val, log)
}

/// [`quantize`] on already loaded data.
pub fn quantize_on(
    cfg: &ExperimentConfig,
    start: Start,
    train: Arc<Dataset>,
    val: Arc<Dataset>,
    log: Log,
) -> Result<QuantizeOutput> {
    let phases = cfg.plan()?;
    let guided = phases.iter().any(|p| p.guided);
    let spec = cfg.model_spec();
    let dir = cfg.out.join(cfg.run_label());
    let metrics_path = dir.join(METRICS_FILE);

    let (mut model, mut twin, skip, mut metrics) = match start {
        Start::Init(path) => {
            let path = path
                .map(Path::to_path_buf)
                .unwrap_or_else(|| cfg.out.join(PRETRAIN_DIR).join(PRETRAIN_CHECKPOINT));
            let ck = Checkpoint::load_for(&path, &spec)?;
            let twin = if guided {
                let mut t = ck.model.clone();
                t.set_quant(cfg.quant_base())?;
                Some(t)
            } else {
                None
            };
            (ck.model, twin, 0, MetricsFile::default())
        }
        Start::Resume(path) => {
            let ck = Checkpoint::load_for(path, &spec)?;
            let k = ck.position.phase_index as usize;
            let matches = phases
                .get(k.wrapping_sub(1))
                .is_some_and(|p| p.name == ck.position.phase_name);
            if !matches {
                return Err(CliError::Usage(format!(
                    "{} holds phase {k} `{}`, which is not part of the plan {}",
                    path.display(),
                    ck.position.phase_name,
                    cfg.run_label()
                )));
            }
            if ck.position.seed != cfg.seed {
                return Err(CliError::Usage(format!(
                    "{} was trained with seed {}, the config says {}",
                    path.display(),
                    ck.position.seed,
                    cfg.seed
                )));
            }
            if guided && ck.twin.is_none() {
                return Err(CliError::checkpoint(path, "guided plan but the checkpoint has no twin"));
            }
            let done: Vec<&str> = phases[..k].iter().map(|p| p.name.as_str()).collect();
            let metrics = MetricsFile::resume(&metrics_path, |name| done.contains(&name))?;
            (ck.model, ck.twin, k, metrics)
        }
    };

    write_config(cfg, &dir)?;
    let ctx = context(cfg, train, val)?;
    log(&format!(
        "plan {}: {} phases, {} to run",
        cfg.run_label(),
        phases.len(),
        phases.len() - skip
    ));
    let mut checkpoints = Vec::new();
    // `run_plan` speaks the core error type; keep ours aside and report it after.
    let mut failure = None;
    let outcome = run_plan(
        &ctx,
        &phases,
        cfg.quant_base(),
        &mut model,
        twin.as_mut(),
        cfg.guided(),
        &cfg.quant_schedule(),
        skip,
        |phase, model, twin, result| {
            let saved = (|| -> Result<PathBuf> {
                let path = dir.join(phase_checkpoint_name(phase));
                let position = Position {
                    phase_index: phase.index as u32,
                    phase_name: phase.name.clone(),
                    seed: cfg.seed,
                    next_stream: phase.index as u64 + 1,
                };
                let mut ck = Checkpoint::new(model.clone(), position);
                ck.twin = twin.cloned();
                ck.save(&path)?;
                metrics.extend(&result.logs);
                metrics.write(&metrics_path)?;
                Ok(path)
            })();
            match saved {
                Ok(path) => {
                    checkpoints.push(path);
                    log(&summary(result));
                    Ok(())
                }
                Err(e) => {
                    let msg = e.to_string();
                    failure = Some(e);
                    Err(lowbit::Error::Plan(msg))
                }
            }
        },
    );
    let results = match (outcome, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };

    let twin_path = match twin {
        Some(t) => {
            let path = dir.join(TWIN_CHECKPOINT);
            let last = phases.last().expect("plans are nonempty");
            let position = Position {
                phase_index: last.index as u32,
                phase_name: last.name.clone(),
                seed: cfg.seed,
                next_stream: last.index as u64 + 1,
            };
            Checkpoint::new(t, position).save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(QuantizeOutput {
        dir,
        phases,
        checkpoints,
        results,
        twin: twin_path,
    })
}

/// Parses a bit override: `K` for both, or `W,A`.
pub fn parse_bits_override(s: &str) -> Result<(u32, u32)> {
    let bad = || CliError::Usage(format!("bad bit-widths `{s}`: expected K or W,A"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums: Vec<u32> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match nums[..] {
        [k] => Ok((k, k)),
        [w, a] => Ok((w, a)),
        _ => Err(bad()),
    }
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, bits: Option<(u32, u32)>) -> Result<EvalMetrics> {
    let (_, val) = load_data(cfg)?;
    eval_on(checkpoint, bits, &val, cfg.eval_batch.max(1))
}

/// Top-1/top-5 of a checkpoint on `val`, optionally re-quantized to other
/// bit-widths first.
pub fn eval_on(checkpoint: &Path, bits: Option<(u32, u32)>, val: &Arc<Dataset>, batch: usize) -> Result<EvalMetrics> {
    let mut model = Checkpoint::load(checkpoint)?.model;
    if model.spec().input != val.shape() {
        return Err(CliError::Usage(format!(
            "{} expects {:?} inputs, the dataset has {:?}",
            checkpoint.display(),
            model.spec().input,
            val.shape()
        )));
    }
    if let Some((w, a)) = bits {
        let q = model.quant().with_bits(w, a);
        model.set_quant(q)?;
    }
    Ok(evaluate(&mut model, val, batch)?)
}

pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<Phase>> {
    cfg.plan()
}
