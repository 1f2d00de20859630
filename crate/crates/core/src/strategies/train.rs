use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::plan::{compose, Phase, StrategySet};
use super::schedule::{BitSchedule, GuidedConfig, TrainSchedule};
use crate::autodiff::{Graph, Sgd, Tensor, Var};
use crate::data::{AugmentConfig, Batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::quant::{self, QuantConfig, FULL_PRECISION};

/// Data and run-wide settings shared by every phase.
#[derive(Clone)]
pub struct TrainContext {
    pub train: Arc<Dataset>,
    pub val: Arc<Dataset>,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Bounded prefetch queue length; 0 assembles batches inline.
    pub prefetch: usize,
    pub eval_batch: usize,
    /// Omit wall-clock timings so logs are reproducible byte for byte.
    pub deterministic: bool,
}

impl TrainContext {
    pub fn new(train: Arc<Dataset>, val: Arc<Dataset>, seed: u64) -> Self {
        TrainContext {
            augment: train.kind().default_augment(),
            train,
            val,
            seed,
            prefetch: 0,
            eval_batch: 500,
            deterministic: true,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's training batches.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean guidance loss over the epoch (guided phases only).
    pub guidance_loss: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseResult {
    pub phase: String,
    /// Validation accuracy before the phase's first update.
    pub initial_val_acc: f64,
    pub logs: Vec<EpochLog>,
    /// Guidance loss of every mini-batch, in order (guided phases only).
    pub guidance_trace: Vec<f64>,
}

impl PhaseResult {
    pub fn final_val_acc(&self) -> f64 {
        self.logs.last().map_or(self.initial_val_acc, |l| l.val_acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Position of `label` when logits are sorted descending, ties broken by
/// index (so rank 0 agrees with a first-maximum argmax).
fn rank_of(logits: &[f32], label: usize) -> usize {
    let y = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > y || (v == y && j < label))
        .count()
}

/// Top-1 and top-5 accuracy in eval mode, visiting `data` in index order.
pub fn evaluate(model: &mut Model<f32>, data: &Arc<Dataset>, batch: usize) -> Result<EvalMetrics> {
    let (mut top1, mut top5) = (0usize, 0usize);
    for b in BatchStream::<f32>::ordered(data.clone(), batch)? {
        let logits = model.predict(&b.images)?;
        let classes = logits.shape()[1];
        for (row, &y) in logits.data().chunks_exact(classes).zip(&b.labels) {
            let r = rank_of(row, y);
            top1 += (r == 0) as usize;
            top5 += (r < 5) as usize;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        samples: data.len(),
    })
}

/// Guidance loss: the sum over taps of the per-element mean of
/// `½(Q(μ) − ν)²`, where `Q` quantizes the full-precision tap `μ` to the
/// low-precision tap's activation width (`tap_bits`). Gradients reach `μ`
/// through `Q` by straight-through estimation.
pub fn guidance_loss(
    g: &mut Graph<f32>,
    mu: &IndexMap<String, Var>,
    nu: &IndexMap<String, Var>,
    tap_bits: &IndexMap<String, u32>,
) -> Result<Var> {
    if mu.len() != nu.len() || mu.keys().any(|k| !nu.contains_key(k)) || mu.is_empty() {
        return Err(Error::shape(
            "guidance_loss",
            format!(
                "tap keys differ: {:?} vs {:?}",
                mu.keys().collect::<Vec<_>>(),
                nu.keys().collect::<Vec<_>>()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    for (name, &m) in mu {
        let n = nu[name];
        if g.shape(m) != g.shape(n) {
            return Err(Error::shape(
                "guidance_loss",
                format!("tap `{name}`: {:?} vs {:?}", g.shape(m), g.shape(n)),
            ));
        }
        let bits = tap_bits.get(name).copied().unwrap_or(FULL_PRECISION);
        let q = quant::quantize_activations_var(g, m, bits)?;
        let r = g.half_mse(q, n)?;
        total = Some(match total {
            Some(t) => g.add(t, r)?,
            None => r,
        });
    }
    Ok(total.expect("nonempty"))
}

struct StepStats {
    loss: f64,
    correct: usize,
    guidance: Option<f64>,
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| rank_of(row, y) == 0)
        .count()
}

/// Something that consumes mini-batches and owns the model being evaluated.
trait Learner {
    fn step(&mut self, batch: &Batch<f32>, lr: f64) -> Result<StepStats>;
    fn eval_model(&mut self) -> &mut Model<f32>;
}

/// Plain cross-entropy training of one model.
struct Solo<'a> {
    model: &'a mut Model<f32>,
    sgd: Sgd<f32>,
}

fn add_weighted(g: &mut Graph<f32>, ce: Var, r: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(ce);
    }
    let w = g.mul_scalar(r, lambda as f32)?;
    g.add(ce, w)
}

impl Learner for Solo<'_> {
    fn step(&mut self, batch: &Batch<f32>, lr: f64) -> Result<StepStats> {
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let out = self.model.forward(&mut g, x, Mode::Train, true)?;
        let ce = g.softmax_cross_entropy(out.logits, &batch.labels)?;
        g.backward(ce)?;
        self.model.collect_grads(&mut g, &out)?;
        self.sgd.set_lr(lr);
        self.sgd.step(self.model.param_iter_mut())?;
        Ok(StepStats {
            loss: g.value(ce).item() as f64,
            correct: correct(g.value(out.logits), &batch.labels),
            guidance: None,
        })
    }

    fn eval_model(&mut self) -> &mut Model<f32> {
        self.model
    }
}

/// Guided training of a low-precision model with its full-precision twin.
///
/// Per mini-batch the low-precision model is updated first on
/// `CE_low + λR`, with the twin's taps as constants; then, when `joint`, the
/// twin is updated on `CE_full + λR` against the already-updated low-precision
/// taps. The model not being updated runs with batch statistics but leaves its
/// running statistics alone.
struct Guided<'a> {
    low: &'a mut Model<f32>,
    full: &'a mut Model<f32>,
    sgd_low: Sgd<f32>,
    sgd_full: Sgd<f32>,
    cfg: GuidedConfig,
}

impl Learner for Guided<'_> {
    fn step(&mut self, batch: &Batch<f32>, lr: f64) -> Result<StepStats> {
        let tap_bits = self.low.tap_bits();

        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let teacher = self.full.forward(&mut g, x, Mode::TrainFrozen, false)?;
        let out = self.low.forward(&mut g, x, Mode::Train, true)?;
        let ce = g.softmax_cross_entropy(out.logits, &batch.labels)?;
        let r = guidance_loss(&mut g, &teacher.taps, &out.taps, &tap_bits)?;
        let loss = add_weighted(&mut g, ce, r, self.cfg.lambda)?;
        g.backward(loss)?;
        self.low.collect_grads(&mut g, &out)?;
        self.sgd_low.set_lr(lr);
        self.sgd_low.step(self.low.param_iter_mut())?;
        let stats = StepStats {
            loss: g.value(ce).item() as f64,
            correct: correct(g.value(out.logits), &batch.labels),
            guidance: Some(g.value(r).item() as f64),
        };
        drop(g);

        if self.cfg.joint {
            let mut g = Graph::new();
            let x = g.constant(batch.images.clone());
            let student = self.low.forward(&mut g, x, Mode::TrainFrozen, false)?;
            let out = self.full.forward(&mut g, x, Mode::Train, true)?;
            let ce = g.softmax_cross_entropy(out.logits, &batch.labels)?;
            let loss = if self.cfg.lambda == 0.0 {
                ce
            } else {
                let r = guidance_loss(&mut g, &out.taps, &student.taps, &tap_bits)?;
                add_weighted(&mut g, ce, r, self.cfg.lambda)?
            };
            g.backward(loss)?;
            self.full.collect_grads(&mut g, &out)?;
            self.sgd_full.set_lr(lr);
            self.sgd_full.step(self.full.param_iter_mut())?;
        }
        Ok(stats)
    }

    fn eval_model(&mut self) -> &mut Model<f32> {
        self.low
    }
}

fn batches(
    ctx: &TrainContext,
    batch_size: usize,
    stream: u64,
    epoch: usize,
) -> Result<Box<dyn Iterator<Item = Batch<f32>>>> {
    let key = (stream << 20) | epoch as u64;
    let s = BatchStream::new(ctx.train.clone(), batch_size, ctx.augment, ctx.seed, key)?;
    Ok(if ctx.prefetch > 0 {
        Box::new(s.prefetch(ctx.prefetch))
    } else {
        Box::new(s)
    })
}

/// Shared epoch loop. `stream` keys the shuffling generator so that every
/// phase and epoch sees a fixed batch order independent of earlier phases.
fn train_epochs(
    ctx: &TrainContext,
    learner: &mut dyn Learner,
    sched: &TrainSchedule,
    phase: &str,
    stream: u64,
) -> Result<(Vec<EpochLog>, Vec<f64>)> {
    sched.validate()?;
    let mut logs = Vec::with_capacity(sched.epochs);
    let mut trace = Vec::new();
    for epoch in 0..sched.epochs {
        let start = Instant::now();
        let lr = sched.lr.at(epoch);
        let (mut loss_sum, mut hits, mut seen) = (0.0f64, 0usize, 0usize);
        let mut guidance = (0.0f64, false);
        for (step, batch) in batches(ctx, sched.batch_size, stream, epoch)?.enumerate() {
            let n = batch.labels.len();
            let diverged = |loss: f64| Error::Diverged {
                phase: phase.to_string(),
                epoch,
                step,
                loss,
            };
            let stats = match learner.step(&batch, lr) {
                Ok(s) => s,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !stats.loss.is_finite() {
                return Err(diverged(stats.loss));
            }
            loss_sum += stats.loss * n as f64;
            hits += stats.correct;
            seen += n;
            if let Some(r) = stats.guidance {
                guidance.0 += r * n as f64;
                guidance.1 = true;
                trace.push(r);
            }
        }
        let val = evaluate(learner.eval_model(), &ctx.val, ctx.eval_batch)?;
        let seen_f = seen.max(1) as f64;
        logs.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            lr,
            train_loss: loss_sum / seen_f,
            train_acc: hits as f64 / seen_f,
            val_acc: val.top1,
            guidance_loss: guidance.1.then(|| guidance.0 / seen_f),
            wall_ms: (!ctx.deterministic).then(|| start.elapsed().as_millis() as u64),
        });
    }
    Ok((logs, trace))
}

/// Full-precision pretraining.
pub fn run_pretrain(ctx: &TrainContext, model: &mut Model<f32>, sched: &TrainSchedule) -> Result<PhaseResult> {
    let mut qc = *model.quant();
    qc.weight_bits = FULL_PRECISION;
    qc.act_bits = FULL_PRECISION;
    model.set_quant(qc)?;
    let initial_val_acc = evaluate(model, &ctx.val, ctx.eval_batch)?.top1;
    let mut learner = Solo {
        model,
        sgd: Sgd::new(sched.sgd(0)),
    };
    let (logs, _) = train_epochs(ctx, &mut learner, sched, "pretrain", 0)?;
    Ok(PhaseResult {
        phase: "pretrain".into(),
        initial_val_acc,
        logs,
        guidance_trace: Vec::new(),
    })
}

/// Trains one plan phase in place. `base` supplies the quantization flags;
/// the phase supplies the bit-widths. Guided phases need the twin.
pub fn run_phase(
    ctx: &TrainContext,
    phase: &Phase,
    base: QuantConfig,
    model: &mut Model<f32>,
    twin: Option<&mut Model<f32>>,
    guided: GuidedConfig,
    sched: &TrainSchedule,
) -> Result<PhaseResult> {
    model.set_quant(base.with_bits(phase.weight_bits, phase.act_bits))?;
    let initial_val_acc = evaluate(model, &ctx.val, ctx.eval_batch)?.top1;
    let stream = phase.index as u64;
    let (logs, guidance_trace) = if phase.guided {
        guided.validate()?;
        let full =
            twin.ok_or_else(|| Error::Plan(format!("guided phase `{}` has no full-precision twin", phase.name)))?;
        if full.is_quantized() {
            return Err(Error::Plan("the guidance twin must be full precision".into()));
        }
        if full.spec().taps() != model.spec().taps() {
            return Err(Error::Spec(format!(
                "twin taps {:?} do not match {:?}",
                full.spec().taps(),
                model.spec().taps()
            )));
        }
        let mut learner = Guided {
            low: model,
            full,
            sgd_low: Sgd::new(sched.sgd(0)),
            sgd_full: Sgd::new(sched.sgd(0)),
            cfg: guided,
        };
        train_epochs(ctx, &mut learner, sched, &phase.name, stream)?
    } else {
        let mut learner = Solo {
            model,
            sgd: Sgd::new(sched.sgd(0)),
        };
        train_epochs(ctx, &mut learner, sched, &phase.name, stream)?
    };
    Ok(PhaseResult {
        phase: phase.name.clone(),
        initial_val_acc,
        logs,
        guidance_trace,
    })
}

/// Runs `phases` in order, each starting from the previous phase's weights.
/// Phases with index `<= skip` are assumed done (resume). `on_phase` sees the
/// model (and twin) after every phase, e.g. to write checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn run_plan(
    ctx: &TrainContext,
    phases: &[Phase],
    base: QuantConfig,
    model: &mut Model<f32>,
    mut twin: Option<&mut Model<f32>>,
    guided: GuidedConfig,
    sched: &TrainSchedule,
    skip: usize,
    mut on_phase: impl FnMut(&Phase, &Model<f32>, Option<&Model<f32>>, &PhaseResult) -> Result<()>,
) -> Result<Vec<PhaseResult>> {
    let mut results = Vec::new();
    for phase in phases.iter().filter(|p| p.index > skip) {
        let result = run_phase(ctx, phase, base, model, twin.as_deref_mut(), guided, sched)?;
        on_phase(phase, model, twin.as_deref(), &result)?;
        results.push(result);
    }
    Ok(results)
}

fn ensure_wider(model: &Model<f32>, k: u32) -> Result<()> {
    let q = model.quant();
    let from = q.weight_bits.min(q.act_bits);
    if k >= from {
        return Err(Error::Plan(format!(
            "cannot quantize a {from}-bit model down to {k} bits"
        )));
    }
    Ok(())
}

/// Two-stage quantization to `k` bits: weights first with `stage1_act_bits`
/// activations, then both at `k` starting from the Stage-1 weights.
pub fn run_two_stage(
    ctx: &TrainContext,
    model: &mut Model<f32>,
    k: u32,
    stage1_act_bits: u32,
    base: QuantConfig,
    sched: &TrainSchedule,
) -> Result<(PhaseResult, PhaseResult)> {
    ensure_wider(model, k)?;
    let set = StrategySet {
        ts: true,
        ..Default::default()
    };
    let phases = compose(set, k, None, stage1_act_bits)?;
    let mut r = run_plan(
        ctx,
        &phases,
        base,
        model,
        None,
        GuidedConfig::default(),
        sched,
        0,
        |_, _, _, _| Ok(()),
    )?;
    let stage2 = r.pop().expect("two phases");
    let stage1 = r.pop().expect("two phases");
    Ok((stage1, stage2))
}

/// Progressive quantization down `schedule`, each rung initialized from the
/// previous one.
pub fn run_progressive(
    ctx: &TrainContext,
    model: &mut Model<f32>,
    schedule: &BitSchedule,
    base: QuantConfig,
    sched: &TrainSchedule,
    on_rung: impl FnMut(&Phase, &Model<f32>, Option<&Model<f32>>, &PhaseResult) -> Result<()>,
) -> Result<Vec<PhaseResult>> {
    ensure_wider(model, schedule.rungs()[0])?;
    let set = StrategySet {
        pq: true,
        ..Default::default()
    };
    let phases = compose(set, schedule.target(), Some(schedule), FULL_PRECISION)?;
    run_plan(
        ctx,
        &phases,
        base,
        model,
        None,
        GuidedConfig::default(),
        sched,
        0,
        on_rung,
    )
}

/// Guided `k`-bit training of `low` alongside the full-precision `full`.
pub fn run_guided(
    ctx: &TrainContext,
    low: &mut Model<f32>,
    full: &mut Model<f32>,
    k: u32,
    cfg: GuidedConfig,
    base: QuantConfig,
    sched: &TrainSchedule,
) -> Result<PhaseResult> {
    ensure_wider(low, k)?;
    let set = StrategySet {
        guided: true,
        ..Default::default()
    };
    let phases = compose(set, k, None, FULL_PRECISION)?;
    run_phase(ctx, &phases[0], base, low, Some(full), cfg, sched)
}
