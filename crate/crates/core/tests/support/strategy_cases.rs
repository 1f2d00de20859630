//! Exact-equality oracles for the training strategies, shared by the core
//! test suite (synthetic data) and the acceptance runner (MNIST subsets).
//! Each check returns a short summary or the first discrepancy.

#![allow(dead_code)]

use std::sync::Arc;

use lowbit::autodiff::Graph;
use lowbit::data::{Dataset, DatasetKind, Split};
use lowbit::nn::{Mode, Model, ModelSpec};
use lowbit::quant::QuantConfig;
use lowbit::strategies::{
    evaluate, run_phase, run_plan, run_pretrain, BitSchedule, GuidedConfig, Phase, StrategySet, TrainContext,
    TrainSchedule,
};
use lowbit::Error;

pub type Outcome = Result<String, String>;

pub struct Fixture {
    pub train: Arc<Dataset>,
    pub val: Arc<Dataset>,
    pub spec: ModelSpec,
}

impl Fixture {
    pub fn ctx(&self, seed: u64) -> TrainContext {
        TrainContext::new(self.train.clone(), self.val.clone(), seed)
    }
}

/// Small MNIST-shaped set where each class lights up its own band of rows.
pub fn synthetic(n: usize, seed: u8) -> Fixture {
    let make = |n: usize, split: Split, salt: u8| {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i * 7 + salt as usize) % 10;
            labels.push(class as u8);
            for p in 0..784 {
                let row = p / 28;
                let noise = ((p * 131 + i * 17 + salt as usize * 29) % 61) as u8;
                pixels.push(if row / 3 == class { 200 + noise / 2 } else { noise });
            }
        }
        Dataset::from_raw(DatasetKind::Mnist, split, pixels, labels).unwrap()
    };
    let train = make(n, Split::Train, seed);
    let val = make(n / 2, Split::Test, seed.wrapping_add(1)).with_mean_of(&train);
    Fixture {
        train: Arc::new(train),
        val: Arc::new(val),
        spec: tiny_alexnet(),
    }
}

pub fn tiny_alexnet() -> ModelSpec {
    ModelSpec::mini_alexnet([1, 28, 28], 10, [2, 3, 4], 8)
}

pub fn schedule(epochs: usize, batch: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: batch,
        ..TrainSchedule::quantized()
    }
}

fn phase(index: usize, name: &str, w: u32, a: u32, guided: bool) -> Phase {
    Phase {
        index,
        name: name.into(),
        weight_bits: w,
        act_bits: a,
        guided,
    }
}

/// Same parameter names, decay flags and bit patterns; same buffers.
pub fn same_state(a: &Model<f32>, b: &Model<f32>) -> Result<(), String> {
    if a.params().len() != b.params().len() || a.buffers().len() != b.buffers().len() {
        return Err("different parameter sets".into());
    }
    for ((na, pa), (nb, pb)) in a.params().iter().zip(b.params()) {
        if na != nb || !pa.value.bit_eq(&pb.value) || pa.decay != pb.decay {
            return Err(format!("parameter `{na}` differs"));
        }
    }
    for ((na, ta), (nb, tb)) in a.buffers().iter().zip(b.buffers()) {
        if na != nb || !ta.bit_eq(tb) {
            return Err(format!("buffer `{na}` differs"));
        }
    }
    Ok(())
}

/// Gradients of the cross-entropy on the first training batch.
fn first_grads(model: &mut Model<f32>, f: &Fixture) -> Vec<(String, Vec<u32>)> {
    let x = f.train.take(16).images::<f32>();
    let labels: Vec<usize> = f.train.labels()[..16].iter().map(|&l| l as usize).collect();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = model.forward(&mut g, xv, Mode::TrainFrozen, true).unwrap();
    let l = g.softmax_cross_entropy(out.logits, &labels).unwrap();
    g.backward(l).unwrap();
    model.collect_grads(&mut g, &out).unwrap();
    model
        .params()
        .iter()
        .map(|(n, p)| {
            (
                n.clone(),
                p.grad
                    .as_ref()
                    .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
                    .unwrap_or_default(),
            )
        })
        .collect()
}

/// A (32, 32) quantization config trains exactly like a model whose spec has
/// quantization switched off: same losses, gradients and final parameters.
pub fn k32_equivalence(f: &Fixture, epochs: usize, batch: usize, seed: u64) -> Outcome {
    let mut with = Model::new(f.spec.clone(), QuantConfig::uniform(32), seed).map_err(|e| e.to_string())?;
    let mut without =
        Model::new(f.spec.without_quantization(), QuantConfig::full(), seed).map_err(|e| e.to_string())?;
    if first_grads(&mut with, f) != first_grads(&mut without, f) {
        return Err("first-batch gradients differ".into());
    }
    let ctx = f.ctx(seed);
    // the pretraining rate, so that parameters move well away from init
    let sched = TrainSchedule {
        epochs,
        batch_size: batch,
        ..TrainSchedule::pretrain()
    };
    let p = phase(1, "b32", 32, 32, false);
    let base = QuantConfig::full();
    let ra = run_phase(&ctx, &p, base, &mut with, None, GuidedConfig::default(), &sched).map_err(|e| e.to_string())?;
    let rb =
        run_phase(&ctx, &p, base, &mut without, None, GuidedConfig::default(), &sched).map_err(|e| e.to_string())?;
    for (a, b) in ra.logs.iter().zip(&rb.logs) {
        if a.train_loss.to_bits() != b.train_loss.to_bits() || a.val_acc.to_bits() != b.val_acc.to_bits() {
            return Err(format!("epoch {} logs differ: {a:?} vs {b:?}", a.epoch));
        }
    }
    if ra.logs.len() != epochs || rb.logs.len() != epochs {
        return Err("missing epochs".into());
    }
    same_state(&with, &without)?;
    Ok(format!(
        "{epochs} epochs on {} samples, final loss {:.6} in both",
        f.train.len(),
        ra.logs.last().unwrap().train_loss
    ))
}

fn pretrained(f: &Fixture, seed: u64, epochs: usize) -> Result<Model<f32>, String> {
    let mut m = Model::new(f.spec.clone(), QuantConfig::full(), seed).map_err(|e| e.to_string())?;
    run_pretrain(&f.ctx(seed), &mut m, &schedule(epochs, 16)).map_err(|e| e.to_string())?;
    Ok(m)
}

/// With λ = 0 and joint updates the twin's trajectory equals plain
/// fine-tuning of the twin alone, checked after every epoch.
pub fn guided_lambda_zero_is_solo(f: &Fixture, epochs: usize, seed: u64) -> Outcome {
    let start = pretrained(f, seed, 1)?;
    let mut low = start.clone();
    let mut full = start.clone();
    let mut solo = start;
    let ctx = f.ctx(seed);
    let sched = schedule(1, 16);
    let cfg = GuidedConfig {
        lambda: 0.0,
        joint: true,
    };
    let base = QuantConfig::full();
    for e in 1..=epochs {
        let g = phase(e, "g", 2, 2, true);
        run_phase(&ctx, &g, base, &mut low, Some(&mut full), cfg, &sched).map_err(|e| e.to_string())?;
        let s = phase(e, "g", 32, 32, false);
        run_phase(&ctx, &s, base, &mut solo, None, GuidedConfig::default(), &sched).map_err(|e| e.to_string())?;
        same_state(&full, &solo).map_err(|d| format!("after epoch {e}: {d}"))?;
    }
    Ok(format!("twin equals solo fine-tuning after each of {epochs} epochs"))
}

/// Without joint updates the twin is untouched, running statistics included,
/// while the low-precision model does train.
pub fn frozen_teacher(f: &Fixture, seed: u64) -> Outcome {
    let start = pretrained(f, seed, 1)?;
    let mut low = start.clone();
    let mut full = start.clone();
    let cfg = GuidedConfig {
        lambda: 1.0,
        joint: false,
    };
    let r = run_phase(
        &f.ctx(seed),
        &phase(1, "g", 2, 2, true),
        QuantConfig::full(),
        &mut low,
        Some(&mut full),
        cfg,
        &schedule(2, 16),
    )
    .map_err(|e| e.to_string())?;
    same_state(&full, &start).map_err(|d| format!("frozen twin changed: {d}"))?;
    let moved = low
        .params()
        .iter()
        .any(|(n, p)| start.params().get(n).is_some_and(|q| !p.value.bit_eq(&q.value)));
    if !moved {
        return Err("low-precision model did not train".into());
    }
    if r.guidance_trace.is_empty() || r.guidance_trace.iter().any(|g| g.is_nan() || *g < 0.0) {
        return Err("guidance trace empty or negative".into());
    }
    Ok(format!("twin unchanged over {} guided steps", r.guidance_trace.len()))
}

/// Every phase after the first starts from the previous phase's final
/// weights: its pre-training evaluation equals evaluating a snapshot of the
/// previous phase re-quantized to the new bit-widths.
pub fn phases_chain(f: &Fixture, set: StrategySet, target: u32, seed: u64) -> Outcome {
    let mut model = pretrained(f, seed, 1)?;
    let schedule_bits = if set.pq {
        BitSchedule::ladder_to(target)
    } else {
        BitSchedule::direct(target)
    };
    let phases = lowbit::strategies::compose(set, target, Some(&schedule_bits.map_err(|e| e.to_string())?), 32)
        .map_err(|e| e.to_string())?;
    let mut snapshots = Vec::new();
    let results = run_plan(
        &f.ctx(seed),
        &phases,
        QuantConfig::full(),
        &mut model,
        None,
        GuidedConfig::default(),
        &schedule(1, 16),
        0,
        |_, m, _, _| {
            snapshots.push(m.clone());
            Ok(())
        },
    )
    .map_err(|e| e.to_string())?;
    for (i, p) in phases.iter().enumerate().skip(1) {
        let mut prev = snapshots[i - 1].clone();
        let q = prev.quant().with_bits(p.weight_bits, p.act_bits);
        prev.set_quant(q).map_err(|e| e.to_string())?;
        let expect = evaluate(&mut prev, &f.val, 500).map_err(|e| e.to_string())?.top1;
        if expect.to_bits() != results[i].initial_val_acc.to_bits() {
            return Err(format!(
                "phase {} starts at {} but the previous phase gives {expect}",
                p.name, results[i].initial_val_acc
            ));
        }
    }
    Ok(format!("{} phases chained", phases.len()))
}

/// A wildly large learning rate ends in a divergence error naming the phase.
pub fn divergence_is_reported(f: &Fixture, seed: u64) -> Outcome {
    let mut m = Model::new(f.spec.clone(), QuantConfig::full(), seed).map_err(|e| e.to_string())?;
    let mut sched = schedule(3, 16);
    sched.lr.initial = 1e39; // beyond f32, so the first update is infinite
    sched.weight_decay = 0.0;
    match run_pretrain(&f.ctx(seed), &mut m, &sched) {
        Err(Error::Diverged { phase, .. }) if phase == "pretrain" => Ok("diverged as expected".into()),
        Err(e) => Err(format!("unexpected error {e}")),
        Ok(r) => Err(format!(
            "no divergence, final loss {}",
            r.logs.last().unwrap().train_loss
        )),
    }
}

/// Two identical runs give identical logs and parameters.
pub fn runs_are_deterministic(f: &Fixture, seed: u64) -> Outcome {
    let a = pretrained(f, seed, 2)?;
    let b = pretrained(f, seed, 2)?;
    same_state(&a, &b)?;
    let c = pretrained(f, seed + 1, 2)?;
    if same_state(&a, &c).is_ok() {
        return Err("a different seed gave the same model".into());
    }
    Ok("identical".into())
}
