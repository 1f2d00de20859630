//! Central finite-difference gradient oracle for f64 graphs.

#![allow(dead_code)]

use lowbit::autodiff::{Graph, Tensor, Var};
use lowbit::nn::{Mode, Model};
use lowbit::Result;
use rand::seq::index::sample;
use rand::Rng;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Default)]
pub struct Report {
    pub checked: usize,
    /// Coordinates skipped because the loss has a kink within one step.
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl Report {
    fn record(&mut self, what: impl FnOnce() -> String, a: f64, n: f64) {
        let e = rel_err(a, n);
        if self.checked == 0 || e > self.max_rel {
            self.max_rel = e;
            self.worst = format!("{}: analytic {a:e} numeric {n:e}", what());
        }
        self.checked += 1;
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel <= TOL
    }
}

pub type LossFn<'a> = &'a dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn loss_of(inputs: &[Tensor<f64>], f: LossFn) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = f(&mut g, &vars).expect("forward");
    g.value(l).item()
}

/// Compares the backward pass of `f` with central differences on every
/// coordinate of every input.
pub fn check(inputs: &[Tensor<f64>], f: LossFn) -> Report {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let mut report = Report::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut shifted = inputs.to_vec();
            let x = shifted[i].data()[j];
            shifted[i].data_mut()[j] = x + STEP;
            let up = loss_of(&shifted, f);
            shifted[i].data_mut()[j] = x - STEP;
            let down = loss_of(&shifted, f);
            report.record(|| format!("input {i}[{j}]"), a, (up - down) / (2.0 * STEP));
        }
    }
    report
}

/// Cross-entropy of a model on a fixed batch with batch statistics.
pub fn model_loss(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Mode::TrainFrozen, false).expect("forward");
    let l = g.softmax_cross_entropy(out.logits, labels).expect("loss");
    g.value(l).item()
}

/// Checks up to `per_param` random coordinates of every parameter tensor of
/// `model` against central differences of the training loss.
pub fn check_model(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    per_param: usize,
    rng: &mut impl Rng,
) -> Report {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Mode::TrainFrozen, true).expect("forward");
    let l = g.softmax_cross_entropy(out.logits, labels).expect("loss");
    g.backward(l).expect("backward");
    model.collect_grads(&mut g, &out).expect("grads");
    let names: Vec<String> = model.params().keys().cloned().collect();
    let base = model_loss(model, x, labels);
    let mut report = Report::default();
    for name in names {
        let grad = model.params()[&name].grad.clone().expect("gradient");
        let n = grad.numel();
        for j in sample(rng, n, per_param.min(n)) {
            let x0 = model.params()[&name].value.data()[j];
            model.params_mut()[&name].value.data_mut()[j] = x0 + STEP;
            let up = model_loss(model, x, labels);
            model.params_mut()[&name].value.data_mut()[j] = x0 - STEP;
            let down = model_loss(model, x, labels);
            model.params_mut()[&name].value.data_mut()[j] = x0;
            // A clip or max-pool switching inside the step shows up as
            // disagreeing one-sided slopes; such points have no derivative.
            let (fwd, bwd) = ((up - base) / STEP, (base - down) / STEP);
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-1) {
                report.kinks += 1;
                continue;
            }
            report.record(|| format!("{name}[{j}]"), grad.data()[j], (up - down) / (2.0 * STEP));
        }
    }
    report
}
