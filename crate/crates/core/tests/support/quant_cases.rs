//! Quantizer grid sweeps and straight-through backward checks, shared by
//! the core test suite and the acceptance runner. Checks count violations
//! instead of stopping at the first one.

#![allow(dead_code)]

use lowbit::autodiff::{CustomOp, Graph, Tensor};
use lowbit::quant::{
    quantize_activations, quantize_activations_var, quantize_unit, quantize_unit_var, quantize_weights,
    quantize_weights_var, QuantLevels,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, rel_err};

pub type Outcome = Result<String, String>;

pub const GRID: usize = 10_000;

/// `GRID + 1` evenly spaced points on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    (0..=GRID).map(move |i| lo + (hi - lo) * i as f64 / GRID as f64)
}

/// Nearest level by scanning all of them; ties go to the larger level.
pub fn nearest_level(z: f64, bits: u32) -> f64 {
    let levels = QuantLevels::new(bits).unwrap().levels();
    let mut best = levels[0];
    for &l in &levels {
        if (l - z).abs() <= (best - z).abs() {
            best = l;
        }
    }
    best
}

pub fn distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

struct Violations {
    count: usize,
    first: Option<String>,
}

impl Violations {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.count += 1;
            self.first.get_or_insert_with(what);
        }
    }
}

fn monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// Every quantizer invariant over the grid at one bit-width.
pub fn grid_suite(bits: u32) -> Outcome {
    let mut v = Violations { count: 0, first: None };
    let max_levels = 1usize << bits;
    let half_step = 0.5 / ((1u64 << bits) - 1) as f64;

    let unit: Vec<f64> = grid(0.0, 1.0).map(|z| quantize_unit(z, bits).unwrap()).collect();
    for (z, &q) in grid(0.0, 1.0).zip(&unit) {
        let oracle = nearest_level(z, bits);
        v.check((q - oracle).abs() < 1e-12, || {
            format!("z={z}: {q}, nearest level {oracle}")
        });
        v.check((q - z).abs() <= half_step + 1e-12, || {
            format!("z={z}: {q} is more than half a step away")
        });
        v.check(quantize_unit(q, bits).unwrap() == q, || {
            format!("z={z}: not idempotent")
        });
    }
    v.check(monotone(&unit), || "unit quantizer not monotone".into());
    v.check(
        distinct(&unit) == QuantLevels::new(bits).unwrap().count() as usize,
        || format!("{} distinct outputs", distinct(&unit)),
    );
    v.check(distinct(&unit) <= max_levels, || "too many levels".into());

    let w: Vec<f64> = grid(-3.0, 3.0).collect();
    let qw = quantize_weights(&Tensor::new(vec![w.len()], w).unwrap(), bits, true).unwrap();
    let qw = qw.data();
    v.check(qw.iter().all(|x| (-1.0..=1.0).contains(x)), || {
        "weight outside [-1, 1]".into()
    });
    v.check(distinct(qw) <= max_levels, || format!("{} weight levels", distinct(qw)));
    v.check(monotone(qw), || "weight quantizer not monotone".into());
    let again = quantize_weights(&Tensor::new(vec![qw.len()], qw.to_vec()).unwrap(), bits, true).unwrap();
    v.check(distinct(again.data()) <= max_levels, || {
        "requantized weights gained levels".into()
    });

    let x: Vec<f64> = grid(-0.5, 1.5).collect();
    let qa = quantize_activations(&Tensor::new(vec![x.len()], x).unwrap(), bits).unwrap();
    let qa = qa.data();
    v.check(qa.iter().all(|x| (0.0..=1.0).contains(x)), || {
        "activation outside [0, 1]".into()
    });
    v.check(distinct(qa) <= max_levels, || {
        format!("{} activation levels", distinct(qa))
    });
    v.check(monotone(qa), || "activation quantizer not monotone".into());
    let again = quantize_activations(&Tensor::new(vec![qa.len()], qa.to_vec()).unwrap(), bits).unwrap();
    v.check(again.data() == qa, || "activation quantizer not idempotent".into());

    match v.first {
        None => Ok(format!("k={bits}: 0 violations over {} grid points", GRID + 1)),
        Some(first) => Err(format!("k={bits}: {} violations, first: {first}", v.count)),
    }
}

/// `Σ a ⊙ b` with gradients `b` and `a`.
pub struct Dot;

impl CustomOp<f64> for Dot {
    fn name(&self) -> &str {
        "dot"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> lowbit::Result<Tensor<f64>> {
        let s = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| a * b).sum();
        Ok(Tensor::scalar(s))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        upstream: &Tensor<f64>,
    ) -> lowbit::Result<Vec<Option<Tensor<f64>>>> {
        let s = upstream.item();
        Ok(vec![Some(inputs[1].map(|v| v * s)), Some(inputs[0].map(|v| v * s))])
    }
}

/// The rounding step passes an arbitrary upstream gradient through
/// unchanged, compared with `==`.
pub fn ste_identity() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for bits in [1, 2, 4, 8] {
        let x: Vec<f64> = (0..32).map(|_| r.random_range(0.0..1.0)).collect();
        let up: Vec<f64> = (0..32).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(Tensor::new(vec![32], x).unwrap());
        let q = quantize_unit_var(&mut g, xv, bits).map_err(|e| e.to_string())?;
        let uv = g.constant(Tensor::new(vec![32], up.clone()).unwrap());
        let loss = g.custom(Box::new(Dot), &[q, uv]).map_err(|e| e.to_string())?;
        g.backward(loss).map_err(|e| e.to_string())?;
        let grad = g.grad(xv).ok_or("no gradient")?;
        if grad.data() != up.as_slice() {
            return Err(format!("k={bits}: upstream {up:?} came back as {:?}", grad.data()));
        }
    }
    Ok("upstream gradient returned unchanged for k in {1, 2, 4, 8}".into())
}

/// The activation quantizer zeroes the gradient outside `[0, 1]` and passes
/// it through inside.
pub fn clip_mask() -> Outcome {
    let x = vec![-0.3, -1e-9, 0.0, 0.2, 0.9, 1.0, 1.0 + 1e-9, 1.7];
    let up = vec![0.5, -2.0, 1.5, 0.25, -0.75, 3.0, 4.0, -1.0];
    let expect = [0.0, 0.0, 1.5, 0.25, -0.75, 3.0, 0.0, 0.0];
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::new(vec![x.len()], x).unwrap());
    let q = quantize_activations_var(&mut g, xv, 2).map_err(|e| e.to_string())?;
    let uv = g.constant(Tensor::new(vec![up.len()], up).unwrap());
    let loss = g.custom(Box::new(Dot), &[q, uv]).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let grad = g.grad(xv).ok_or("no gradient")?;
    if grad.data() != expect {
        return Err(format!("mask gave {:?}, expected {expect:?}", grad.data()));
    }
    Ok("gradient zero exactly outside [0, 1]".into())
}

/// `Σ u ⊙ tanh(W)/max|tanh W|`: the weight quantizer with rounding taken
/// out, written directly.
pub fn surrogate(w: &[f64], u: &[f64]) -> f64 {
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.tanh().abs()));
    w.iter().zip(u).map(|(v, u)| u * v.tanh() / peak).sum()
}

pub fn ste_weight_grad(w: &[f64], u: &[f64], bits: u32) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let wv = g.leaf(Tensor::new(vec![w.len()], w.to_vec()).unwrap());
    let q = quantize_weights_var(&mut g, wv, bits, true).unwrap();
    let uv = g.constant(Tensor::new(vec![u.len()], u.to_vec()).unwrap());
    let scaled = g.custom(Box::new(Dot), &[q, uv]).unwrap();
    g.backward(scaled).unwrap();
    g.grad(wv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; w.len()])
}

/// Worst relative error between the weight quantizer's backward and central
/// differences of [`surrogate`].
pub fn surrogate_error(w: &[f64], u: &[f64], bits: u32) -> f64 {
    let analytic = ste_weight_grad(w, u, bits);
    (0..w.len())
        .map(|j| {
            let mut up = w.to_vec();
            up[j] += gradcheck::STEP;
            let mut down = w.to_vec();
            down[j] -= gradcheck::STEP;
            let numeric = (surrogate(&up, u) - surrogate(&down, u)) / (2.0 * gradcheck::STEP);
            rel_err(analytic[j], numeric)
        })
        .fold(0.0, f64::max)
}

/// The single-weight example plus `instances` random tensors.
pub fn surrogate_fd(instances: usize) -> Outcome {
    let mut worst = 0.0f64;
    for bits in [1, 2, 8] {
        worst = worst.max(surrogate_error(&[0.3], &[1.0], bits));
    }
    let mut r = ChaCha8Rng::seed_from_u64(17);
    for i in 0..instances {
        let n = r.random_range(2..10);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        worst = worst.max(surrogate_error(&w, &u, [1, 2, 4, 8][i % 4]));
    }
    if worst <= gradcheck::TOL {
        Ok(format!(
            "worst relative error {worst:.2e} over {} tensors",
            instances + 1
        ))
    } else {
        Err(format!("relative error {worst:.2e} exceeds {:e}", gradcheck::TOL))
    }
}
