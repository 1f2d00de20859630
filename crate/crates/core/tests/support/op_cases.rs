//! Gradient-check instances for every graph op and both stock models,
//! shared by the core test suite and the acceptance runner.

#![allow(dead_code)]

use lowbit::autodiff::{BnMode, Graph, Tensor, Var};
use lowbit::nn::{Model, ModelSpec};
use lowbit::quant::QuantConfig;
use lowbit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, Report};

/// Random instances per op and per model.
pub const INSTANCES: u64 = 20;

pub fn rng(i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37 + i)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces an op's output to a scalar with a non-uniform upstream gradient.
fn against_target(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let t = uniform(&mut rng(seed ^ 0xabc), &shape, -1.0, 1.0);
    let t = g.constant(t);
    g.half_mse(out, t)
}

pub fn matmul(i: u64) -> Report {
    let mut r = rng(i);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = uniform(&mut r, &[m, k], -1.0, 1.0);
    let b = uniform(&mut r, &[k, n], -1.0, 1.0);
    gradcheck::check(&[a, b], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        against_target(g, y, i)
    })
}

pub fn linear(i: u64) -> Report {
    let mut r = rng(i);
    let (n, fin, fout) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..5));
    let x = uniform(&mut r, &[n, fin], -1.0, 1.0);
    let w = uniform(&mut r, &[fout, fin], -1.0, 1.0);
    let b = uniform(&mut r, &[fout], -1.0, 1.0);
    let with_bias = i.is_multiple_of(2);
    gradcheck::check(&[x, w, b], &|g, v| {
        let y = g.linear(v[0], v[1], with_bias.then_some(v[2]))?;
        against_target(g, y, i)
    })
}

pub fn conv2d(i: u64) -> Report {
    let mut r = rng(i);
    let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = r.random_range(1..4);
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    let (h, w) = (r.random_range(k..k + 5), r.random_range(k..k + 5));
    let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
    let wt = uniform(&mut r, &[o, c, k, k], -1.0, 1.0);
    gradcheck::check(&[x, wt], &|g, v| {
        let y = g.conv2d(v[0], v[1], stride, pad)?;
        against_target(g, y, i)
    })
}

pub fn elementwise_arithmetic(i: u64) -> Report {
    let mut r = rng(i);
    let shape = [r.random_range(1..4), r.random_range(1..4)];
    let a = uniform(&mut r, &shape, -1.0, 1.0);
    let b = uniform(&mut r, &shape, -1.0, 1.0);
    let s: f64 = r.random_range(-2.0..2.0);
    gradcheck::check(&[a, b], &|g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.mul_scalar(y, s)?;
        let y = g.add_scalar(y, 0.25)?;
        against_target(g, y, i)
    })
}

pub fn relu(i: u64) -> Report {
    let mut r = rng(i);
    let x = away_from(&mut r, &[3, 4], -1.0, 1.0, &[0.0], 1e-3);
    gradcheck::check(&[x], &|g, v| {
        let y = g.relu(v[0])?;
        against_target(g, y, i)
    })
}

pub fn clip01(i: u64) -> Report {
    let mut r = rng(i);
    let x = away_from(&mut r, &[3, 4], -0.5, 1.5, &[0.0, 1.0], 1e-3);
    gradcheck::check(&[x], &|g, v| {
        let y = g.clip01(v[0])?;
        against_target(g, y, i)
    })
}

pub fn batchnorm_train(i: u64) -> Report {
    let mut r = rng(i);
    let c = r.random_range(1..4);
    let shape: Vec<usize> = if i.is_multiple_of(2) {
        vec![r.random_range(2..4), c, 2, 3]
    } else {
        vec![r.random_range(3..6), c]
    };
    let x = uniform(&mut r, &shape, -1.0, 1.0);
    let gamma = uniform(&mut r, &[c], 0.5, 1.5);
    let beta = uniform(&mut r, &[c], -0.5, 0.5);
    gradcheck::check(&[x, gamma, beta], &|g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.out;
        against_target(g, y, i)
    })
}

pub fn batchnorm_eval(i: u64) -> Report {
    let mut r = rng(i);
    let c = r.random_range(1..4);
    let x = uniform(&mut r, &[2, c, 3, 2], -1.0, 1.0);
    let gamma = uniform(&mut r, &[c], 0.5, 1.5);
    let beta = uniform(&mut r, &[c], -0.5, 0.5);
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    gradcheck::check(&[x, gamma, beta], &|g, v| {
        let mode = BnMode::Eval { mean: &mean, var: &var };
        let y = g.batch_norm(v[0], v[1], v[2], mode, 1e-5)?.out;
        against_target(g, y, i)
    })
}

pub fn maxpool2d(i: u64) -> Report {
    let mut r = rng(i);
    let k = r.random_range(1..3);
    let shape = [
        r.random_range(1..3),
        r.random_range(1..3),
        r.random_range(2..6),
        r.random_range(2..6),
    ];
    // distinct values on a coarse lattice keep every window's maximum clear
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|j| j as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut r);
    let x = Tensor::new(shape.to_vec(), vals).unwrap();
    gradcheck::check(&[x], &|g, v| {
        let y = g.maxpool2d(v[0], k)?;
        against_target(g, y, i)
    })
}

pub fn avgpool2d(i: u64) -> Report {
    let mut r = rng(i);
    let k = r.random_range(1..4);
    let x = uniform(&mut r, &[2, 2, k * 2, k * 2 + 1], -1.0, 1.0);
    gradcheck::check(&[x], &|g, v| {
        let y = g.avgpool2d(v[0], k)?;
        against_target(g, y, i)
    })
}

pub fn reshape_and_flatten(i: u64) -> Report {
    let mut r = rng(i);
    let x = uniform(&mut r, &[2, 3, 2], -1.0, 1.0);
    gradcheck::check(&[x], &|g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        let y = g.reshape(y, &[2, 3, 2])?;
        let y = g.flatten(y)?;
        against_target(g, y, i)
    })
}

pub fn scale_layer(i: u64) -> Report {
    let mut r = rng(i);
    let x = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let a = uniform(&mut r, &[1], 0.01, 2.0);
    gradcheck::check(&[x, a], &|g, v| {
        let y = g.scale(v[0], v[1])?;
        against_target(g, y, i)
    })
}

pub fn softmax_cross_entropy(i: u64) -> Report {
    let mut r = rng(i);
    let (n, c) = (r.random_range(1..5), r.random_range(2..7));
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let x = uniform(&mut r, &[n, c], -3.0, 3.0);
    gradcheck::check(&[x], &|g, v| g.softmax_cross_entropy(v[0], &labels))
}

pub fn tanh_normalize(i: u64) -> Report {
    let mut r = rng(i);
    let x = uniform(&mut r, &[3, 4], -2.0, 2.0);
    gradcheck::check(&[x], &|g, v| {
        let y = g.tanh_normalize(v[0])?;
        against_target(g, y, i)
    })
}

pub fn reductions(i: u64) -> Report {
    let mut r = rng(i);
    let a = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3], -1.0, 1.0);
    gradcheck::check(&[a, b], &|g, v| {
        let d = g.half_mse(v[0], v[1])?;
        let s = g.sum(v[0])?;
        let m = g.mean(v[1])?;
        let sm = g.mul_scalar(s, 0.3)?;
        let t = g.add(d, sm)?;
        let mm = g.mul_scalar(m, -0.7)?;
        g.add(t, mm)
    })
}

pub type Case = fn(u64) -> Report;

pub const OPS: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("linear", linear),
    ("conv2d", conv2d),
    ("add/mul_scalar/add_scalar", elementwise_arithmetic),
    ("relu", relu),
    ("clip01", clip01),
    ("batchnorm train", batchnorm_train),
    ("batchnorm eval", batchnorm_eval),
    ("maxpool2d", maxpool2d),
    ("avgpool2d", avgpool2d),
    ("reshape/flatten", reshape_and_flatten),
    ("scale", scale_layer),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("tanh_normalize", tanh_normalize),
    ("half_mse/sum/mean", reductions),
];

/// First failing instance of `reports`, if any.
pub fn first_failure(name: &str, reports: &[Report]) -> Option<String> {
    if (reports.len() as u64) < INSTANCES {
        return Some(format!("{name}: only {} instances", reports.len()));
    }
    reports
        .iter()
        .enumerate()
        .find(|(_, r)| !r.ok())
        .map(|(i, r)| format!("{name} instance {i}: max rel err {:e} at {}", r.max_rel, r.worst))
}

pub fn run_op(name: &str, case: Case) -> Result<usize, String> {
    let reports: Vec<Report> = (0..INSTANCES).map(case).collect();
    match first_failure(name, &reports) {
        Some(f) => Err(f),
        None => Ok(reports.iter().map(|r| r.checked).sum()),
    }
}

fn random_batch(r: &mut impl Rng, shape: [usize; 3], n: usize) -> (Tensor<f64>, Vec<usize>) {
    let [c, h, w] = shape;
    (
        uniform(r, &[n, c, h, w], -1.0, 1.0),
        (0..n).map(|_| r.random_range(0..10)).collect(),
    )
}

/// Checks `INSTANCES` randomly initialized copies of `spec` with quantization
/// disabled. At most 5% of sampled coordinates may be skipped as kinks.
pub fn run_model(spec: ModelSpec, batch: usize) -> Result<usize, String> {
    let spec = spec.without_quantization();
    let mut reports = Vec::new();
    for i in 0..INSTANCES {
        let mut r = rng(1000 + i);
        let mut model = Model::<f32>::new(spec.clone(), QuantConfig::full(), i)
            .unwrap()
            .cast::<f64>();
        let (x, labels) = random_batch(&mut r, spec.input, batch);
        let rep = gradcheck::check_model(&mut model, &x, &labels, 4, &mut r);
        if rep.kinks * 20 > rep.checked {
            return Err(format!(
                "{} instance {i}: {} kinks out of {}",
                spec.name, rep.kinks, rep.checked
            ));
        }
        reports.push(rep);
    }
    match first_failure(&spec.name, &reports) {
        Some(f) => Err(f),
        None => Ok(reports.iter().map(|r| r.checked).sum()),
    }
}

pub fn alexnet_spec() -> ModelSpec {
    ModelSpec::mini_alexnet([1, 12, 12], 10, [3, 4, 5], 6)
}

pub fn resnet_spec() -> ModelSpec {
    ModelSpec::mini_resnet([3, 8, 8], 10, [2, 3, 4])
}
