//! WebAssembly bindings for the quantizer demo page in `www/`.
//!
//! Every export takes plain numbers and returns a flat array so the page
//! needs no glue beyond what `wasm-bindgen --target web` generates.

use lowbit::autodiff::{Graph, Tensor};
use lowbit::quant::{quantize_activations, quantize_activations_var, quantize_weights, QuantLevels};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn tensor(v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v).expect("1-d shape matches its data")
}

fn js_err(e: lowbit::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `n` evenly spaced inputs on `[lo, hi]`.
#[wasm_bindgen]
pub fn inputs(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    grid(lo, hi, n)
}

/// Activation quantizer output at each of [`inputs`]`(lo, hi, n)`.
#[wasm_bindgen]
pub fn staircase(bits: u32, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let q = quantize_activations(&tensor(grid(lo, hi, n)), bits).map_err(js_err)?;
    Ok(q.data().to_vec())
}

/// Gradient reaching each input of the activation quantizer when the
/// upstream gradient is one everywhere: one inside `[0, 1]`, zero outside.
#[wasm_bindgen]
pub fn ste_mask(bits: u32, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(tensor(grid(lo, hi, n)));
    let q = quantize_activations_var(&mut g, x, bits).map_err(js_err)?;
    let s = g.sum(q).map_err(js_err)?;
    g.backward(s).map_err(js_err)?;
    Ok(g.grad(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; n.max(2)]))
}

/// Output levels of the weight quantizer, ascending.
#[wasm_bindgen]
pub fn weight_levels(bits: u32, affine: bool) -> Result<Vec<f64>, JsError> {
    let levels = QuantLevels::new(bits).map_err(js_err)?.levels();
    Ok(if affine {
        levels.iter().map(|l| 2.0 * l - 1.0).collect()
    } else {
        levels
    })
}

/// Quantizes `n` weights drawn from N(0, std²) and counts how many land on
/// each of [`weight_levels`].
#[wasm_bindgen]
pub fn weight_histogram(bits: u32, n: usize, std: f64, seed: u64, affine: bool) -> Result<Vec<u32>, JsError> {
    if !(1..=16).contains(&bits) {
        return Err(JsError::new("histogram needs 1 to 16 bits"));
    }
    let normal = Normal::new(0.0, std).map_err(|e| JsError::new(&e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let q = quantize_weights(&tensor(w), bits, affine).map_err(js_err)?;
    let steps = ((1u64 << bits) - 1) as f64;
    let mut counts = vec![0u32; 1 << bits];
    for v in q.data() {
        let unit = if affine { (v + 1.0) / 2.0 } else { *v };
        counts[(unit * steps).round() as usize] += 1;
    }
    Ok(counts)
}
