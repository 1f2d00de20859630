//! k-bit quantizers for weights and activations, with straight-through
//! gradients, and the trainable output scalar used by quantized models.
//!
//! A bit-width of 32 is the full-precision sentinel: no quantization node is
//! recorded at all, so the full-precision path is bit-identical to a model
//! that was never quantized.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const FULL_PRECISION: u32 = 32;

/// Initial value of the scalar output layer.
pub const SCALAR_LAYER_INIT: f64 = 0.01;

/// Bit-widths for one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// When false, the first convolution and the last fully-connected layer
    /// (weights and input activations) stay full precision.
    pub quantize_first_last: bool,
    /// Map quantized weights from `[0, 1]` to `[-1, 1]` via `2q - 1`.
    pub weight_affine_map: bool,
}

impl QuantConfig {
    pub fn full() -> Self {
        Self::new(FULL_PRECISION, FULL_PRECISION)
    }

    pub fn new(weight_bits: u32, act_bits: u32) -> Self {
        QuantConfig {
            weight_bits,
            act_bits,
            quantize_first_last: true,
            weight_affine_map: true,
        }
    }

    pub fn uniform(bits: u32) -> Self {
        Self::new(bits, bits)
    }

    pub fn with_bits(self, weight_bits: u32, act_bits: u32) -> Self {
        QuantConfig {
            weight_bits,
            act_bits,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.weight_bits)?;
        check_bits(self.act_bits)
    }

    pub fn is_full_precision(&self) -> bool {
        self.weight_bits == FULL_PRECISION && self.act_bits == FULL_PRECISION
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::full()
    }
}

fn check_bits(k: u32) -> Result<()> {
    if (1..=FULL_PRECISION).contains(&k) {
        Ok(())
    } else {
        Err(Error::BitWidth(k))
    }
}

/// The level set `{ i / (2^k - 1) : i = 0 .. 2^k - 1 }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantLevels {
    bits: u32,
}

impl QuantLevels {
    pub fn new(bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(QuantLevels { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// `2^k - 1`, the number of steps between 0 and 1.
    pub fn steps(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    pub fn count(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn level(&self, i: u64) -> f64 {
        i as f64 / self.steps()
    }

    /// All levels in ascending order. Only sensible for small `k`.
    pub fn levels(&self) -> Vec<f64> {
        (0..self.count()).map(|i| self.level(i)).collect()
    }

    /// Distance between neighbouring levels.
    pub fn step_size(&self) -> f64 {
        1.0 / self.steps()
    }
}

#[inline]
fn round_to_levels<T: Element>(z: T, bits: u32) -> T {
    let steps = T::of(((1u64 << bits) - 1) as f64);
    // `round` breaks ties away from zero.
    (steps * z).round() / steps
}

/// Rounds `z ∈ [0, 1]` to the nearest k-bit level.
pub fn quantize_unit<T: Element>(z: T, bits: u32) -> Result<T> {
    check_bits(bits)?;
    if !(z >= T::zero() && z <= T::one()) {
        return Err(Error::OutOfUnitRange { value: z.as_f64() });
    }
    if bits == FULL_PRECISION {
        return Ok(z);
    }
    Ok(round_to_levels(z, bits))
}

/// Graph op for [`quantize_unit`] whose backward is the straight-through
/// estimator: the upstream gradient passes unchanged.
#[derive(Clone, Copy, Debug)]
pub struct QuantizeUnitOp {
    pub bits: u32,
}

impl<T: Element> CustomOp<T> for QuantizeUnitOp {
    fn name(&self) -> &str {
        "quantize_unit"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let [x] = inputs else {
            return Err(Error::shape(
                "quantize_unit",
                format!("expected 1 input, got {}", inputs.len()),
            ));
        };
        let mut out = Vec::with_capacity(x.numel());
        for &z in x.data() {
            out.push(quantize_unit(z, self.bits)?);
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(upstream.clone())])
    }
}

/// Records `quantize_unit` on the graph. `bits = 32` records nothing.
pub fn quantize_unit_var<T: Element>(g: &mut Graph<T>, x: Var, bits: u32) -> Result<Var> {
    check_bits(bits)?;
    if bits == FULL_PRECISION {
        return Ok(x);
    }
    g.custom(Box::new(QuantizeUnitOp { bits }), &[x])
}

/// k-bit weight quantization of one tensor (one normalization group):
/// `q = quantize_unit(tanh(W) / (2·max|tanh(W)|) + 1/2)`, returned as
/// `2q − 1` when `affine` is set. An all-zero tensor maps to all zeros.
pub fn quantize_weights_var<T: Element>(g: &mut Graph<T>, w: Var, bits: u32, affine: bool) -> Result<Var> {
    check_bits(bits)?;
    if bits == FULL_PRECISION {
        return Ok(w);
    }
    let normalized = g.tanh_normalize(w)?;
    if g.value(w).data().iter().all(|v| v.tanh() == T::zero()) {
        return g.mul_scalar(w, T::zero());
    }
    let q = quantize_unit_var(g, normalized, bits)?;
    if affine {
        let doubled = g.mul_scalar(q, T::of(2.0))?;
        g.add_scalar(doubled, -T::one())
    } else {
        Ok(q)
    }
}

/// k-bit activation quantization: `quantize_unit(clip(x, 0, 1))`.
/// `bits = 32` is the identity.
pub fn quantize_activations_var<T: Element>(g: &mut Graph<T>, x: Var, bits: u32) -> Result<Var> {
    check_bits(bits)?;
    if bits == FULL_PRECISION {
        return Ok(x);
    }
    let clipped = g.clip01(x)?;
    quantize_unit_var(g, clipped, bits)
}

/// Trainable scalar multiplier placed after the last fully-connected layer.
pub fn scalar_layer<T: Element>(g: &mut Graph<T>, x: Var, alpha: Var) -> Result<Var> {
    g.scale(x, alpha)
}

/// Eager weight quantization of a plain tensor.
pub fn quantize_weights<T: Element>(w: &Tensor<T>, bits: u32, affine: bool) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(w.clone());
    let q = quantize_weights_var(&mut g, v, bits, affine)?;
    Ok(g.value(q).clone())
}

/// Eager activation quantization of a plain tensor.
pub fn quantize_activations<T: Element>(x: &Tensor<T>, bits: u32) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let q = quantize_activations_var(&mut g, v, bits)?;
    Ok(g.value(q).clone())
}
