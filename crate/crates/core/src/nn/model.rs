use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerKind, ModelSpec, ParamKind, ParamShape};
use crate::autodiff::{BnMode, Element, Graph, Param, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::{self, QuantConfig, FULL_PRECISION, SCALAR_LAYER_INIT};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch norm behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// Effective bit-widths of one layer after applying the quantization config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerBits {
    pub weight: u32,
    /// Output activation (for `Clip` layers and residual block outputs).
    pub act: u32,
    /// Activation inside a residual block.
    pub inner_act: u32,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug)]
pub struct ForwardOut {
    pub logits: Var,
    /// Guidance taps in declaration order.
    pub taps: IndexMap<String, Var>,
    bound: Vec<(String, Var)>,
}

/// A network instance: spec, quantization config, parameters and buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    quant: QuantConfig,
    bits: Vec<LayerBits>,
    params: IndexMap<String, Param<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

fn resolve_bits(spec: &ModelSpec, qc: &QuantConfig) -> Vec<LayerBits> {
    let keep = !qc.quantize_first_last;
    let first = spec.first_conv();
    let last = spec.last_fc();
    let last_in = spec.last_fc_input_activation();
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w_fp = !l.quantize_weights || (keep && (Some(i) == first || Some(i) == last));
            let a_fp = !l.quantize_acts || (keep && Some(i) == last_in);
            LayerBits {
                weight: if w_fp { FULL_PRECISION } else { qc.weight_bits },
                act: if a_fp { FULL_PRECISION } else { qc.act_bits },
                inner_act: if l.quantize_acts { qc.act_bits } else { FULL_PRECISION },
            }
        })
        .collect()
}

fn quantized(spec: &ModelSpec, bits: &[LayerBits]) -> bool {
    spec.layers.iter().zip(bits).any(|(l, b)| {
        let w = l.has_weights() && b.weight < FULL_PRECISION;
        let a = match l.kind {
            LayerKind::Clip => b.act < FULL_PRECISION,
            LayerKind::Residual { .. } => b.act < FULL_PRECISION || b.inner_act < FULL_PRECISION,
            _ => false,
        };
        w || a
    })
}

impl<T: Element> Model<T> {
    /// Builds a model with He-normal weights drawn from a generator seeded by
    /// `seed`. BN scale/shift start at 1/0, running moments at 0/1, and the
    /// scalar layer (present only when something is quantized) at 0.01.
    pub fn new(spec: ModelSpec, quant: QuantConfig, seed: u64) -> Result<Self> {
        quant.validate()?;
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for ParamShape { name, shape, kind } in shapes {
            let numel: usize = shape.iter().product();
            let value = match kind {
                ParamKind::Weight { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::Spec(format!("{name}: {e}")))?;
                    let data = (0..numel).map(|_| T::of(normal.sample(&mut rng))).collect();
                    Tensor::new(shape, data)?
                }
                ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => Tensor::zeros(shape),
                ParamKind::BnScale | ParamKind::RunningVar => Tensor::full(shape, T::one()),
                ParamKind::Alpha => Tensor::full(shape, T::of(SCALAR_LAYER_INIT)),
            };
            if kind.is_buffer() {
                buffers.insert(name, value);
            } else {
                let decay = matches!(kind, ParamKind::Weight { .. });
                params.insert(name, Param::new(value, decay));
            }
        }
        let mut model = Model {
            bits: resolve_bits(&spec, &quant),
            spec,
            quant,
            params,
            buffers,
        };
        model.sync_scalar();
        Ok(model)
    }

    /// Switches bit-widths, adding the scalar layer (at its initial value) or
    /// removing it as the model becomes quantized or full precision.
    pub fn set_quant(&mut self, quant: QuantConfig) -> Result<()> {
        quant.validate()?;
        self.bits = resolve_bits(&self.spec, &quant);
        self.quant = quant;
        self.sync_scalar();
        Ok(())
    }

    fn scalar_name(&self) -> Option<String> {
        self.spec
            .layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Scalar))
            .map(|l| format!("{}.alpha", l.name))
    }

    fn sync_scalar(&mut self) {
        let Some(name) = self.scalar_name() else { return };
        if self.is_quantized() {
            if !self.params.contains_key(&name) {
                let alpha = Tensor::full([1], T::of(SCALAR_LAYER_INIT));
                self.params.insert(name, Param::new(alpha, false));
            }
        } else {
            self.params.shift_remove(&name);
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn layer_bits(&self) -> &[LayerBits] {
        &self.bits
    }

    /// Effective activation bit-width at each guidance tap.
    pub fn tap_bits(&self) -> IndexMap<String, u32> {
        self.spec
            .layers
            .iter()
            .zip(&self.bits)
            .filter_map(|(l, b)| l.tap.clone().map(|t| (t, b.act)))
            .collect()
    }

    /// True when any weight or activation is actually quantized.
    pub fn is_quantized(&self) -> bool {
        quantized(&self.spec, &self.bits)
    }

    pub fn params(&self) -> &IndexMap<String, Param<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Param<T>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Same model in another element type (used for f64 gradient checks).
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            quant: self.quant,
            bits: self.bits.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.value.cast(), p.decay)))
                .collect(),
            buffers: self.buffers.iter().map(|(k, b)| (k.clone(), b.cast())).collect(),
        }
    }

    /// Replaces parameter and buffer values from another model with the same
    /// spec. Parameters missing from `other` (such as a scalar layer that a
    /// full-precision source lacks) keep their current values.
    pub fn load_weights_from(&mut self, other: &Model<T>) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::Spec(format!(
                "cannot load weights of `{}` into `{}`",
                other.spec.name, self.spec.name
            )));
        }
        for (name, p) in &mut self.params {
            if let Some(src) = other.params.get(name) {
                p.value = src.value.clone();
                p.grad = None;
            }
        }
        for (name, b) in &mut self.buffers {
            *b = other.buffers[name].clone();
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph<T>, name: &str, trainable: bool, bound: &mut Vec<(String, Var)>) -> Result<Var> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Spec(format!("missing parameter `{name}`")))?;
        if trainable {
            let v = g.leaf(p.value.clone());
            bound.push((name.to_string(), v));
            Ok(v)
        } else {
            Ok(g.constant(p.value.clone()))
        }
    }

    fn weight(
        &self,
        g: &mut Graph<T>,
        name: &str,
        bits: u32,
        trainable: bool,
        bound: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let w = self.bind(g, name, trainable, bound)?;
        quant::quantize_weights_var(g, w, bits, self.quant.weight_affine_map)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        prefix: &str,
        mode: Mode,
        trainable: bool,
        bound: &mut Vec<(String, Var)>,
    ) -> Result<Var> {
        let gamma = self.bind(g, &format!("{prefix}.scale"), trainable, bound)?;
        let beta = self.bind(g, &format!("{prefix}.shift"), trainable, bound)?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let eps = T::of(BN_EPS);
        if mode == Mode::Eval {
            let out = g.batch_norm(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    mean: self.buffers[&mean_key].data(),
                    var: self.buffers[&var_key].data(),
                },
                eps,
            )?;
            return Ok(out.out);
        }
        let out = g.batch_norm(x, gamma, beta, BnMode::Train, eps)?;
        if mode == Mode::Train {
            let m = T::of(BN_MOMENTUM);
            let keep = T::one() - m;
            for (key, batch) in [(&mean_key, out.batch_mean.as_ref()), (&var_key, out.batch_var.as_ref())] {
                let batch = batch.expect("train mode yields moments");
                for (r, &b) in self.buffers[key].data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(out.out)
    }

    fn activation(g: &mut Graph<T>, x: Var, bits: u32) -> Result<Var> {
        if bits == FULL_PRECISION {
            g.clip01(x)
        } else {
            quant::quantize_activations_var(g, x, bits)
        }
    }

    /// Records the network on `g`. With `trainable`, parameters become
    /// gradient leaves; otherwise they enter as constants.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode, trainable: bool) -> Result<ForwardOut> {
        let [c, h, w] = self.spec.input;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(Error::shape(
                "model_input",
                format!("{} expects (n, {c}, {h}, {w}), got {xs:?}", self.spec.name),
            ));
        }
        let mut bound = Vec::new();
        let mut taps = IndexMap::new();
        let mut cur = x;
        let layers = self.spec.layers.clone();
        let quantized = self.is_quantized();
        for (l, bits) in layers.iter().zip(self.bits.clone()) {
            let name = &l.name;
            cur = match l.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let w = self.weight(g, &format!("{name}.weight"), bits.weight, trainable, &mut bound)?;
                    g.conv2d(cur, w, stride, pad)?
                }
                LayerKind::Fc { bias, .. } => {
                    let w = self.weight(g, &format!("{name}.weight"), bits.weight, trainable, &mut bound)?;
                    let b = if bias {
                        Some(self.bind(g, &format!("{name}.bias"), trainable, &mut bound)?)
                    } else {
                        None
                    };
                    g.linear(cur, w, b)?
                }
                LayerKind::BatchNorm => self.batch_norm(g, cur, name, mode, trainable, &mut bound)?,
                LayerKind::Clip => Self::activation(g, cur, bits.act)?,
                LayerKind::MaxPool { window } => g.maxpool2d(cur, window)?,
                LayerKind::GlobalAvgPool => {
                    let k = g.shape(cur)[2];
                    g.avgpool2d(cur, k)?
                }
                LayerKind::Flatten => g.flatten(cur)?,
                LayerKind::Residual { stride, .. } => {
                    let w1 = self.weight(g, &format!("{name}.conv1.weight"), bits.weight, trainable, &mut bound)?;
                    let y = g.conv2d(cur, w1, stride, 1)?;
                    let y = self.batch_norm(g, y, &format!("{name}.bn1"), mode, trainable, &mut bound)?;
                    let y = Self::activation(g, y, bits.inner_act)?;
                    let w2 = self.weight(g, &format!("{name}.conv2.weight"), bits.weight, trainable, &mut bound)?;
                    let y = g.conv2d(y, w2, 1, 1)?;
                    let y = self.batch_norm(g, y, &format!("{name}.bn2"), mode, trainable, &mut bound)?;
                    let proj = format!("{name}.proj.weight");
                    let shortcut = if self.params.contains_key(&proj) {
                        let wp = self.weight(g, &proj, bits.weight, trainable, &mut bound)?;
                        let s = g.conv2d(cur, wp, stride, 0)?;
                        self.batch_norm(g, s, &format!("{name}.proj_bn"), mode, trainable, &mut bound)?
                    } else {
                        cur
                    };
                    let sum = g.add(y, shortcut)?;
                    Self::activation(g, sum, bits.act)?
                }
                LayerKind::Scalar => {
                    if quantized {
                        let alpha = self.bind(g, &format!("{name}.alpha"), trainable, &mut bound)?;
                        quant::scalar_layer(g, cur, alpha)?
                    } else {
                        cur
                    }
                }
            };
            if let Some(tap) = &l.tap {
                taps.insert(tap.clone(), cur);
            }
        }
        Ok(ForwardOut {
            logits: cur,
            taps,
            bound,
        })
    }

    /// Moves the gradients of a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, g: &mut Graph<T>, out: &ForwardOut) -> Result<()> {
        for (name, v) in &out.bound {
            let grad = g.take_grad(*v).ok_or_else(|| Error::MissingGrad(name.clone()))?;
            self.params[name].grad = Some(grad);
        }
        Ok(())
    }

    /// Eval-mode logits for a batch `(n, c, h, w)`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, Mode::Eval, false)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn param_iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), p))
    }
}
