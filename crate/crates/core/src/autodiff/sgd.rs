use indexmap::IndexMap;

use super::tensor::{Element, Param, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }
}

/// SGD with (Nesterov) momentum and L2 decay folded into the gradient.
///
/// Per parameter: `g ← ∇ + λ·w` (decayed parameters only),
/// `v ← μ·v + g`, then `w ← w − lr·(g + μ·v)` with Nesterov or
/// `w ← w − lr·v` without.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    momentum: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            momentum: IndexMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn momentum_buffers(&self) -> &IndexMap<String, Tensor<T>> {
        &self.momentum
    }

    pub fn set_momentum_buffer(&mut self, name: impl Into<String>, buf: Tensor<T>) {
        self.momentum.insert(name.into(), buf);
    }

    /// Applies one update to every parameter. Every parameter must carry a
    /// gradient; gradients are cleared afterwards.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Param<T>)>,
    {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        let lr = T::of(self.config.lr);
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for (name, param) in params {
            let grad = param.grad.take().expect("checked above");
            if grad.shape() != param.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!(
                        "{name}: gradient {:?} vs parameter {:?}",
                        grad.shape(),
                        param.value.shape()
                    ),
                ));
            }
            let decay = param.decay && self.config.weight_decay != 0.0;
            let buf = self
                .momentum
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
            if buf.shape() != param.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!(
                        "{name}: momentum buffer {:?} vs parameter {:?}",
                        buf.shape(),
                        param.value.shape()
                    ),
                ));
            }
            let w = param.value.data_mut();
            let v = buf.data_mut();
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                let g = if decay { gi + wd * *wi } else { gi };
                let step = if self.config.momentum == 0.0 {
                    g
                } else {
                    *vi = mu * *vi + g;
                    if self.config.nesterov {
                        g + mu * *vi
                    } else {
                        *vi
                    }
                };
                *wi = *wi - lr * step;
            }
        }
        Ok(())
    }
}
