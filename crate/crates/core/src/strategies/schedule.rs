use serde::{Deserialize, Serialize};

use crate::autodiff::SgdConfig;
use crate::error::{Error, Result};
use crate::quant::FULL_PRECISION;

/// Strictly decreasing bit-width ladder starting at 32.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct BitSchedule(Vec<u32>);

impl BitSchedule {
    pub fn new(bits: Vec<u32>) -> Result<Self> {
        if bits.len() < 2 {
            return Err(Error::Schedule(format!(
                "{bits:?}: need 32 and at least one lower width"
            )));
        }
        if bits[0] != FULL_PRECISION {
            return Err(Error::Schedule(format!("{bits:?}: must start at 32")));
        }
        if let Some(w) = bits.windows(2).find(|w| w[1] >= w[0]) {
            return Err(Error::Schedule(format!(
                "{bits:?}: {} does not drop below {}",
                w[1], w[0]
            )));
        }
        if bits.last() == Some(&0) {
            return Err(Error::Schedule(format!("{bits:?}: zero bits")));
        }
        Ok(BitSchedule(bits))
    }

    /// `{32, 8, 4, 2}` truncated at `target`, always ending with `target`.
    pub fn ladder_to(target: u32) -> Result<Self> {
        let mut bits = vec![FULL_PRECISION];
        bits.extend([8, 4, 2].into_iter().filter(|&b| b > target));
        bits.push(target);
        Self::new(bits)
    }

    /// `{32, k}`: a single direct quantization step.
    pub fn direct(target: u32) -> Result<Self> {
        Self::new(vec![FULL_PRECISION, target])
    }

    pub fn bits(&self) -> &[u32] {
        &self.0
    }

    /// The quantized rungs `b_2..b_n`.
    pub fn rungs(&self) -> &[u32] {
        &self.0[1..]
    }

    pub fn target(&self) -> u32 {
        *self.0.last().expect("validated nonempty")
    }
}

impl TryFrom<Vec<u32>> for BitSchedule {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BitSchedule> for Vec<u32> {
    fn from(s: BitSchedule) -> Self {
        s.0
    }
}

/// Step decay: `initial / factor^(epoch / period)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub period: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.period).unwrap_or(0);
        self.initial / self.factor.powi(drops as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl TrainSchedule {
    /// Full-precision pretraining: LR 0.01, divided by 10 every 10 epochs.
    pub fn pretrain() -> Self {
        TrainSchedule {
            epochs: 15,
            batch_size: 64,
            lr: LrSchedule {
                initial: 0.01,
                factor: 10.0,
                period: 10,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
        }
    }

    /// Quantized fine-tuning: LR 0.001, divided by 10 every 10 epochs.
    pub fn quantized() -> Self {
        TrainSchedule {
            lr: LrSchedule {
                initial: 0.001,
                ..Self::pretrain().lr
            },
            ..Self::pretrain()
        }
    }

    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Schedule("batch size must be positive".into()));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.factor > 0.0) {
            return Err(Error::Schedule(format!(
                "learning rate {} and decay factor {} must be positive",
                self.lr.initial, self.lr.factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Schedule(
                "momentum must lie in [0, 1) and weight decay be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn sgd(&self, epoch: usize) -> SgdConfig {
        SgdConfig {
            lr: self.lr.at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }
}

/// Settings of guided training with a full-precision twin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedConfig {
    /// Weight of the guidance loss in both objectives.
    pub lambda: f64,
    /// Also update the full-precision twin; when false it stays frozen.
    pub joint: bool,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        GuidedConfig {
            lambda: 1.0,
            joint: true,
        }
    }
}

impl GuidedConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda {} must be a finite nonnegative number",
                self.lambda
            )));
        }
        Ok(())
    }
}
