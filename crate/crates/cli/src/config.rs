//! Experiment configuration: a flat `key = value` file, overridable from the
//! command line, echoed back with every default filled in.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lowbit::data::{AugmentConfig, DatasetKind};
use lowbit::nn::ModelSpec;
use lowbit::quant::QuantConfig;
use lowbit::strategies::{compose, BitSchedule, GuidedConfig, LrSchedule, Phase, StrategySet, TrainSchedule};

use crate::error::{CliError, Result};

/// Environment variable naming the dataset root when `--data-dir` is absent.
pub const DATA_DIR_ENV: &str = "LOWBIT_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    MiniAlexnet,
    MiniResnet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MiniAlexnet => "mini-alexnet",
            ModelKind::MiniResnet => "mini-resnet",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mini-alexnet" | "alexnet" => Ok(ModelKind::MiniAlexnet),
            "mini-resnet" | "resnet" => Ok(ModelKind::MiniResnet),
            other => Err(format!(
                "unknown model `{other}` (expected mini-alexnet or mini-resnet)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub model: ModelKind,
    /// Channel widths of the three convolutional stages.
    pub widths: [usize; 3],
    /// Hidden fully-connected width (mini-alexnet only).
    pub hidden: usize,
    pub strategy: StrategySet,
    pub bits: u32,
    /// `None` resolves to the ladder implied by the strategy.
    pub schedule: Option<BitSchedule>,
    pub quantize_first_last: bool,
    pub weight_affine_map: bool,
    pub stage1_act_bits: u32,
    pub lambda: f64,
    pub joint: bool,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub lr_factor: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_lr_period: usize,
    pub quant_epochs: usize,
    pub quant_lr: f64,
    pub quant_lr_period: usize,
    /// `None` uses the dataset's default.
    pub augment: Option<bool>,
    /// Leading training samples to use; 0 keeps all.
    pub train_subset: usize,
    /// Leading test samples to evaluate on; 0 keeps all.
    pub val_subset: usize,
    pub eval_batch: usize,
    pub prefetch: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub data_dir: PathBuf,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pre = TrainSchedule::pretrain();
        let quant = TrainSchedule::quantized();
        let guided = GuidedConfig::default();
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            model: ModelKind::MiniAlexnet,
            widths: [8, 16, 32],
            hidden: 64,
            strategy: StrategySet::default(),
            bits: 4,
            schedule: None,
            quantize_first_last: true,
            weight_affine_map: true,
            stage1_act_bits: 32,
            lambda: guided.lambda,
            joint: guided.joint,
            batch_size: pre.batch_size,
            momentum: pre.momentum,
            weight_decay: pre.weight_decay,
            nesterov: pre.nesterov,
            lr_factor: pre.lr.factor,
            pretrain_epochs: pre.epochs,
            pretrain_lr: pre.lr.initial,
            pretrain_lr_period: pre.lr.period,
            quant_epochs: quant.epochs,
            quant_lr: quant.lr.initial,
            quant_lr_period: quant.lr.period,
            augment: None,
            train_subset: 0,
            val_subset: 0,
            eval_batch: 500,
            prefetch: 2,
            seed: 0,
            deterministic: false,
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{value}`")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u64>, String> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Reads a config file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config {
                origin: format!("{origin}:{}", n + 1),
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let err = |msg: String| CliError::Config {
            origin: "override".into(),
            msg,
        };
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| err(format!("expected KEY=VALUE, got `{kv}`")))?;
        self.set(key.trim(), value.trim()).map_err(err)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "dataset" => self.dataset = value.parse().map_err(|e: lowbit::Error| e.to_string())?,
            "model" => self.model = value.parse()?,
            "widths" => {
                let w = parse_list(key, value)?;
                let [a, b, c] = w[..] else {
                    return Err(format!("`widths` needs three values, got {}", w.len()));
                };
                self.widths = [a as usize, b as usize, c as usize];
            }
            "hidden" => self.hidden = parse(key, value)?,
            "strategy" => {
                self.strategy = match value {
                    "" | "none" => StrategySet::default(),
                    v => v.parse().map_err(|e: lowbit::Error| e.to_string())?,
                }
            }
            "bits" => self.bits = parse(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "" | "auto" => None,
                    v => {
                        let bits = parse_list(key, v)?.into_iter().map(|b| b as u32).collect();
                        Some(BitSchedule::new(bits).map_err(|e| e.to_string())?)
                    }
                }
            }
            "quantize_first_last" => self.quantize_first_last = parse_bool(key, value)?,
            "weight_affine_map" => self.weight_affine_map = parse_bool(key, value)?,
            "stage1_act_bits" => self.stage1_act_bits = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "joint" => self.joint = parse_bool(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "nesterov" => self.nesterov = parse_bool(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_lr_period" => self.pretrain_lr_period = parse(key, value)?,
            "quant_epochs" => self.quant_epochs = parse(key, value)?,
            "quant_lr" => self.quant_lr = parse(key, value)?,
            "quant_lr_period" => self.quant_lr_period = parse(key, value)?,
            "augment" => {
                self.augment = match value {
                    "" | "auto" => None,
                    v => Some(parse_bool(key, v)?),
                }
            }
            "train_subset" => self.train_subset = parse(key, value)?,
            "val_subset" => self.val_subset = parse(key, value)?,
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "prefetch" => self.prefetch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Every key with its effective value, defaults materialized.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let schedule = match self.resolved_schedule() {
            Ok(s) => join(s.bits()),
            Err(_) => "auto".into(),
        };
        vec![
            ("dataset", self.dataset.name().into()),
            ("model", self.model.name().into()),
            ("widths", join(&self.widths)),
            ("hidden", self.hidden.to_string()),
            (
                "strategy",
                if self.strategy.is_empty() {
                    "none".into()
                } else {
                    self.strategy.to_string()
                },
            ),
            ("bits", self.bits.to_string()),
            ("schedule", schedule),
            ("quantize_first_last", self.quantize_first_last.to_string()),
            ("weight_affine_map", self.weight_affine_map.to_string()),
            ("stage1_act_bits", self.stage1_act_bits.to_string()),
            ("lambda", self.lambda.to_string()),
            ("joint", self.joint.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("nesterov", self.nesterov.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_lr_period", self.pretrain_lr_period.to_string()),
            ("quant_epochs", self.quant_epochs.to_string()),
            ("quant_lr", self.quant_lr.to_string()),
            ("quant_lr_period", self.quant_lr_period.to_string()),
            ("augment", self.augment_config().enabled.to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("val_subset", self.val_subset.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("prefetch", self.prefetch.to_string()),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out", self.out.display().to_string()),
        ]
    }

    /// The resolved config in the same format [`ExperimentConfig::load`] reads.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn model_spec(&self) -> ModelSpec {
        let input = self.dataset.input_shape();
        let classes = self.dataset.classes();
        match self.model {
            ModelKind::MiniAlexnet => ModelSpec::mini_alexnet(input, classes, self.widths, self.hidden),
            ModelKind::MiniResnet => ModelSpec::mini_resnet(input, classes, self.widths),
        }
    }

    /// Quantization flags; bit-widths are set per phase.
    pub fn quant_base(&self) -> QuantConfig {
        QuantConfig {
            quantize_first_last: self.quantize_first_last,
            weight_affine_map: self.weight_affine_map,
            ..QuantConfig::full()
        }
    }

    pub fn guided(&self) -> GuidedConfig {
        GuidedConfig {
            lambda: self.lambda,
            joint: self.joint,
        }
    }

    fn schedule_with(&self, epochs: usize, lr: f64, period: usize) -> TrainSchedule {
        TrainSchedule {
            epochs,
            batch_size: self.batch_size,
            lr: LrSchedule {
                initial: lr,
                factor: self.lr_factor,
                period,
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    pub fn pretrain_schedule(&self) -> TrainSchedule {
        self.schedule_with(self.pretrain_epochs, self.pretrain_lr, self.pretrain_lr_period)
    }

    pub fn quant_schedule(&self) -> TrainSchedule {
        self.schedule_with(self.quant_epochs, self.quant_lr, self.quant_lr_period)
    }

    pub fn augment_config(&self) -> AugmentConfig {
        let base = self.dataset.default_augment();
        match self.augment {
            None => base,
            Some(false) => AugmentConfig::none(),
            Some(true) if base.enabled => base,
            Some(true) => AugmentConfig {
                enabled: true,
                crop_pad: 2,
                flip_prob: 0.0,
            },
        }
    }

    /// The explicit schedule, or the ladder the strategy implies.
    pub fn resolved_schedule(&self) -> Result<BitSchedule> {
        Ok(match &self.schedule {
            Some(s) => s.clone(),
            None if self.strategy.pq => BitSchedule::ladder_to(self.bits)?,
            None => BitSchedule::direct(self.bits)?,
        })
    }

    /// The ordered phases of a `quantize` run.
    pub fn plan(&self) -> Result<Vec<Phase>> {
        if self.strategy.is_empty() {
            return Err(CliError::Usage(
                "quantize needs a strategy: baseline, or any of ts, pq, guided joined by `+`".into(),
            ));
        }
        // a plan that cannot be built is a problem with the settings
        let usage = |e: lowbit::Error| match e {
            lowbit::Error::Plan(msg) => CliError::Usage(msg),
            other => other.into(),
        };
        let schedule = self.resolved_schedule().map_err(|e| match e {
            CliError::Core(e) => usage(e),
            other => other,
        })?;
        compose(self.strategy, self.bits, Some(&schedule), self.stage1_act_bits).map_err(usage)
    }

    /// Directory name of a quantize run, e.g. `pq+ts+guided-2bit`.
    pub fn run_label(&self) -> String {
        let mut label = format!("{}-{}bit", self.strategy, self.bits);
        if !self.quantize_first_last {
            label.push_str("-fp-ends");
        }
        label
    }
}
