use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Bias-free convolution; must be followed by `BatchNorm`.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Fully connected layer over a flat `(n, features)` input.
    Fc {
        out_features: usize,
        bias: bool,
    },
    BatchNorm,
    /// `clip(x, 0, 1)`, followed by activation quantization when enabled.
    Clip,
    MaxPool {
        window: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Basic residual block: conv-BN-clip-conv-BN, plus an identity or
    /// 1×1 conv-BN projection shortcut, then clip.
    Residual {
        out_channels: usize,
        stride: usize,
    },
    /// Trainable output multiplier, present only in quantized models.
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default = "yes")]
    pub quantize_weights: bool,
    #[serde(default = "yes")]
    pub quantize_acts: bool,
    #[serde(default)]
    pub tap: Option<String>,
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            quantize_weights: true,
            quantize_acts: true,
            tap: None,
        }
    }

    pub fn tapped(mut self, tap: impl Into<String>) -> Self {
        self.tap = Some(tap.into());
        self
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv { .. } | LayerKind::Fc { .. } | LayerKind::Residual { .. }
        )
    }

    pub fn produces_activation(&self) -> bool {
        matches!(self.kind, LayerKind::Clip | LayerKind::Residual { .. })
    }
}

/// Shape of the per-sample feature map flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Map { c, h, w } => c * h * w,
            FeatureShape::Flat(f) => f,
        }
    }
}

/// Shape of one trainable parameter or buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / fully-connected weight with fan-in for He init.
    Weight {
        fan_in: usize,
    },
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
    Alpha,
}

impl ParamKind {
    pub fn is_buffer(&self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Declarative network description.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Plain CNN: three conv-BN-clip-pool stages, two tapped hidden FC
    /// layers (FC-BN-clip), a classifier FC and the scalar layer.
    pub fn mini_alexnet(input: [usize; 3], classes: usize, channels: [usize; 3], hidden: usize) -> Self {
        let mut layers = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let i = i + 1;
            layers.push(LayerSpec::new(
                format!("conv{i}"),
                LayerKind::Conv {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ));
            layers.push(LayerSpec::new(format!("bn{i}"), LayerKind::BatchNorm));
            layers.push(LayerSpec::new(format!("act{i}"), LayerKind::Clip));
            layers.push(LayerSpec::new(format!("pool{i}"), LayerKind::MaxPool { window: 2 }));
        }
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        for i in 1..=2 {
            layers.push(LayerSpec::new(
                format!("fc{i}"),
                LayerKind::Fc {
                    out_features: hidden,
                    bias: false,
                },
            ));
            layers.push(LayerSpec::new(format!("fc{i}_bn"), LayerKind::BatchNorm));
            layers.push(LayerSpec::new(format!("fc{i}_act"), LayerKind::Clip).tapped(format!("fc{i}")));
        }
        layers.push(LayerSpec::new(
            "classifier",
            LayerKind::Fc {
                out_features: classes,
                bias: true,
            },
        ));
        layers.push(LayerSpec::new("scale", LayerKind::Scalar));
        ModelSpec {
            name: "mini-alexnet".into(),
            input,
            classes,
            layers,
        }
    }

    /// Residual network: stem, three groups of two basic blocks (the second
    /// and third groups downsample by 2), global average pooling, classifier
    /// FC and the scalar layer. The last block of the final two groups is tapped.
    pub fn mini_resnet(input: [usize; 3], classes: usize, widths: [usize; 3]) -> Self {
        let mut layers = vec![
            LayerSpec::new(
                "stem",
                LayerKind::Conv {
                    out_channels: widths[0],
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ),
            LayerSpec::new("stem_bn", LayerKind::BatchNorm),
            LayerSpec::new("stem_act", LayerKind::Clip),
        ];
        for (g, &w) in widths.iter().enumerate() {
            for b in 0..2 {
                let stride = if g > 0 && b == 0 { 2 } else { 1 };
                let mut layer = LayerSpec::new(
                    format!("group{}.block{}", g + 1, b + 1),
                    LayerKind::Residual {
                        out_channels: w,
                        stride,
                    },
                );
                if g > 0 && b == 1 {
                    layer = layer.tapped(format!("group{}", g + 1));
                }
                layers.push(layer);
            }
        }
        layers.push(LayerSpec::new("pool", LayerKind::GlobalAvgPool));
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        layers.push(LayerSpec::new(
            "classifier",
            LayerKind::Fc {
                out_features: classes,
                bias: true,
            },
        ));
        layers.push(LayerSpec::new("scale", LayerKind::Scalar));
        ModelSpec {
            name: "mini-resnet".into(),
            input,
            classes,
            layers,
        }
    }

    /// Same architecture with every quantization flag cleared.
    pub fn without_quantization(&self) -> Self {
        let mut spec = self.clone();
        for l in &mut spec.layers {
            l.quantize_weights = false;
            l.quantize_acts = false;
        }
        spec
    }

    pub fn taps(&self) -> Vec<&str> {
        self.layers.iter().filter_map(|l| l.tap.as_deref()).collect()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn first_conv(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Conv { .. }))
    }

    pub fn last_fc(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l.kind, LayerKind::Fc { .. }))
    }

    /// Index of the activation feeding the last fully-connected layer.
    pub fn last_fc_input_activation(&self) -> Option<usize> {
        let fc = self.last_fc()?;
        self.layers[..fc].iter().rposition(|l| l.produces_activation())
    }

    /// Validates structure and returns every parameter and buffer shape in
    /// initialization order (the scalar layer's `alpha` included).
    pub fn validate(&self) -> Result<Vec<ParamShape>> {
        let err = |msg: String| Err(Error::Spec(format!("{}: {msg}", self.name)));
        if self.input.contains(&0) || self.classes == 0 {
            return err(format!(
                "input {:?} / classes {} must be positive",
                self.input, self.classes
            ));
        }
        let mut names = std::collections::HashSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return err(format!("duplicate layer name `{}`", l.name));
            }
            if l.tap.is_some() && !l.produces_activation() {
                return err(format!("tap on `{}`, which produces no activation", l.name));
            }
        }
        let taps = self.taps();
        if taps.len() != 2 {
            return err(format!("expected exactly two guidance taps, found {}", taps.len()));
        }
        if taps[0] == taps[1] {
            return err(format!("duplicate tap `{}`", taps[0]));
        }

        let [c, h, w] = self.input;
        let mut shape = FeatureShape::Map { c, h, w };
        let mut params = Vec::new();
        let bn = |params: &mut Vec<ParamShape>, prefix: &str, ch: usize| {
            for (suffix, kind) in [
                ("scale", ParamKind::BnScale),
                ("shift", ParamKind::BnShift),
                ("running_mean", ParamKind::RunningMean),
                ("running_var", ParamKind::RunningVar),
            ] {
                params.push(ParamShape {
                    name: format!("{prefix}.{suffix}"),
                    shape: vec![ch],
                    kind,
                });
            }
        };
        let conv_out = |h: usize, k: usize, s: usize, p: usize| (h + 2 * p).checked_sub(k).map(|d| d / s + 1);

        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l.kind, LayerKind::Conv { .. })
                && !matches!(self.layers.get(i + 1).map(|n| &n.kind), Some(LayerKind::BatchNorm))
            {
                return err(format!("conv `{}` must be followed by batch norm", l.name));
            }
            if matches!(l.kind, LayerKind::Scalar) && i + 1 != self.layers.len() {
                return err(format!("scalar layer `{}` must be last", l.name));
            }
            shape = match (&l.kind, shape) {
                (
                    &LayerKind::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    FeatureShape::Map { c, h, w },
                ) => {
                    let (Some(oh), Some(ow)) = (conv_out(h, kernel, stride, pad), conv_out(w, kernel, stride, pad))
                    else {
                        return err(format!("conv `{}`: kernel {kernel} does not fit {h}x{w}", l.name));
                    };
                    if stride == 0 || out_channels == 0 {
                        return err(format!("conv `{}`: zero stride or width", l.name));
                    }
                    params.push(ParamShape {
                        name: format!("{}.weight", l.name),
                        shape: vec![out_channels, c, kernel, kernel],
                        kind: ParamKind::Weight {
                            fan_in: c * kernel * kernel,
                        },
                    });
                    FeatureShape::Map {
                        c: out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                (&LayerKind::Fc { out_features, bias }, FeatureShape::Flat(fin)) => {
                    params.push(ParamShape {
                        name: format!("{}.weight", l.name),
                        shape: vec![out_features, fin],
                        kind: ParamKind::Weight { fan_in: fin },
                    });
                    if bias {
                        params.push(ParamShape {
                            name: format!("{}.bias", l.name),
                            shape: vec![out_features],
                            kind: ParamKind::Bias,
                        });
                    }
                    FeatureShape::Flat(out_features)
                }
                (LayerKind::BatchNorm, s) => {
                    let ch = match s {
                        FeatureShape::Map { c, .. } => c,
                        FeatureShape::Flat(f) => f,
                    };
                    bn(&mut params, &l.name, ch);
                    s
                }
                (LayerKind::Clip, s) => s,
                (&LayerKind::MaxPool { window }, FeatureShape::Map { c, h, w })
                    if window > 0 && h >= window && w >= window =>
                {
                    FeatureShape::Map {
                        c,
                        h: h / window,
                        w: w / window,
                    }
                }
                (LayerKind::GlobalAvgPool, FeatureShape::Map { c, h, w }) if h == w => {
                    FeatureShape::Map { c, h: 1, w: 1 }
                }
                (LayerKind::Flatten, s) => FeatureShape::Flat(s.numel()),
                (&LayerKind::Residual { out_channels, stride }, FeatureShape::Map { c, h, w }) => {
                    let (Some(oh), Some(ow)) = (conv_out(h, 3, stride, 1), conv_out(w, 3, stride, 1)) else {
                        return err(format!("residual `{}` does not fit {h}x{w}", l.name));
                    };
                    if stride == 0 {
                        return err(format!("residual `{}`: zero stride", l.name));
                    }
                    let p = &l.name;
                    params.push(ParamShape {
                        name: format!("{p}.conv1.weight"),
                        shape: vec![out_channels, c, 3, 3],
                        kind: ParamKind::Weight { fan_in: c * 9 },
                    });
                    bn(&mut params, &format!("{p}.bn1"), out_channels);
                    params.push(ParamShape {
                        name: format!("{p}.conv2.weight"),
                        shape: vec![out_channels, out_channels, 3, 3],
                        kind: ParamKind::Weight {
                            fan_in: out_channels * 9,
                        },
                    });
                    bn(&mut params, &format!("{p}.bn2"), out_channels);
                    if stride != 1 || c != out_channels {
                        params.push(ParamShape {
                            name: format!("{p}.proj.weight"),
                            shape: vec![out_channels, c, 1, 1],
                            kind: ParamKind::Weight { fan_in: c },
                        });
                        bn(&mut params, &format!("{p}.proj_bn"), out_channels);
                    }
                    FeatureShape::Map {
                        c: out_channels,
                        h: oh,
                        w: ow,
                    }
                }
                (LayerKind::Scalar, s) => {
                    params.push(ParamShape {
                        name: format!("{}.alpha", l.name),
                        shape: vec![1],
                        kind: ParamKind::Alpha,
                    });
                    s
                }
                (kind, s) => return err(format!("layer `{}` ({kind:?}) cannot take input {s:?}", l.name)),
            };
        }
        if shape != FeatureShape::Flat(self.classes) {
            return err(format!("output {shape:?} does not match {} classes", self.classes));
        }
        Ok(params)
    }
}
