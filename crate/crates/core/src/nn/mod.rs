//! Declarative network specs and the two stock architectures.

mod model;
mod spec;

pub use model::{ForwardOut, LayerBits, Mode, Model, BN_EPS, BN_MOMENTUM};
pub use spec::{FeatureShape, LayerKind, LayerSpec, ModelSpec, ParamKind, ParamShape};
