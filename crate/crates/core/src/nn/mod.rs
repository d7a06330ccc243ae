//! Layer graphs, the DenseNet/ResNet builders, parameters and checkpoints.

pub mod builders;
pub mod checkpoint;
pub mod model;
pub mod params;
pub mod spec;

pub use builders::{
    build_architecture, build_dense_block, build_densenet, build_densenet121, build_resnet, build_transition,
    ArchId, Architecture, DenseNetConfig,
};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use model::{BatchNormSettings, Binding, Mode, Model, Trainable};
pub use params::{ParamEntry, ParameterStore};
pub use spec::{ActShape, HeadKind, HeadSpec, Layer, LayerSpec, ModelSpec, ParamDecl, ParamRole};
