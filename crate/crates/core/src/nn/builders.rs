//! Builders for the dense and residual networks.
//!
//! The 121-layer DenseNet uses growth rate 32, four dense blocks of
//! (6, 12, 24, 16) composites, bottleneck width 4·growth and compression 0.5
//! in the transitions. Every composite carries batch norm, and convolutions
//! in front of batch norm have no bias. With the concat-pool head and seven
//! classes this gives exactly 8,011,655 trainable parameters.

use serde::{Deserialize, Serialize};

use super::spec::{
    ConvSpec, DenseBlockSpec, HeadKind, HeadSpec, Layer, LayerSpec, ModelSpec, PoolSpec,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub bottleneck_factor: usize,
    pub compression: f64,
}

impl DenseNetConfig {
    pub fn densenet121() -> Self {
        DenseNetConfig {
            stem_channels: 64,
            growth_rate: 32,
            block_layers: vec![6, 12, 24, 16],
            bottleneck_factor: 4,
            compression: 0.5,
        }
    }

    /// Desk-scale variant: growth 12, two composites per block.
    pub fn tiny() -> Self {
        DenseNetConfig {
            stem_channels: 24,
            growth_rate: 12,
            block_layers: vec![2, 2, 2, 2],
            bottleneck_factor: 4,
            compression: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    DenseNet(DenseNetConfig),
    ResNet { depth: usize },
}

/// Named architectures selectable from configuration and the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Densenet121,
    DensenetTiny,
    Resnet18,
    Resnet34,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [
        ArchId::Densenet121,
        ArchId::DensenetTiny,
        ArchId::Resnet18,
        ArchId::Resnet34,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::Densenet121 => "densenet121",
            ArchId::DensenetTiny => "densenet_tiny",
            ArchId::Resnet18 => "resnet18",
            ArchId::Resnet34 => "resnet34",
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            ArchId::Densenet121 => Architecture::DenseNet(DenseNetConfig::densenet121()),
            ArchId::DensenetTiny => Architecture::DenseNet(DenseNetConfig::tiny()),
            ArchId::Resnet18 => Architecture::ResNet { depth: 18 },
            ArchId::Resnet34 => Architecture::ResNet { depth: 34 },
        }
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Model(format!("unknown architecture {s:?}")))
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn build_dense_block(in_channels: usize, num_layers: usize, growth_rate: usize) -> Result<LayerSpec> {
    let spec = LayerSpec::DenseBlock(DenseBlockSpec {
        in_channels,
        num_layers,
        growth_rate,
        bottleneck_factor: 4,
    });
    spec.validate()?;
    Ok(spec)
}

/// Channel count after a transition: `floor(compression · in_channels)`.
pub fn transition_channels(in_channels: usize, compression: f64) -> Result<usize> {
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(Error::Model(format!("compression {compression} not in (0, 1]")));
    }
    let out = (compression * in_channels as f64).floor() as usize;
    if out == 0 {
        return Err(Error::Model(format!(
            "compression {compression} leaves no channels out of {in_channels}"
        )));
    }
    Ok(out)
}

pub fn build_transition(in_channels: usize, compression: f64) -> Result<LayerSpec> {
    let spec = LayerSpec::Transition {
        in_channels,
        out_channels: transition_channels(in_channels, compression)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn layer(name: impl Into<String>, spec: LayerSpec) -> Layer {
    Layer {
        name: name.into(),
        spec,
    }
}

fn head_layers(head: &HeadSpec, features: usize, num_classes: usize) -> Vec<Layer> {
    match head.kind {
        HeadKind::StockLinear => vec![
            layer("head.pool", LayerSpec::GlobalAvgPool),
            layer(
                "head.fc",
                LayerSpec::Linear {
                    in_features: features,
                    out_features: num_classes,
                    bias: true,
                },
            ),
        ],
        HeadKind::ConcatPool => vec![
            layer("head.pool", LayerSpec::GlobalConcatPool),
            layer("head.bn1", LayerSpec::Batchnorm2d { channels: 2 * features }),
            layer("head.drop1", LayerSpec::Dropout { p: head.dropout.0 }),
            layer(
                "head.fc1",
                LayerSpec::Linear {
                    in_features: 2 * features,
                    out_features: head.hidden,
                    bias: true,
                },
            ),
            layer("head.relu", LayerSpec::Relu),
            layer("head.bn2", LayerSpec::Batchnorm2d { channels: head.hidden }),
            layer("head.drop2", LayerSpec::Dropout { p: head.dropout.1 }),
            layer(
                "head.fc2",
                LayerSpec::Linear {
                    in_features: head.hidden,
                    out_features: num_classes,
                    bias: true,
                },
            ),
        ],
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Model(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

const STEM_POOL: PoolSpec = PoolSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

pub fn build_densenet(
    config: &DenseNetConfig,
    num_classes: usize,
    head: HeadSpec,
    input_shape: (usize, usize, usize),
) -> Result<ModelSpec> {
    check_classes(num_classes)?;
    if config.block_layers.is_empty() {
        return Err(Error::Model("densenet needs at least one dense block".into()));
    }
    let mut layers = vec![
        layer(
            "features.conv0",
            LayerSpec::Conv2d(ConvSpec::plain(input_shape.0, config.stem_channels, 7, 2, 3)),
        ),
        layer("features.norm0", LayerSpec::Batchnorm2d { channels: config.stem_channels }),
        layer("features.relu0", LayerSpec::Relu),
        layer("features.pool0", LayerSpec::Maxpool2d(STEM_POOL)),
    ];
    let mut channels = config.stem_channels;
    let blocks = config.block_layers.len();
    for (i, &n) in config.block_layers.iter().enumerate() {
        let block = LayerSpec::DenseBlock(DenseBlockSpec {
            in_channels: channels,
            num_layers: n,
            growth_rate: config.growth_rate,
            bottleneck_factor: config.bottleneck_factor,
        });
        block.validate()?;
        channels += n * config.growth_rate;
        layers.push(layer(format!("features.denseblock{}", i + 1), block));
        if i + 1 < blocks {
            let t = build_transition(channels, config.compression)?;
            if let LayerSpec::Transition { out_channels, .. } = t {
                channels = out_channels;
            }
            layers.push(layer(format!("features.transition{}", i + 1), t));
        }
    }
    layers.push(layer(
        format!("features.norm{}", blocks + 1),
        LayerSpec::Batchnorm2d { channels },
    ));
    layers.push(layer(format!("features.relu{}", blocks + 1), LayerSpec::Relu));
    layers.extend(head_layers(&head, channels, num_classes));
    ModelSpec::new(
        Architecture::DenseNet(config.clone()),
        head,
        input_shape,
        num_classes,
        layers,
    )
}

pub fn build_densenet121(num_classes: usize, head: HeadKind) -> Result<ModelSpec> {
    build_densenet(
        &DenseNetConfig::densenet121(),
        num_classes,
        HeadSpec::new(head),
        (3, 224, 224),
    )
}

pub fn build_resnet(depth: usize, num_classes: usize, head: HeadKind) -> Result<ModelSpec> {
    build_resnet_with(depth, num_classes, HeadSpec::new(head), (3, 224, 224))
}

pub fn build_resnet_with(
    depth: usize,
    num_classes: usize,
    head: HeadSpec,
    input_shape: (usize, usize, usize),
) -> Result<ModelSpec> {
    check_classes(num_classes)?;
    let blocks: [usize; 4] = match depth {
        18 => [2, 2, 2, 2],
        34 => [3, 4, 6, 3],
        other => return Err(Error::Model(format!("unsupported resnet depth {other}"))),
    };
    let mut layers = vec![
        layer("conv1", LayerSpec::Conv2d(ConvSpec::plain(input_shape.0, 64, 7, 2, 3))),
        layer("bn1", LayerSpec::Batchnorm2d { channels: 64 }),
        layer("relu", LayerSpec::Relu),
        layer("maxpool", LayerSpec::Maxpool2d(STEM_POOL)),
    ];
    let mut channels = 64;
    for (stage, (&count, width)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(layer(
                format!("layer{}.{b}", stage + 1),
                LayerSpec::ResidualBlock {
                    in_channels: channels,
                    out_channels: width,
                    stride,
                },
            ));
            channels = width;
        }
    }
    layers.extend(head_layers(&head, channels, num_classes));
    ModelSpec::new(
        Architecture::ResNet { depth },
        head,
        input_shape,
        num_classes,
        layers,
    )
}

/// Rebuilds a model layout from its architecture description.
pub fn build_architecture(
    architecture: &Architecture,
    num_classes: usize,
    head: HeadSpec,
    input_shape: (usize, usize, usize),
) -> Result<ModelSpec> {
    match architecture {
        Architecture::DenseNet(cfg) => build_densenet(cfg, num_classes, head, input_shape),
        Architecture::ResNet { depth } => build_resnet_with(*depth, num_classes, head, input_shape),
    }
}
