//! Declarative layer graph: layer kinds, shape inference and parameter
//! declarations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation shape of a single sample (the batch axis is implicit).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl ActShape {
    pub fn map(channels: usize, height: usize, width: usize) -> Self {
        ActShape::Map {
            channels,
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { channels, .. } => channels,
            ActShape::Flat(n) => n,
        }
    }

    pub fn spatial(&self) -> Option<(usize, usize)> {
        match *self {
            ActShape::Map { height, width, .. } => Some((height, width)),
            ActShape::Flat(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Bias-free convolution, as used in front of batch norm.
    pub fn plain(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Dense block: `num_layers` composites of
/// BN→ReLU→1×1 conv (`bottleneck_factor·growth_rate`)→BN→ReLU→3×3 conv
/// (`growth_rate`), each fed the concatenation of everything before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub in_channels: usize,
    pub num_layers: usize,
    pub growth_rate: usize,
    pub bottleneck_factor: usize,
}

impl DenseBlockSpec {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.num_layers * self.growth_rate
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck_factor * self.growth_rate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    Batchnorm2d { channels: usize },
    Relu,
    Maxpool2d(PoolSpec),
    Avgpool2d(PoolSpec),
    GlobalAvgPool,
    /// Global max pool and global average pool, concatenated in that order.
    GlobalConcatPool,
    Linear { in_features: usize, out_features: usize, bias: bool },
    Dropout { p: f64 },
    DenseBlock(DenseBlockSpec),
    /// BN→ReLU→1×1 conv→2×2 average pool with stride 2.
    Transition { in_channels: usize, out_channels: usize },
    /// Basic two-conv residual block with a 1×1 projection shortcut when the
    /// stride or width changes.
    ResidualBlock { in_channels: usize, out_channels: usize, stride: usize },
    Flatten,
    Softmax,
}

/// Which initializer a parameter gets and whether it is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight { fan_in: usize },
    LinearWeight { fan_in: usize },
    LinearBias { fan_in: usize },
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(&self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Model(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

fn expect_map(layer: &str, input: ActShape) -> Result<(usize, usize, usize)> {
    match input {
        ActShape::Map {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        ActShape::Flat(_) => Err(Error::Model(format!("{layer} needs a feature map, got {input:?}"))),
    }
}

fn expect_channels(layer: &str, input: ActShape, channels: usize) -> Result<()> {
    if input.channels() != channels {
        return Err(Error::Model(format!(
            "{layer} expects {channels} channels, got {}",
            input.channels()
        )));
    }
    Ok(())
}

fn window_out(layer: &str, size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if size + 2 * padding < kernel {
        return Err(Error::Model(format!(
            "{layer}: kernel {kernel} exceeds padded size {}",
            size + 2 * padding
        )));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

pub(crate) fn bn_decls(prefix: &str, channels: usize, out: &mut Vec<ParamDecl>) {
    for (suffix, role) in [
        ("weight", ParamRole::BnScale),
        ("bias", ParamRole::BnShift),
        ("running_mean", ParamRole::RunningMean),
        ("running_var", ParamRole::RunningVar),
    ] {
        out.push(ParamDecl {
            name: format!("{prefix}.{suffix}"),
            shape: vec![channels],
            role,
        });
    }
}

pub(crate) fn conv_decls(prefix: &str, c: &ConvSpec, out: &mut Vec<ParamDecl>) {
    let fan_in = c.in_channels * c.kernel * c.kernel;
    out.push(ParamDecl {
        name: format!("{prefix}.weight"),
        shape: vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
        role: ParamRole::ConvWeight { fan_in },
    });
    if c.bias {
        out.push(ParamDecl {
            name: format!("{prefix}.bias"),
            shape: vec![c.out_channels],
            role: ParamRole::LinearBias { fan_in },
        });
    }
}

impl LayerSpec {
    /// Checks hyperparameters for completeness and range.
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d(c) => {
                positive("conv in_channels", c.in_channels)?;
                positive("conv out_channels", c.out_channels)?;
                positive("conv kernel", c.kernel)?;
                positive("conv stride", c.stride)
            }
            LayerSpec::Batchnorm2d { channels } => positive("batchnorm channels", *channels),
            LayerSpec::Maxpool2d(p) | LayerSpec::Avgpool2d(p) => {
                positive("pool kernel", p.kernel)?;
                positive("pool stride", p.stride)?;
                if 2 * p.padding > p.kernel {
                    return Err(Error::Model("pool padding exceeds half the kernel".into()));
                }
                Ok(())
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                positive("linear in_features", *in_features)?;
                positive("linear out_features", *out_features)
            }
            LayerSpec::Dropout { p } => {
                if (0.0..1.0).contains(p) {
                    Ok(())
                } else {
                    Err(Error::Model(format!("dropout probability {p} not in [0,1)")))
                }
            }
            LayerSpec::DenseBlock(d) => {
                positive("dense block in_channels", d.in_channels)?;
                positive("dense block growth_rate", d.growth_rate)?;
                positive("dense block bottleneck_factor", d.bottleneck_factor)
            }
            LayerSpec::Transition {
                in_channels,
                out_channels,
            } => {
                positive("transition in_channels", *in_channels)?;
                positive("transition out_channels", *out_channels)
            }
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                positive("residual in_channels", *in_channels)?;
                positive("residual out_channels", *out_channels)?;
                positive("residual stride", *stride)
            }
            LayerSpec::Relu
            | LayerSpec::GlobalAvgPool
            | LayerSpec::GlobalConcatPool
            | LayerSpec::Flatten
            | LayerSpec::Softmax => Ok(()),
        }
    }

    pub fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        self.validate()?;
        let shape = match self {
            LayerSpec::Conv2d(c) => {
                let (ch, h, w) = expect_map("conv2d", input)?;
                expect_channels("conv2d", input, c.in_channels)?;
                let _ = ch;
                ActShape::map(
                    c.out_channels,
                    window_out("conv2d", h, c.kernel, c.stride, c.padding)?,
                    window_out("conv2d", w, c.kernel, c.stride, c.padding)?,
                )
            }
            LayerSpec::Batchnorm2d { channels } => {
                expect_channels("batchnorm", input, *channels)?;
                input
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Softmax => input,
            LayerSpec::Maxpool2d(p) | LayerSpec::Avgpool2d(p) => {
                let (ch, h, w) = expect_map("pool2d", input)?;
                ActShape::map(
                    ch,
                    window_out("pool2d", h, p.kernel, p.stride, p.padding)?,
                    window_out("pool2d", w, p.kernel, p.stride, p.padding)?,
                )
            }
            LayerSpec::GlobalAvgPool => ActShape::Flat(expect_map("global pool", input)?.0),
            LayerSpec::GlobalConcatPool => ActShape::Flat(2 * expect_map("global pool", input)?.0),
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => {
                match input {
                    ActShape::Flat(n) if n == *in_features => {}
                    _ => {
                        return Err(Error::Model(format!(
                            "linear expects {in_features} features, got {input:?}"
                        )))
                    }
                }
                ActShape::Flat(*out_features)
            }
            LayerSpec::DenseBlock(d) => {
                let (_, h, w) = expect_map("dense block", input)?;
                expect_channels("dense block", input, d.in_channels)?;
                ActShape::map(d.out_channels(), h, w)
            }
            LayerSpec::Transition {
                in_channels,
                out_channels,
            } => {
                let (_, h, w) = expect_map("transition", input)?;
                expect_channels("transition", input, *in_channels)?;
                ActShape::map(
                    *out_channels,
                    window_out("transition", h, 2, 2, 0)?,
                    window_out("transition", w, 2, 2, 0)?,
                )
            }
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                let (_, h, w) = expect_map("residual block", input)?;
                expect_channels("residual block", input, *in_channels)?;
                ActShape::map(
                    *out_channels,
                    window_out("residual block", h, 3, *stride, 1)?,
                    window_out("residual block", w, 3, *stride, 1)?,
                )
            }
            LayerSpec::Flatten => match input {
                ActShape::Map {
                    channels,
                    height,
                    width,
                } => ActShape::Flat(channels * height * width),
                flat => flat,
            },
        };
        Ok(shape)
    }

    /// Parameters and buffers owned by this layer, named under `prefix`.
    pub fn parameters(&self, prefix: &str) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        match self {
            LayerSpec::Conv2d(c) => conv_decls(prefix, c, &mut out),
            LayerSpec::Batchnorm2d { channels } => bn_decls(prefix, *channels, &mut out),
            LayerSpec::Linear {
                in_features,
                out_features,
                bias,
            } => {
                out.push(ParamDecl {
                    name: format!("{prefix}.weight"),
                    shape: vec![*in_features, *out_features],
                    role: ParamRole::LinearWeight { fan_in: *in_features },
                });
                if *bias {
                    out.push(ParamDecl {
                        name: format!("{prefix}.bias"),
                        shape: vec![*out_features],
                        role: ParamRole::LinearBias { fan_in: *in_features },
                    });
                }
            }
            LayerSpec::DenseBlock(d) => {
                for i in 0..d.num_layers {
                    let p = format!("{prefix}.denselayer{}", i + 1);
                    let c_in = d.in_channels + i * d.growth_rate;
                    bn_decls(&format!("{p}.norm1"), c_in, &mut out);
                    conv_decls(
                        &format!("{p}.conv1"),
                        &ConvSpec::plain(c_in, d.bottleneck_channels(), 1, 1, 0),
                        &mut out,
                    );
                    bn_decls(&format!("{p}.norm2"), d.bottleneck_channels(), &mut out);
                    conv_decls(
                        &format!("{p}.conv2"),
                        &ConvSpec::plain(d.bottleneck_channels(), d.growth_rate, 3, 1, 1),
                        &mut out,
                    );
                }
            }
            LayerSpec::Transition {
                in_channels,
                out_channels,
            } => {
                bn_decls(&format!("{prefix}.norm"), *in_channels, &mut out);
                conv_decls(
                    &format!("{prefix}.conv"),
                    &ConvSpec::plain(*in_channels, *out_channels, 1, 1, 0),
                    &mut out,
                );
            }
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                conv_decls(
                    &format!("{prefix}.conv1"),
                    &ConvSpec::plain(*in_channels, *out_channels, 3, *stride, 1),
                    &mut out,
                );
                bn_decls(&format!("{prefix}.bn1"), *out_channels, &mut out);
                conv_decls(
                    &format!("{prefix}.conv2"),
                    &ConvSpec::plain(*out_channels, *out_channels, 3, 1, 1),
                    &mut out,
                );
                bn_decls(&format!("{prefix}.bn2"), *out_channels, &mut out);
                if residual_needs_projection(*in_channels, *out_channels, *stride) {
                    conv_decls(
                        &format!("{prefix}.downsample.0"),
                        &ConvSpec::plain(*in_channels, *out_channels, 1, *stride, 0),
                        &mut out,
                    );
                    bn_decls(&format!("{prefix}.downsample.1"), *out_channels, &mut out);
                }
            }
            LayerSpec::Relu
            | LayerSpec::Maxpool2d(_)
            | LayerSpec::Avgpool2d(_)
            | LayerSpec::GlobalAvgPool
            | LayerSpec::GlobalConcatPool
            | LayerSpec::Dropout { .. }
            | LayerSpec::Flatten
            | LayerSpec::Softmax => {}
        }
        out
    }
}

pub(crate) fn residual_needs_projection(in_channels: usize, out_channels: usize, stride: usize) -> bool {
    stride != 1 || in_channels != out_channels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pool and one linear layer.
    StockLinear,
    /// Concatenated max+average pooling feeding a two-layer perceptron with
    /// batch norm and dropout.
    ConcatPool,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stock_linear" | "linear" => Ok(HeadKind::StockLinear),
            "concat_pool" => Ok(HeadKind::ConcatPool),
            other => Err(Error::Model(format!("unknown head kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadKind::StockLinear => "stock_linear",
            HeadKind::ConcatPool => "concat_pool",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Hidden width of the concat-pool perceptron.
    pub hidden: usize,
    /// Dropout before the first and second linear layers of the concat-pool head.
    pub dropout: (f64, f64),
}

impl HeadSpec {
    pub fn new(kind: HeadKind) -> Self {
        HeadSpec {
            kind,
            hidden: 512,
            dropout: (0.25, 0.5),
        }
    }
}

/// A validated, ordered layer graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: super::Architecture,
    pub head: HeadSpec,
    /// `(channels, height, width)` of one input sample.
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Builds and validates: names unique, shapes chain, final layer emits
    /// `num_classes` logits.
    pub fn new(
        architecture: super::Architecture,
        head: HeadSpec,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let spec = ModelSpec {
            architecture,
            head,
            input_shape,
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Model(format!("duplicate layer name {:?}", l.name)));
            }
        }
        let out = self.output_shape()?;
        if out != ActShape::Flat(self.num_classes) {
            return Err(Error::Model(format!(
                "model emits {out:?}, expected {} logits",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn input_act(&self) -> ActShape {
        let (c, h, w) = self.input_shape;
        ActShape::map(c, h, w)
    }

    /// Output shape of every layer, in order.
    pub fn shape_trace(&self) -> Result<Vec<(String, ActShape)>> {
        let mut shape = self.input_act();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l
                .spec
                .output_shape(shape)
                .map_err(|e| Error::Model(format!("layer {}: {e}", l.name)))?;
            out.push((l.name.clone(), shape));
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        Ok(self
            .shape_trace()?
            .last()
            .map(|(_, s)| *s)
            .unwrap_or_else(|| self.input_act()))
    }

    pub fn parameter_decls(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(|l| l.spec.parameters(&l.name)).collect()
    }

    /// Trainable element count computed from the declarations alone.
    pub fn count_parameters(&self) -> usize {
        self.parameter_decls()
            .iter()
            .filter(|d| d.role.trainable())
            .map(ParamDecl::numel)
            .sum()
    }

    /// Trainable element count per layer, in layer order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .map(|l| {
                let n = l
                    .spec
                    .parameters(&l.name)
                    .iter()
                    .filter(|d| d.role.trainable())
                    .map(ParamDecl::numel)
                    .sum();
                (l.name.clone(), n)
            })
            .collect()
    }
}
