//! Runtime model: a [`ModelSpec`] plus its initialized [`ParameterStore`],
//! with the forward pass recorded onto a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::spec::{residual_needs_projection, LayerSpec, ModelSpec, ParamDecl, ParamRole};
use crate::autodiff::{BatchNormMode, BatchNormOptions, PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm (running averages updated), dropout on.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSettings {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormSettings {
    fn default() -> Self {
        BatchNormSettings {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// Which parameters are bound as differentiable when a model is placed on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Only parameters whose name starts with `head.`; used when fine-tuning
    /// from a checkpoint with the body frozen.
    HeadOnly,
    None,
}

/// Tape handles for a model's parameters, aligned with store order.
/// Running statistics are never bound.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars.get(index).copied().flatten()
    }

    /// Accumulated gradient of every bound parameter (store order). `None`
    /// for frozen parameters, buffers and anything the loss did not reach.
    pub fn gradients(&self, tape: &Tape) -> Result<Vec<Option<Vec<f64>>>> {
        self.vars
            .iter()
            .map(|v| match v {
                Some(v) => Ok(tape.grad(*v)?.map(<[f64]>::to_vec)),
                None => Ok(None),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParameterStore,
    batch_norm: BatchNormSettings,
}

fn decl_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic initial value for one declared tensor.
///
/// Convolutions: normal with std `sqrt(2 / fan_in)`. Linear weights and
/// biases: uniform in `±1/sqrt(fan_in)`. Batch norm: scale 1, shift 0,
/// running mean 0, running variance 1.
fn init_tensor(decl: &ParamDecl, seed: u64) -> Result<Tensor> {
    match decl.role {
        ParamRole::ConvWeight { fan_in } => {
            Tensor::seeded_normal(&decl.shape, seed, (2.0 / fan_in as f64).sqrt())
        }
        ParamRole::LinearWeight { fan_in } | ParamRole::LinearBias { fan_in } => {
            Tensor::seeded_uniform(&decl.shape, seed, 1.0 / (fan_in as f64).sqrt())
        }
        ParamRole::BnScale | ParamRole::RunningVar => Ok(Tensor::ones(&decl.shape)),
        ParamRole::BnShift | ParamRole::RunningMean => Ok(Tensor::zeros(&decl.shape)),
    }
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParameterStore::new();
        for (i, decl) in spec.parameter_decls().iter().enumerate() {
            let t = init_tensor(decl, decl_seed(seed, i))?;
            params.insert(decl.name.clone(), t, decl.role.trainable())?;
        }
        Ok(Model {
            spec,
            params,
            batch_norm: BatchNormSettings::default(),
        })
    }

    /// Pairs a spec with existing parameters; every declared name must be
    /// present with the declared shape and nothing else may be.
    pub fn from_parts(spec: ModelSpec, params: ParameterStore) -> Result<Self> {
        spec.validate()?;
        let decls = spec.parameter_decls();
        if decls.len() != params.len() {
            return Err(Error::Model(format!(
                "model declares {} tensors, store holds {}",
                decls.len(),
                params.len()
            )));
        }
        for (decl, (name, entry)) in decls.iter().zip(params.iter()) {
            if decl.name != name || decl.shape != entry.tensor.shape() {
                return Err(Error::Model(format!(
                    "expected {} {:?}, found {} {:?}",
                    decl.name,
                    decl.shape,
                    name,
                    entry.tensor.shape()
                )));
            }
        }
        Ok(Model {
            spec,
            params,
            batch_norm: BatchNormSettings::default(),
        })
    }

    pub fn with_batch_norm(mut self, settings: BatchNormSettings) -> Self {
        self.batch_norm = settings;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    /// Places every trainable tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, entry)| {
                if !entry.trainable {
                    return None;
                }
                let grad = match trainable {
                    Trainable::All => true,
                    Trainable::HeadOnly => name.starts_with("head."),
                    Trainable::None => false,
                };
                let t = entry.tensor.clone();
                Some(if grad { tape.param(t) } else { tape.constant(t) })
            })
            .collect();
        Binding { vars }
    }

    /// Records the forward pass of a `[N,C,H,W]` batch, returning `[N,K]`
    /// logits. In [`Mode::Train`] batch-norm running statistics in the store
    /// are updated and dropout masks are drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = tape.shape(input)?;
        if shape.len() != 4 || shape[1] != self.spec.input_shape.0 {
            return Err(Error::Model(format!(
                "input batch {shape:?} does not match {} input channels",
                self.spec.input_shape.0
            )));
        }
        let layers = self.spec.layers.clone();
        let mut ctx = Ctx {
            tape,
            binding,
            params: &mut self.params,
            mode,
            bn: self.batch_norm,
        };
        let mut x = input;
        for layer in &layers {
            x = ctx
                .layer(&layer.name, &layer.spec, x, rng)
                .map_err(|e| match e {
                    Error::Model(m) => Error::Model(format!("layer {}: {m}", layer.name)),
                    other => other,
                })?;
        }
        Ok(x)
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    binding: &'a Binding,
    params: &'a mut ParameterStore,
    mode: Mode,
    bn: BatchNormSettings,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .and_then(|i| self.binding.var(i))
            .ok_or_else(|| Error::Model(format!("parameter {name:?} is not bound")))
    }

    fn conv(&mut self, prefix: &str, x: Var, stride: usize, padding: usize, bias: bool) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.var(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, padding)
    }

    fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let scale = self.var(&format!("{prefix}.weight"))?;
        let shift = self.var(&format!("{prefix}.bias"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let running_mean = self.params.tensor(&mean_name)?.data().to_vec();
        let running_var = self.params.tensor(&var_name)?.data().to_vec();
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        };
        let out = self.tape.batch_norm(
            x,
            scale,
            shift,
            &running_mean,
            &running_var,
            BatchNormOptions {
                mode,
                epsilon: self.bn.epsilon,
            },
        )?;
        if let (Some(bm), Some(bv)) = (out.batch_mean, out.batch_var) {
            let m = self.bn.momentum;
            for (r, b) in self.params.tensor_mut(&mean_name)?.data_mut().iter_mut().zip(&bm) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.params.tensor_mut(&var_name)?.data_mut().iter_mut().zip(&bv) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(out.output)
    }

    fn bn_relu_conv(&mut self, norm: &str, conv: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = self.batch_norm(norm, x)?;
        let y = self.tape.relu(y)?;
        self.conv(conv, y, stride, padding, false)
    }

    fn layer<R: Rng + ?Sized>(&mut self, name: &str, spec: &LayerSpec, x: Var, rng: &mut R) -> Result<Var> {
        match spec {
            LayerSpec::Conv2d(c) => self.conv(name, x, c.stride, c.padding, c.bias),
            LayerSpec::Batchnorm2d { .. } => self.batch_norm(name, x),
            LayerSpec::Relu => self.tape.relu(x),
            LayerSpec::Maxpool2d(p) => self.tape.pool2d(PoolKind::Max, x, p.kernel, p.stride, p.padding),
            LayerSpec::Avgpool2d(p) => self.tape.pool2d(PoolKind::Avg, x, p.kernel, p.stride, p.padding),
            LayerSpec::GlobalAvgPool => self.tape.global_avg_pool(x),
            LayerSpec::GlobalConcatPool => {
                let mx = self.tape.global_max_pool(x)?;
                let avg = self.tape.global_avg_pool(x)?;
                self.tape.concat(&[mx, avg], 1)
            }
            LayerSpec::Linear { bias, .. } => {
                let w = self.var(&format!("{name}.weight"))?;
                let y = self.tape.matmul(x, w)?;
                if *bias {
                    let b = self.var(&format!("{name}.bias"))?;
                    self.tape.add(y, b)
                } else {
                    Ok(y)
                }
            }
            LayerSpec::Dropout { p } => match self.mode {
                Mode::Train if *p > 0.0 => self.tape.dropout(x, *p, rng),
                _ => Ok(x),
            },
            LayerSpec::DenseBlock(d) => {
                let mut features = vec![x];
                for i in 0..d.num_layers {
                    let p = format!("{name}.denselayer{}", i + 1);
                    let input = if features.len() == 1 {
                        features[0]
                    } else {
                        self.tape.concat(&features, 1)?
                    };
                    let y = self.bn_relu_conv(&format!("{p}.norm1"), &format!("{p}.conv1"), input, 1, 0)?;
                    let y = self.bn_relu_conv(&format!("{p}.norm2"), &format!("{p}.conv2"), y, 1, 1)?;
                    features.push(y);
                }
                if features.len() == 1 {
                    Ok(features[0])
                } else {
                    self.tape.concat(&features, 1)
                }
            }
            LayerSpec::Transition { .. } => {
                let y = self.bn_relu_conv(&format!("{name}.norm"), &format!("{name}.conv"), x, 1, 0)?;
                self.tape.pool2d(PoolKind::Avg, y, 2, 2, 0)
            }
            LayerSpec::ResidualBlock {
                in_channels,
                out_channels,
                stride,
            } => {
                let y = self.conv(&format!("{name}.conv1"), x, *stride, 1, false)?;
                let y = self.batch_norm(&format!("{name}.bn1"), y)?;
                let y = self.tape.relu(y)?;
                let y = self.conv(&format!("{name}.conv2"), y, 1, 1, false)?;
                let y = self.batch_norm(&format!("{name}.bn2"), y)?;
                let shortcut = if residual_needs_projection(*in_channels, *out_channels, *stride) {
                    let s = self.conv(&format!("{name}.downsample.0"), x, *stride, 0, false)?;
                    self.batch_norm(&format!("{name}.downsample.1"), s)?
                } else {
                    x
                };
                let sum = self.tape.add(y, shortcut)?;
                self.tape.relu(sum)
            }
            LayerSpec::Flatten => self.tape.flatten(x),
            LayerSpec::Softmax => self.tape.softmax(x),
        }
    }
}
