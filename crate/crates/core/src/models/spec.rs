//! Declarative layer graphs and their shape algebra.

use crate::error::{Error, Result};
use crate::tensor::{Geometry, Padding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// A standard or depthwise-separable convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub use_bias: bool,
    pub activation: Activation,
    pub trainable: bool,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, filters: usize, kernel: usize) -> Self {
        ConvSpec {
            name: name.into(),
            filters,
            kernel,
            stride: 1,
            padding: Padding::Valid,
            use_bias: true,
            activation: Activation::Linear,
            trainable: true,
        }
    }

    pub fn same(mut self) -> Self {
        self.padding = Padding::Same;
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn relu(mut self) -> Self {
        self.activation = Activation::Relu;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.use_bias = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSpec {
    pub name: String,
    pub units: usize,
    pub activation: Activation,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub name: String,
    pub eps: f64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    SeparableConv2d(ConvSpec),
    /// Inference-form batch norm with stored statistics.
    BatchNorm(BatchNormSpec),
    MaxPool {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Flatten,
    GlobalAvgPool,
    Dense(DenseSpec),
    Softmax,
    /// `act(branch(x)) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        name: String,
        branch: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
        branch_activation: Activation,
    },
}

impl LayerSpec {
    pub fn conv(spec: ConvSpec) -> Self {
        LayerSpec::Conv2d(spec)
    }

    pub fn maxpool2() -> Self {
        LayerSpec::MaxPool {
            window: 2,
            stride: 2,
            padding: Padding::Valid,
        }
    }

    pub fn dense(name: impl Into<String>, units: usize, activation: Activation) -> Self {
        LayerSpec::Dense(DenseSpec {
            name: name.into(),
            units,
            activation,
            trainable: true,
        })
    }

    pub fn batch_norm(name: impl Into<String>, eps: f64) -> Self {
        LayerSpec::BatchNorm(BatchNormSpec {
            name: name.into(),
            eps,
            trainable: true,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::SeparableConv2d(_) => "separable_conv2d",
            LayerSpec::BatchNorm(_) => "batch_norm",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Residual { .. } => "residual",
        }
    }

    /// Sets the trainable flag on this layer and everything nested in it.
    pub fn set_trainable(&mut self, trainable: bool) {
        match self {
            LayerSpec::Conv2d(c) | LayerSpec::SeparableConv2d(c) => c.trainable = trainable,
            LayerSpec::BatchNorm(b) => b.trainable = trainable,
            LayerSpec::Dense(d) => d.trainable = trainable,
            LayerSpec::Residual { branch, shortcut, .. } => {
                branch.iter_mut().chain(shortcut.iter_mut()).for_each(|l| l.set_trainable(trainable))
            }
            _ => {}
        }
    }
}

/// How a parameter is initialised before any weights are loaded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub init: Init,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An ordered layer stack over a fixed `(height, width, channels)` input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Per-sample shape: `[h, w, c]` for feature maps, `[d]` for vectors.
pub type Shape = Vec<usize>;

fn spatial(op: &'static str, shape: &Shape) -> Result<(usize, usize, usize)> {
    match shape[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape(op, "rank", "3 (h, w, c)", shape.len())),
    }
}

pub(crate) fn layer_output_shape(layer: &LayerSpec, input: &Shape) -> Result<Shape> {
    Ok(match layer {
        LayerSpec::Conv2d(c) | LayerSpec::SeparableConv2d(c) => {
            let (h, w, _) = spatial("conv2d", input)?;
            let g = Geometry::new("conv2d", h, w, c.kernel, c.kernel, c.stride, c.padding)?;
            vec![g.out_h, g.out_w, c.filters]
        }
        LayerSpec::MaxPool { window, stride, padding } => {
            let (h, w, c) = spatial("maxpool2d", input)?;
            let g = Geometry::new("maxpool2d", h, w, *window, *window, *stride, *padding)?;
            vec![g.out_h, g.out_w, c]
        }
        LayerSpec::BatchNorm(_) | LayerSpec::Relu | LayerSpec::Dropout { .. } => input.clone(),
        LayerSpec::Softmax => {
            if input.len() != 1 {
                return Err(Error::shape("softmax", "rank", 1, input.len()));
            }
            input.clone()
        }
        LayerSpec::Flatten => vec![input.iter().product()],
        LayerSpec::GlobalAvgPool => {
            let (_, _, c) = spatial("global_avg_pool", input)?;
            vec![c]
        }
        LayerSpec::Dense(d) => {
            if input.len() != 1 {
                return Err(Error::shape("dense", "rank", "1 (flattened)", input.len()));
            }
            vec![d.units]
        }
        LayerSpec::Residual { branch, shortcut, .. } => {
            let b = stack_output_shape(branch, input)?;
            let s = stack_output_shape(shortcut, input)?;
            if b != s {
                return Err(Error::shape("residual_block", "branch/shortcut shape", format!("{s:?}"), format!("{b:?}")));
            }
            b
        }
    })
}

pub(crate) fn stack_output_shape(layers: &[LayerSpec], input: &Shape) -> Result<Shape> {
    layers.iter().try_fold(input.clone(), |s, l| layer_output_shape(l, &s))
}

fn collect_params(layers: &[LayerSpec], input: &Shape, out: &mut Vec<ParamInfo>) -> Result<Shape> {
    let mut shape = input.clone();
    for layer in layers {
        match layer {
            LayerSpec::Conv2d(c) => {
                let (_, _, cin) = spatial("conv2d", &shape)?;
                let k = c.kernel;
                out.push(ParamInfo {
                    name: format!("{}/kernel", c.name),
                    shape: vec![k, k, cin, c.filters],
                    trainable: c.trainable,
                    init: Init::GlorotUniform {
                        fan_in: k * k * cin,
                        fan_out: k * k * c.filters,
                    },
                });
                if c.use_bias {
                    out.push(ParamInfo {
                        name: format!("{}/bias", c.name),
                        shape: vec![c.filters],
                        trainable: c.trainable,
                        init: Init::Zeros,
                    });
                }
            }
            LayerSpec::SeparableConv2d(c) => {
                let (_, _, cin) = spatial("separable_conv", &shape)?;
                let k = c.kernel;
                out.push(ParamInfo {
                    name: format!("{}/depthwise", c.name),
                    shape: vec![k, k, cin, 1],
                    trainable: c.trainable,
                    init: Init::GlorotUniform {
                        fan_in: k * k,
                        fan_out: k * k,
                    },
                });
                out.push(ParamInfo {
                    name: format!("{}/pointwise", c.name),
                    shape: vec![1, 1, cin, c.filters],
                    trainable: c.trainable,
                    init: Init::GlorotUniform {
                        fan_in: cin,
                        fan_out: c.filters,
                    },
                });
                if c.use_bias {
                    out.push(ParamInfo {
                        name: format!("{}/bias", c.name),
                        shape: vec![c.filters],
                        trainable: c.trainable,
                        init: Init::Zeros,
                    });
                }
            }
            LayerSpec::BatchNorm(b) => {
                let c = *shape.last().expect("non-empty shape");
                for (suffix, init, trainable) in [
                    ("gamma", Init::Ones, b.trainable),
                    ("beta", Init::Zeros, b.trainable),
                    ("moving_mean", Init::Zeros, false),
                    ("moving_variance", Init::Ones, false),
                ] {
                    out.push(ParamInfo {
                        name: format!("{}/{suffix}", b.name),
                        shape: vec![c],
                        trainable,
                        init,
                    });
                }
            }
            LayerSpec::Dense(d) => {
                let [din] = shape[..] else {
                    return Err(Error::shape("dense", "rank", "1 (flattened)", shape.len()));
                };
                out.push(ParamInfo {
                    name: format!("{}/kernel", d.name),
                    shape: vec![din, d.units],
                    trainable: d.trainable,
                    init: Init::GlorotUniform {
                        fan_in: din,
                        fan_out: d.units,
                    },
                });
                out.push(ParamInfo {
                    name: format!("{}/bias", d.name),
                    shape: vec![d.units],
                    trainable: d.trainable,
                    init: Init::Zeros,
                });
            }
            LayerSpec::Residual { branch, shortcut, .. } => {
                collect_params(branch, &shape, out)?;
                collect_params(shortcut, &shape, out)?;
            }
            _ => {}
        }
        shape = layer_output_shape(layer, &shape)?;
    }
    Ok(shape)
}

impl ModelSpec {
    /// Checks that every layer's input shape composes and that the model
    /// ends in a softmax over `num_classes`.
    pub fn validate(&self) -> Result<()> {
        let out = self.output_shape()?;
        if out != vec![self.num_classes] {
            return Err(Error::shape("model", "output", self.num_classes, format!("{out:?}")));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::Validation(format!("model {} must end with softmax", self.name)));
        }
        let params = self.params()?;
        let mut names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate parameter name {}", w[0])));
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Shape> {
        stack_output_shape(&self.layers, &self.input_shape.to_vec())
    }

    /// Per-sample output shape after each top-level layer.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = layer_output_shape(l, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// All parameters in forward order.
    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        let mut out = Vec::new();
        collect_params(&self.layers, &self.input_shape.to_vec(), &mut out)?;
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.params()?.iter().map(ParamInfo::numel).sum())
    }

    pub fn trainable_param_count(&self) -> Result<usize> {
        Ok(self.params()?.iter().filter(|p| p.trainable).map(ParamInfo::numel).sum())
    }

    /// Index of the first top-level layer of the given kind.
    pub fn find_layer(&self, pred: impl Fn(&LayerSpec) -> bool) -> Option<usize> {
        self.layers.iter().position(pred)
    }
}
