//! The custom CNN and the three transfer-learning backbones.

use std::fmt;
use std::str::FromStr;

use super::spec::{Activation, ConvSpec, LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::tensor::Padding;

/// Shape knobs of the custom CNN. The default is the full-size network; the
/// smoke tests shrink the input and filter widths but keep the layer kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomCnnConfig {
    pub input: [usize; 3],
    /// One conv/pool/dropout block per entry.
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub dense_units: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for CustomCnnConfig {
    fn default() -> Self {
        CustomCnnConfig {
            input: [224, 224, 1],
            filters: vec![32, 64, 128, 256],
            kernel: 3,
            dense_units: 256,
            dropout: 0.3,
            num_classes: NUM_CLASSES,
        }
    }
}

/// Full-size custom CNN on 224x224x1 input.
pub fn build_custom_cnn() -> ModelSpec {
    build_custom_cnn_with(&CustomCnnConfig::default()).expect("default config is valid")
}

/// `[conv+relu, maxpool 2x2, dropout] * blocks, flatten, dense+relu,
/// dropout, dense, softmax`, all convolutions unpadded.
pub fn build_custom_cnn_with(cfg: &CustomCnnConfig) -> Result<ModelSpec> {
    if cfg.filters.is_empty() {
        return Err(Error::Param("custom CNN needs at least one conv block".into()));
    }
    let mut layers = Vec::new();
    for (i, &f) in cfg.filters.iter().enumerate() {
        layers.push(LayerSpec::conv(ConvSpec::new(format!("conv{}", i + 1), f, cfg.kernel).relu()));
        layers.push(LayerSpec::maxpool2());
        layers.push(LayerSpec::Dropout { rate: cfg.dropout });
    }
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense("fc1", cfg.dense_units, Activation::Relu),
        LayerSpec::Dropout { rate: cfg.dropout },
        LayerSpec::dense("predictions", cfg.num_classes, Activation::Linear),
        LayerSpec::Softmax,
    ]);
    let spec = ModelSpec {
        name: "custom_cnn".into(),
        input_shape: cfg.input,
        num_classes: cfg.num_classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Vgg16,
    Resnet50,
    Xception,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Vgg16 => "vgg16",
            Backbone::Resnet50 => "resnet50",
            Backbone::Xception => "xception",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg16" => Ok(Backbone::Vgg16),
            "resnet50" => Ok(Backbone::Resnet50),
            "xception" => Ok(Backbone::Xception),
            other => Err(Error::Param(format!("unknown architecture {other:?} (vgg16, resnet50, xception)"))),
        }
    }
}

const RESNET_BN_EPS: f64 = 1.001e-5;
const XCEPTION_BN_EPS: f64 = 1e-3;

fn frozen(mut layers: Vec<LayerSpec>) -> Vec<LayerSpec> {
    layers.iter_mut().for_each(|l| l.set_trainable(false));
    layers
}

fn vgg16() -> Vec<LayerSpec> {
    let blocks = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut layers = Vec::new();
    for (b, &(filters, convs)) in blocks.iter().enumerate() {
        let mut block: Vec<LayerSpec> = (1..=convs)
            .map(|i| LayerSpec::conv(ConvSpec::new(format!("block{}_conv{i}", b + 1), filters, 3).same().relu()))
            .collect();
        block.push(LayerSpec::maxpool2());
        // only the last block stays trainable
        layers.extend(if b + 1 < blocks.len() { frozen(block) } else { block });
    }
    layers
}

fn resnet_block(stage: usize, block: usize, filters: usize, stride: usize, project: bool) -> LayerSpec {
    let p = format!("conv{stage}_block{block}");
    let bn = |s: &str| LayerSpec::batch_norm(format!("{p}_{s}_bn"), RESNET_BN_EPS);
    let branch = vec![
        LayerSpec::conv(ConvSpec::new(format!("{p}_1_conv"), filters, 1).stride(stride)),
        bn("1"),
        LayerSpec::Relu,
        LayerSpec::conv(ConvSpec::new(format!("{p}_2_conv"), filters, 3).same()),
        bn("2"),
        LayerSpec::Relu,
        LayerSpec::conv(ConvSpec::new(format!("{p}_3_conv"), 4 * filters, 1)),
        bn("3"),
    ];
    let shortcut = if project {
        vec![
            LayerSpec::conv(ConvSpec::new(format!("{p}_0_conv"), 4 * filters, 1).stride(stride)),
            bn("0"),
        ]
    } else {
        Vec::new()
    };
    LayerSpec::Residual {
        name: p,
        branch,
        shortcut,
        branch_activation: Activation::Relu,
    }
}

fn resnet50() -> Vec<LayerSpec> {
    let mut layers = frozen(vec![
        LayerSpec::conv(ConvSpec::new("conv1_conv", 64, 7).stride(2).same()),
        LayerSpec::batch_norm("conv1_bn", RESNET_BN_EPS),
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            window: 3,
            stride: 2,
            padding: Padding::Same,
        },
    ]);
    for (stage, filters, blocks, stride) in [(2, 64, 3, 1), (3, 128, 4, 2), (4, 256, 6, 2), (5, 512, 3, 2)] {
        let stage_layers: Vec<LayerSpec> = (1..=blocks)
            .map(|b| resnet_block(stage, b, filters, if b == 1 { stride } else { 1 }, b == 1))
            .collect();
        layers.extend(if stage < 5 { frozen(stage_layers) } else { stage_layers });
    }
    layers
}

fn sep(name: String, filters: usize) -> LayerSpec {
    LayerSpec::SeparableConv2d(ConvSpec::new(name, filters, 3).same().no_bias())
}

fn xbn(name: String) -> LayerSpec {
    LayerSpec::batch_norm(name, XCEPTION_BN_EPS)
}

fn xception_pool() -> LayerSpec {
    LayerSpec::MaxPool {
        window: 3,
        stride: 2,
        padding: Padding::Same,
    }
}

fn xception_down_block(block: usize, f1: usize, f2: usize, leading_relu: bool) -> LayerSpec {
    let p = format!("block{block}");
    let mut branch = Vec::new();
    if leading_relu {
        branch.push(LayerSpec::Relu);
    }
    branch.extend([
        sep(format!("{p}_sepconv1"), f1),
        xbn(format!("{p}_sepconv1_bn")),
        LayerSpec::Relu,
        sep(format!("{p}_sepconv2"), f2),
        xbn(format!("{p}_sepconv2_bn")),
        xception_pool(),
    ]);
    LayerSpec::Residual {
        name: p.clone(),
        branch,
        shortcut: vec![
            LayerSpec::conv(ConvSpec::new(format!("{p}_shortcut"), f2, 1).stride(2).same().no_bias()),
            xbn(format!("{p}_shortcut_bn")),
        ],
        branch_activation: Activation::Linear,
    }
}

fn xception() -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::conv(ConvSpec::new("block1_conv1", 32, 3).stride(2).no_bias()),
        xbn("block1_conv1_bn".into()),
        LayerSpec::Relu,
        LayerSpec::conv(ConvSpec::new("block1_conv2", 64, 3).no_bias()),
        xbn("block1_conv2_bn".into()),
        LayerSpec::Relu,
        xception_down_block(2, 128, 128, false),
        xception_down_block(3, 256, 256, true),
        xception_down_block(4, 728, 728, true),
    ];
    for block in 5..=12 {
        let p = format!("block{block}");
        let branch = (1..=3)
            .flat_map(|i| {
                [
                    LayerSpec::Relu,
                    sep(format!("{p}_sepconv{i}"), 728),
                    xbn(format!("{p}_sepconv{i}_bn")),
                ]
            })
            .collect();
        layers.push(LayerSpec::Residual {
            name: p,
            branch,
            shortcut: Vec::new(),
            branch_activation: Activation::Linear,
        });
    }
    layers.push(xception_down_block(13, 728, 1024, true));
    let mut layers = frozen(layers);
    layers.extend([
        sep("block14_sepconv1".into(), 1536),
        xbn("block14_sepconv1_bn".into()),
        LayerSpec::Relu,
        sep("block14_sepconv2".into(), 2048),
        xbn("block14_sepconv2_bn".into()),
        LayerSpec::Relu,
    ]);
    layers
}

/// Backbone layers only (no pooling head), with the freeze policy applied:
/// everything but the final block is frozen.
pub fn backbone_layers(arch: Backbone) -> Vec<LayerSpec> {
    match arch {
        Backbone::Vgg16 => vgg16(),
        Backbone::Resnet50 => resnet50(),
        Backbone::Xception => xception(),
    }
}

/// Backbone on a 224x224x3 input with the classification head.
pub fn build_pretrained(arch: Backbone) -> ModelSpec {
    build_pretrained_with(arch, 224, NUM_CLASSES).expect("224x224 input is valid for every backbone")
}

/// Head: global average pool, dense 256 + ReLU, dense to `num_classes`,
/// softmax. The grayscale input is expected replicated across 3 channels.
pub fn build_pretrained_with(arch: Backbone, input_size: usize, num_classes: usize) -> Result<ModelSpec> {
    let mut layers = backbone_layers(arch);
    layers.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::dense("head_dense", 256, Activation::Relu),
        LayerSpec::dense("predictions", num_classes, Activation::Linear),
        LayerSpec::Softmax,
    ]);
    let spec = ModelSpec {
        name: arch.name().into(),
        input_shape: [input_size, input_size, 3],
        num_classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::stack_output_shape;

    #[test]
    fn custom_cnn_shapes_and_count() {
        let spec = build_custom_cnn();
        let shapes = spec.layer_shapes().unwrap();
        let spatial: Vec<usize> = shapes.iter().filter(|s| s.len() == 3).map(|s| s[0]).collect();
        assert_eq!(spatial, vec![222, 111, 111, 109, 54, 54, 52, 26, 26, 24, 12, 12]);
        let flat = spec.find_layer(|l| matches!(l, LayerSpec::Flatten)).unwrap();
        assert_eq!(shapes[flat], vec![36_864]);
        assert_eq!(spec.trainable_param_count().unwrap(), 9_826_308);
        assert_eq!(spec.param_count().unwrap(), 9_826_308);
    }

    #[test]
    fn backbone_output_shapes() {
        let input = vec![224, 224, 3];
        assert_eq!(stack_output_shape(&backbone_layers(Backbone::Vgg16), &input).unwrap(), vec![7, 7, 512]);
        assert_eq!(stack_output_shape(&backbone_layers(Backbone::Resnet50), &input).unwrap(), vec![7, 7, 2048]);
        assert_eq!(stack_output_shape(&backbone_layers(Backbone::Xception), &input).unwrap(), vec![7, 7, 2048]);
    }

    fn backbone_params(arch: Backbone) -> usize {
        let spec = build_pretrained(arch);
        let head: usize = spec
            .params()
            .unwrap()
            .iter()
            .filter(|p| p.name.starts_with("head_dense") || p.name.starts_with("predictions"))
            .map(|p| p.numel())
            .sum();
        spec.param_count().unwrap() - head
    }

    #[test]
    fn backbone_parameter_counts_match_published_architectures() {
        assert_eq!(backbone_params(Backbone::Vgg16), 14_714_688);
        assert_eq!(backbone_params(Backbone::Resnet50), 23_587_712);
        assert_eq!(backbone_params(Backbone::Xception), 20_861_480);
    }

    #[test]
    fn only_last_block_and_head_are_trainable() {
        let vgg = build_pretrained(Backbone::Vgg16);
        for p in vgg.params().unwrap() {
            let want = p.name.starts_with("block5") || p.name.starts_with("head") || p.name.starts_with("predictions");
            assert_eq!(p.trainable, want, "{}", p.name);
        }
        let res = build_pretrained(Backbone::Resnet50);
        for p in res.params().unwrap() {
            let last = p.name.starts_with("conv5") || p.name.starts_with("head") || p.name.starts_with("predictions");
            let stat = p.name.ends_with("moving_mean") || p.name.ends_with("moving_variance");
            assert_eq!(p.trainable, last && !stat, "{}", p.name);
        }
        let x = build_pretrained(Backbone::Xception);
        for p in x.params().unwrap() {
            let last = p.name.starts_with("block14") || p.name.starts_with("head") || p.name.starts_with("predictions");
            let stat = p.name.ends_with("moving_mean") || p.name.ends_with("moving_variance");
            assert_eq!(p.trainable, last && !stat, "{}", p.name);
        }
    }

    #[test]
    fn unknown_arch_is_param_error() {
        assert!(matches!("alexnet".parse::<Backbone>(), Err(Error::Param(_))));
        assert_eq!("ResNet50".parse::<Backbone>().unwrap(), Backbone::Resnet50);
    }
}
