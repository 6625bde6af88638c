//! A `ModelSpec` bound to parameter values, evaluated on the autodiff tape.

use std::collections::HashMap;

use super::spec::{Activation, Init, LayerSpec, ModelSpec};
use super::streams;
use crate::archive::{Archive, Payload};
use crate::error::{Error, Result};
use crate::tensor::{Mode, Real, RngState, Tape, Tensor, Var};

/// Archive kind written by [`Model::to_archive`].
pub const WEIGHTS_KIND: &str = "weights";

/// Rows per chunk for inference and feature extraction.
const INFER_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    trained: bool,
}

/// One recorded forward pass. Holds the tape so the caller can run backward.
pub struct ForwardPass<T: Real> {
    tape: Tape<T>,
    param_vars: Vec<Var>,
    trainable: Vec<bool>,
    taps: Vec<Var>,
    output: Var,
}

impl<T: Real> ForwardPass<T> {
    /// `N x classes` softmax output.
    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.output)
    }

    /// Output of top-level layer `layer`.
    pub fn layer_output(&self, layer: usize) -> Option<&Tensor<T>> {
        self.taps.get(layer).map(|&v| self.tape.value(v))
    }

    /// Mean cross-entropy against `labels` and one gradient slot per model
    /// parameter; frozen parameters get `None`.
    pub fn backward_scce(mut self, labels: &[usize]) -> Result<(T, Vec<Option<Tensor<T>>>)> {
        let loss = self.tape.scce(self.output, labels)?;
        let value = self.tape.value(loss).data()[0];
        let mut grads = self.tape.backward(loss)?;
        let out = self
            .param_vars
            .iter()
            .zip(&self.trainable)
            .map(|(&v, &t)| if t { grads.take(v) } else { None })
            .collect();
        Ok((value, out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Input of the final dense layer (256-d for the custom CNN, after its
    /// last dropout).
    Penultimate,
    /// Output of the flatten layer (36,864-d for the full custom CNN).
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features<T = f32> {
    /// `N x D`.
    pub matrix: Tensor<T>,
    /// Set when the model was never fitted nor loaded from weights.
    pub untrained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T = f32> {
    pub labels: Vec<usize>,
    /// `N x classes`.
    pub probabilities: Tensor<T>,
}

/// Row-wise argmax of an `N x C` matrix; ties go to the lowest index.
pub fn argmax_rows<T: Real>(m: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, c] = m.dims2("argmax")?;
    Ok(m.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

fn init_tensor<T: Real>(shape: &[usize], init: Init, rng: &mut RngState) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::GlorotUniform { fan_in, fan_out } => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.uniform(-limit, limit)))
        }
    }
}

struct Ctx<'a, T: Real> {
    tape: Tape<T>,
    vars: &'a [Var],
    index: &'a HashMap<String, usize>,
    mode: Mode,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&self, layer: &str, suffix: &str) -> Result<Var> {
        let name = format!("{layer}/{suffix}");
        self.index
            .get(&name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Validation(format!("model has no parameter {name}")))
    }

    fn act(&mut self, x: Var, a: Activation) -> Var {
        match a {
            Activation::Linear => x,
            Activation::Relu => self.tape.relu(x),
        }
    }

    fn layer(&mut self, layer: &LayerSpec, x: Var, rng: &mut RngState) -> Result<Var> {
        Ok(match layer {
            LayerSpec::Conv2d(c) => {
                let k = self.p(&c.name, "kernel")?;
                let b = if c.use_bias { Some(self.p(&c.name, "bias")?) } else { None };
                let y = self.tape.conv2d(x, k, b, c.padding, c.stride)?;
                self.act(y, c.activation)
            }
            LayerSpec::SeparableConv2d(c) => {
                let dw = self.p(&c.name, "depthwise")?;
                let pw = self.p(&c.name, "pointwise")?;
                let b = if c.use_bias { Some(self.p(&c.name, "bias")?) } else { None };
                let y = self.tape.separable_conv2d(x, dw, pw, b, c.padding, c.stride)?;
                self.act(y, c.activation)
            }
            LayerSpec::BatchNorm(b) => {
                let g = self.p(&b.name, "gamma")?;
                let be = self.p(&b.name, "beta")?;
                let m = self.p(&b.name, "moving_mean")?;
                let v = self.p(&b.name, "moving_variance")?;
                self.tape.batch_norm(x, g, be, m, v, b.eps)?
            }
            LayerSpec::MaxPool { window, stride, padding } => self.tape.maxpool(x, *window, *stride, *padding)?,
            LayerSpec::Relu => self.tape.relu(x),
            LayerSpec::Dropout { rate } => self.tape.dropout(x, *rate, self.mode, rng)?,
            LayerSpec::Flatten => self.tape.flatten(x)?,
            LayerSpec::GlobalAvgPool => self.tape.global_avg_pool(x)?,
            LayerSpec::Dense(d) => {
                let w = self.p(&d.name, "kernel")?;
                let b = self.p(&d.name, "bias")?;
                let y = self.tape.dense(x, w, Some(b))?;
                self.act(y, d.activation)
            }
            LayerSpec::Softmax => self.tape.softmax(x)?,
            LayerSpec::Residual {
                branch,
                shortcut,
                branch_activation,
                ..
            } => {
                let mut h = x;
                for l in branch {
                    h = self.layer(l, h, rng)?;
                }
                let h = self.act(h, *branch_activation);
                let mut s = x;
                for l in shortcut {
                    s = self.layer(l, s, rng)?;
                }
                self.tape.add(h, s)?
            }
        })
    }
}

impl<T: Real> Model<T> {
    /// Validates `spec` and initialises every parameter from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngState::derive(seed, streams::INIT);
        let params: Vec<Param<T>> = spec
            .params()?
            .into_iter()
            .map(|p| Param {
                value: init_tensor(&p.shape, p.init, &mut rng),
                name: p.name,
                trainable: p.trainable,
            })
            .collect();
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Model {
            spec,
            params,
            index,
            trained: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
            trained: self.trained,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, h, w, c] = x.dims4("model")?;
        let [eh, ew, ec] = self.spec.input_shape;
        for (axis, want, got) in [("height", eh, h), ("width", ew, w), ("channels", ec, c)] {
            if want != got {
                return Err(Error::shape("model", axis, want, got));
            }
        }
        Ok(())
    }

    /// Records a forward pass of the `N x H x W x C` batch `x`. In
    /// `Mode::Train` dropout draws from `rng` and trainable parameters are
    /// tracked for gradients.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &mut RngState) -> Result<ForwardPass<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let track = mode == Mode::Train;
        let param_vars: Vec<Var> =
            self.params.iter().map(|p| tape.leaf(p.value.clone(), track && p.trainable)).collect();
        let input = tape.leaf(x.clone(), false);
        let mut ctx = Ctx {
            tape,
            vars: &param_vars,
            index: &self.index,
            mode,
        };
        let mut taps = Vec::with_capacity(self.spec.layers.len());
        let mut h = input;
        for layer in &self.spec.layers {
            h = ctx.layer(layer, h, rng)?;
            taps.push(h);
        }
        let trainable = self.params.iter().map(|p| track && p.trainable).collect();
        Ok(ForwardPass {
            tape: ctx.tape,
            param_vars,
            trainable,
            taps,
            output: h,
        })
    }

    fn eval_chunks(&self, x: &Tensor<T>, layer: Option<usize>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let per = x.numel() / n.max(1);
        let mut rng = RngState::new(0);
        let mut data = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(INFER_CHUNK) {
            let rows = INFER_CHUNK.min(n - start);
            let mut shape = x.shape().to_vec();
            shape[0] = rows;
            let chunk = Tensor::new(shape, x.data()[start * per..(start + rows) * per].to_vec())?;
            let pass = self.forward(&chunk, Mode::Eval, &mut rng)?;
            let out = match layer {
                Some(l) => pass.layer_output(l).expect("layer index checked by caller"),
                None => pass.output(),
            };
            width = out.numel() / rows;
            data.extend_from_slice(out.data());
        }
        Tensor::new(vec![n, width], data)
    }

    /// Eval-mode softmax probabilities, `N x classes`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval_chunks(x, None)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Prediction<T>> {
        let probabilities = self.infer(x)?;
        Ok(Prediction {
            labels: argmax_rows(&probabilities)?,
            probabilities,
        })
    }

    /// Eval-mode activations at `source`, one row per sample.
    pub fn extract_features(&self, x: &Tensor<T>, source: FeatureSource) -> Result<Features<T>> {
        let layers = &self.spec.layers;
        let layer = match source {
            FeatureSource::Penultimate => {
                let last_dense = layers
                    .iter()
                    .rposition(|l| matches!(l, LayerSpec::Dense(_)))
                    .ok_or_else(|| Error::Validation(format!("model {} has no dense layer", self.spec.name)))?;
                if last_dense == 0 {
                    return Err(Error::Validation("final dense layer has no preceding layer".into()));
                }
                last_dense - 1
            }
            FeatureSource::Flatten => layers
                .iter()
                .position(|l| matches!(l, LayerSpec::Flatten))
                .ok_or_else(|| Error::Validation(format!("model {} has no flatten layer", self.spec.name)))?,
        };
        Ok(Features {
            matrix: self.eval_chunks(x, Some(layer))?,
            untrained: !self.trained,
        })
    }

    /// Every parameter as a little-endian f32 tensor.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(WEIGHTS_KIND);
        for p in &self.params {
            let data = p.value.data().iter().map(|v| v.as_f64() as f32).collect();
            a.insert(&p.name, p.value.shape().to_vec(), Payload::F32(data))?;
        }
        Ok(a)
    }

    /// Replaces every parameter from `archive`, or nothing: any missing
    /// tensor, dtype or shape mismatch aborts with the full problem list.
    /// Extra archive entries are ignored.
    pub fn load_weights(&mut self, archive: &Archive) -> Result<()> {
        self.load_weights_except(archive, |_| false)?;
        self.trained = true;
        Ok(())
    }

    /// Like [`Model::load_weights`], but parameters for which `optional`
    /// returns true may be absent from the archive and keep their current
    /// values. Used to start a backbone from a converted checkpoint that has
    /// no classification head. Returns the number of tensors loaded.
    pub fn load_weights_except(&mut self, archive: &Archive, optional: impl Fn(&str) -> bool) -> Result<usize> {
        let mut problems = Vec::new();
        let mut loaded = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let Some(entry) = archive.get(&p.name) else {
                if !optional(&p.name) {
                    problems.push(format!("missing tensor {}", p.name));
                }
                continue;
            };
            if entry.shape != p.value.shape() {
                problems.push(format!("{}: expected shape {:?}, found {:?}", p.name, p.value.shape(), entry.shape));
                continue;
            }
            match archive.f32s(&p.name) {
                Ok((_, data)) => loaded.push((i, Tensor::new(entry.shape.clone(), data.iter().map(|&v| T::lit(v as f64)).collect())?)),
                Err(Error::Archive(mut e)) => problems.append(&mut e),
                Err(e) => return Err(e),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Archive(problems));
        }
        let count = loaded.len();
        for (i, v) in loaded {
            self.params[i].value = v;
        }
        Ok(count)
    }

    pub fn from_archive(spec: ModelSpec, archive: &Archive) -> Result<Self> {
        let mut m = Model::new(spec, 0)?;
        m.load_weights(archive)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_custom_cnn, build_custom_cnn_with, build_pretrained_with, Backbone, CustomCnnConfig};

    fn tiny() -> ModelSpec {
        build_custom_cnn_with(&CustomCnnConfig {
            input: [12, 12, 1],
            filters: vec![2, 3],
            dense_units: 5,
            ..CustomCnnConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn full_cnn_forward_on_zero_image_sums_to_one() {
        let m: Model = Model::new(build_custom_cnn(), 1).unwrap();
        let p = m.infer(&Tensor::zeros(&[1, 224, 224, 1])).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert!((p.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn pretrained_heads_sum_to_one() {
        for arch in [Backbone::Vgg16, Backbone::Resnet50, Backbone::Xception] {
            let m: Model = Model::new(build_pretrained_with(arch, 32, 4).unwrap(), 2).unwrap();
            let x = Tensor::from_fn(&[2, 32, 32, 3], |i| (i % 7) as f32 / 7.0);
            let p = m.infer(&x).unwrap();
            for row in p.data().chunks(4) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5, "{arch}");
            }
        }
    }

    #[test]
    fn wrong_input_shape_names_axis() {
        let m: Model = Model::new(tiny(), 1).unwrap();
        match m.infer(&Tensor::zeros(&[1, 12, 13, 1])) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(vec![2, 4], vec![0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 0]);
    }

    #[test]
    fn batch_prediction_equals_single() {
        let m: Model = Model::new(tiny(), 3).unwrap();
        let x = Tensor::from_fn(&[5, 12, 12, 1], |i| ((i * 37) % 11) as f32 / 11.0);
        let batch = m.predict(&x).unwrap();
        for i in 0..5 {
            let xi = Tensor::new(vec![1, 12, 12, 1], x.data()[i * 144..(i + 1) * 144].to_vec()).unwrap();
            let one = m.predict(&xi).unwrap();
            assert_eq!(one.labels[0], batch.labels[i]);
            assert!(one.probabilities.data().iter().zip(&batch.probabilities.data()[i * 4..]).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn features_are_deterministic_and_flagged() {
        let m: Model = Model::new(tiny(), 4).unwrap();
        let img: Vec<f32> = (0..144).map(|i| (i % 5) as f32 / 5.0).collect();
        let x = Tensor::new(vec![2, 12, 12, 1], [img.clone(), img].concat()).unwrap();
        let a = m.extract_features(&x, FeatureSource::Penultimate).unwrap();
        let b = m.extract_features(&x, FeatureSource::Penultimate).unwrap();
        assert_eq!(a, b);
        assert!(a.untrained);
        assert_eq!(a.matrix.shape(), &[2, 5]);
        assert_eq!(a.matrix.data()[..5], a.matrix.data()[5..]);
        let wide = m.extract_features(&x, FeatureSource::Flatten).unwrap();
        assert_eq!(wide.matrix.shape(), &[2, 3]);
    }

    #[test]
    fn archive_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model = Model::new(tiny(), 5).unwrap();
        let stem = dir.path().join("w");
        m.to_archive().unwrap().save(&stem).unwrap();
        let back = Model::<f32>::from_archive(tiny(), &Archive::load(&stem).unwrap()).unwrap();
        let x = Tensor::from_fn(&[3, 12, 12, 1], |i| (i % 13) as f32 / 13.0);
        assert_eq!(m.infer(&x).unwrap(), back.infer(&x).unwrap());
        assert!(back.is_trained());
    }

    #[test]
    fn load_reports_every_problem_atomically() {
        let mut m: Model = Model::new(tiny(), 6).unwrap();
        let before = m.params().to_vec();
        match m.load_weights(&Archive::new(WEIGHTS_KIND)) {
            Err(Error::Archive(p)) => assert_eq!(p.len(), m.params().len()),
            other => panic!("{other:?}"),
        }
        let mut a = Archive::new(WEIGHTS_KIND);
        for p in m.params() {
            let mut shape = p.value.shape().to_vec();
            if p.name == "fc1/bias" {
                shape[0] += 1;
            }
            let n = shape.iter().product();
            a.insert(&p.name, shape, Payload::F32(vec![0.5; n])).unwrap();
        }
        match m.load_weights(&a) {
            Err(Error::Archive(p)) => {
                assert_eq!(p.len(), 1);
                assert!(p[0].contains("fc1/bias"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let m: Model = Model::new(build_pretrained_with(Backbone::Vgg16, 32, 4).unwrap(), 7).unwrap();
        let x = Tensor::from_fn(&[2, 32, 32, 3], |i| (i % 3) as f32);
        let pass = m.forward(&x, Mode::Train, &mut RngState::new(1)).unwrap();
        let (_, grads) = pass.backward_scce(&[0, 1]).unwrap();
        for (p, g) in m.params().iter().zip(&grads) {
            assert_eq!(p.trainable, g.is_some(), "{}", p.name);
        }
    }

    #[test]
    fn resnet_zero_branch_is_identity_per_block() {
        let spec = build_pretrained_with(Backbone::Resnet50, 32, 4).unwrap();
        let mut m: Model<f64> = Model::new(spec, 8).unwrap();
        let zero: Vec<String> = m
            .params()
            .iter()
            .filter(|p| p.name.contains("_block") && !p.name.contains("_0_") && (p.name.ends_with("kernel") || p.name.ends_with("bias") || p.name.ends_with("beta")))
            .map(|p| p.name.clone())
            .collect();
        for name in zero {
            let p = m.param_mut(&name).unwrap();
            p.value = Tensor::zeros(p.value.shape());
        }
        let x = Tensor::from_fn(&[1, 32, 32, 3], |i| (i % 17) as f64 / 17.0);
        let pass = m.forward(&x, Mode::Eval, &mut RngState::new(0)).unwrap();
        // identity blocks (block >= 2) must pass their input through unchanged
        let layers = &m.spec().layers;
        for (i, l) in layers.iter().enumerate() {
            if let LayerSpec::Residual { name, shortcut, .. } = l {
                if shortcut.is_empty() {
                    assert_eq!(pass.layer_output(i).unwrap(), pass.layer_output(i - 1).unwrap(), "{name}");
                }
            }
        }
    }
}
