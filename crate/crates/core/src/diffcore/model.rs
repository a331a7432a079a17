//! Feature extractor, label predictor and style discriminator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Shape of one raw input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputShape {
    Vector(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn numel(&self) -> usize {
        match *self {
            InputShape::Vector(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Affine { out: usize },
    Relu,
    Conv2d { out_channels: usize, kernel: usize },
    MeanPool2,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MeanPool2 => "mean_pool2",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Per-sample activation shape between extractor layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Flat(usize),
    Spatial { channels: usize, height: usize, width: usize },
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Flat(w) => w,
            ActShape::Spatial { channels, height, width } => channels * height * width,
        }
    }

    /// `(channels, spatial positions)`; a flat activation is one channel
    /// whose positions are its units.
    pub fn channels_and_extent(&self) -> (usize, usize) {
        match *self {
            ActShape::Flat(w) => (1, w),
            ActShape::Spatial { channels, height, width } => (channels, height * width),
        }
    }
}

/// `F_f` as a layer list, followed by linear softmax heads for classes and styles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: InputShape,
    pub extractor: Vec<LayerSpec>,
    pub classes: usize,
}

impl Architecture {
    /// Output shape of every extractor layer, validating the chain.
    pub fn layer_shapes(&self) -> Result<Vec<ActShape>> {
        let mut cur = match self.input {
            InputShape::Vector(d) => ActShape::Flat(d),
            InputShape::Image { channels, height, width } => ActShape::Spatial { channels, height, width },
        };
        if cur.numel() == 0 {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        let mut shapes = Vec::with_capacity(self.extractor.len());
        for (i, layer) in self.extractor.iter().enumerate() {
            let err = |message: String| Error::Layer {
                layer: i,
                kind: layer.kind(),
                message,
            };
            cur = match (*layer, cur) {
                (LayerSpec::Affine { out }, ActShape::Flat(_)) => {
                    if out == 0 {
                        return Err(err("output width must be positive".into()));
                    }
                    ActShape::Flat(out)
                }
                (LayerSpec::Affine { .. }, s) => {
                    return Err(err(format!("expects flat input, got spatial {s:?}; insert a flatten layer")))
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Conv2d { out_channels, kernel }, ActShape::Spatial { height, width, .. }) => {
                    if out_channels == 0 || kernel == 0 {
                        return Err(err("channels and kernel must be positive".into()));
                    }
                    if kernel > height || kernel > width {
                        return Err(err(format!("kernel {kernel} exceeds input {height}x{width}")));
                    }
                    ActShape::Spatial {
                        channels: out_channels,
                        height: height - kernel + 1,
                        width: width - kernel + 1,
                    }
                }
                (LayerSpec::Conv2d { .. }, s) => return Err(err(format!("expects spatial input, got {s:?}"))),
                (LayerSpec::MeanPool2, ActShape::Spatial { channels, height, width }) => {
                    if height < 2 || width < 2 {
                        return Err(err(format!("needs at least 2x2 input, got {height}x{width}")));
                    }
                    ActShape::Spatial {
                        channels,
                        height: height / 2,
                        width: width / 2,
                    }
                }
                (LayerSpec::MeanPool2, s) => return Err(err(format!("expects spatial input, got {s:?}"))),
                (LayerSpec::Flatten, s) => ActShape::Flat(s.numel()),
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Width `d` of the extracted feature.
    pub fn feature_dim(&self) -> Result<usize> {
        match self.layer_shapes()?.last() {
            Some(ActShape::Flat(d)) => Ok(*d),
            Some(s) => Err(Error::Config(format!(
                "extractor must end in a flat feature, ends in {s:?}"
            ))),
            None => match self.input {
                InputShape::Vector(d) => Ok(d),
                InputShape::Image { .. } => Err(Error::Config("image input needs a non-empty extractor".into())),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_dim()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    /// Layer indices tapped for style statistics when none are configured:
    /// the outputs of the first two activation layers, else the first two layers.
    pub fn default_style_taps(&self) -> Vec<usize> {
        let relus: Vec<usize> = self
            .extractor
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(i, _)| i)
            .take(2)
            .collect();
        if relus.is_empty() {
            (0..self.extractor.len().min(2)).collect()
        } else {
            relus
        }
    }
}

/// Named tensors forming one parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Registers every tensor as an untracked constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Collects gradients for variables returned by [`ParamSet::bind`];
    /// parameters the loss never reached get zeros.
    pub fn grads(&self, vars: &[Var], grads: &Gradients) -> ParamGrads {
        ParamGrads(
            vars.iter()
                .zip(&self.tensors)
                .map(|(&v, t)| Some(grads.get_or_zeros(v, t.shape())))
                .collect(),
        )
    }
}

/// Gradients aligned with a [`ParamSet`]; `None` marks a missing entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

/// The three disjoint parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta_f: ParamSet,
    pub theta_y: ParamSet,
    pub theta_s: ParamSet,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Weight `[d_in, d_out]` and zero bias for a linear head.
pub fn init_affine(rng: &mut impl Rng, prefix: &str, d_in: usize, d_out: usize) -> ParamSet {
    let mut set = ParamSet::default();
    set.push(format!("{prefix}.weight"), glorot(rng, d_in, d_out, vec![d_in, d_out]));
    set.push(format!("{prefix}.bias"), Tensor::zeros(vec![d_out]));
    set
}

impl ModelParams {
    /// Uniform Glorot weights and zero biases; `styles` sets the discriminator width.
    pub fn init(arch: &Architecture, styles: usize, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        if styles == 0 {
            return Err(Error::Config("style count must be at least 1".into()));
        }
        let shapes = arch.layer_shapes()?;
        let mut theta_f = ParamSet::default();
        let mut prev = match arch.input {
            InputShape::Vector(d) => ActShape::Flat(d),
            InputShape::Image { channels, height, width } => ActShape::Spatial { channels, height, width },
        };
        for (i, (layer, shape)) in arch.extractor.iter().zip(&shapes).enumerate() {
            match *layer {
                LayerSpec::Affine { out } => {
                    let d_in = prev.numel();
                    theta_f.push(format!("f.{i}.weight"), glorot(rng, d_in, out, vec![d_in, out]));
                    theta_f.push(format!("f.{i}.bias"), Tensor::zeros(vec![out]));
                }
                LayerSpec::Conv2d { out_channels, kernel } => {
                    let (c_in, _) = prev.channels_and_extent();
                    let area = kernel * kernel;
                    theta_f.push(
                        format!("f.{i}.kernel"),
                        glorot(rng, c_in * area, out_channels * area, vec![out_channels, c_in, kernel, kernel]),
                    );
                    theta_f.push(format!("f.{i}.bias"), Tensor::zeros(vec![out_channels]));
                }
                _ => {}
            }
            prev = *shape;
        }
        let d = arch.feature_dim()?;
        Ok(Self {
            theta_f,
            theta_y: init_affine(rng, "y", d, arch.classes),
            theta_s: init_affine(rng, "s", d, styles),
        })
    }

    pub fn styles(&self) -> usize {
        self.theta_s.tensors()[1].len()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            f: self.theta_f.bind(tape),
            y: self.theta_y.bind(tape),
            s: self.theta_s.bind(tape),
        }
    }
}

/// Tape variables for each parameter group.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub f: Vec<Var>,
    pub y: Vec<Var>,
    pub s: Vec<Var>,
}

/// Outputs of every extractor layer plus the final feature.
#[derive(Clone, Debug)]
pub struct ExtractorTrace {
    pub layers: Vec<Var>,
    pub shapes: Vec<ActShape>,
    pub features: Var,
}

/// Places a `[batch, D]` input on the tape, reshaped for the first layer.
pub fn input_var(tape: &mut Tape, arch: &Architecture, x: &Tensor) -> Result<Var> {
    let d = arch.input.numel();
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(Error::shape("model input", &[x.shape()[0], d], x.shape()));
    }
    let batch = x.shape()[0];
    let v = tape.constant(x.clone());
    match arch.input {
        InputShape::Vector(_) => Ok(v),
        InputShape::Image { channels, height, width } => tape.reshape(v, vec![batch, channels, height, width]),
    }
}

pub fn run_extractor(tape: &mut Tape, arch: &Architecture, theta_f: &[Var], input: Var) -> Result<ExtractorTrace> {
    let shapes = arch.layer_shapes()?;
    let batch = tape.value(input).rows();
    let mut cur = input;
    let mut params = theta_f.iter();
    let mut next = |i: usize, kind: &'static str| {
        params.next().copied().ok_or(Error::Layer {
            layer: i,
            kind,
            message: "missing parameters".into(),
        })
    };
    let mut layers = Vec::with_capacity(arch.extractor.len());
    for (i, layer) in arch.extractor.iter().enumerate() {
        let wrap = |e: Error| match e {
            Error::Shape { .. } | Error::Contract(_) => Error::Layer {
                layer: i,
                kind: layer.kind(),
                message: e.to_string(),
            },
            other => other,
        };
        cur = match *layer {
            LayerSpec::Affine { .. } => {
                let w = next(i, "affine")?;
                let b = next(i, "affine")?;
                let z = tape.matmul(cur, w).map_err(wrap)?;
                tape.add_bias(z, b).map_err(wrap)?
            }
            LayerSpec::Relu => tape.relu(cur),
            LayerSpec::Conv2d { .. } => {
                let k = next(i, "conv2d")?;
                let b = next(i, "conv2d")?;
                tape.conv2d(cur, k, b).map_err(wrap)?
            }
            LayerSpec::MeanPool2 => tape.mean_pool2(cur).map_err(wrap)?,
            LayerSpec::Flatten => {
                let width = tape.value(cur).row_len();
                tape.reshape(cur, vec![batch, width]).map_err(wrap)?
            }
        };
        layers.push(cur);
    }
    Ok(ExtractorTrace {
        layers,
        shapes,
        features: cur,
    })
}

/// Logits of a linear head `[weight, bias]`.
pub fn head_logits(tape: &mut Tape, head: &[Var], features: Var) -> Result<Var> {
    let [w, b] = head else {
        return Err(Error::Contract(format!("linear head needs 2 parameters, got {}", head.len())));
    };
    let z = tape.matmul(features, *w)?;
    tape.add_bias(z, *b)
}

/// Extracted features `[batch, d]` and class probabilities `[batch, C]`.
pub fn forward(params: &ModelParams, arch: &Architecture, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if !x.is_finite() {
        return Err(Error::Contract("model input contains non-finite values".into()));
    }
    let mut tape = Tape::new();
    let f = params.theta_f.bind_frozen(&mut tape);
    let y = params.theta_y.bind_frozen(&mut tape);
    let input = input_var(&mut tape, arch, x)?;
    let trace = run_extractor(&mut tape, arch, &f, input)?;
    let logits = head_logits(&mut tape, &y, trace.features)?;
    let probs = tape.softmax(logits)?;
    Ok((tape.value(trace.features).clone(), tape.value(probs).clone()))
}

/// Features only, without building a differentiable graph.
pub fn extract_features(params: &ModelParams, arch: &Architecture, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = params.theta_f.bind_frozen(&mut tape);
    let input = input_var(&mut tape, arch, x)?;
    let trace = run_extractor(&mut tape, arch, &f, input)?;
    Ok(tape.value(trace.features).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Architecture {
        Architecture {
            input: InputShape::Vector(4),
            extractor: vec![LayerSpec::Affine { out: 6 }, LayerSpec::Relu, LayerSpec::Affine { out: 3 }],
            classes: 3,
        }
    }

    #[test]
    fn zero_predictor_is_uniform() {
        let arch = mlp();
        let mut params = ModelParams::init(&arch, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in params.theta_y.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5, 3.0], [0.0, 0.0, 9.0, -1.0]]).unwrap();
        let (_, probs) = forward(&params, &arch, &x).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_extractor_is_identity() {
        let arch = Architecture {
            input: InputShape::Vector(2),
            extractor: vec![],
            classes: 2,
        };
        let params = ModelParams::init(&arch, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let (features, _) = forward(&params, &arch, &x).unwrap();
        assert_eq!(features.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = mlp();
        let params = ModelParams::init(&arch, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.1, 2.0, 1.0]]).unwrap();
        let a = forward(&params, &arch, &x).unwrap();
        let b = forward(&params, &arch, &x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(bits(&a.1), bits(&b.1));
    }

    #[test]
    fn affine_after_conv_names_offending_layer() {
        let arch = Architecture {
            input: InputShape::Image { channels: 1, height: 6, width: 6 },
            extractor: vec![LayerSpec::Conv2d { out_channels: 2, kernel: 3 }, LayerSpec::Affine { out: 4 }],
            classes: 2,
        };
        match arch.validate() {
            Err(Error::Layer { layer: 1, kind: "affine", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn input_width_mismatch_is_reported() {
        let arch = mlp();
        let params = ModelParams::init(&arch, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(forward(&params, &arch, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_stack_shapes() {
        let arch = Architecture {
            input: InputShape::Image { channels: 3, height: 16, width: 16 },
            extractor: vec![
                LayerSpec::Conv2d { out_channels: 4, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MeanPool2,
                LayerSpec::Conv2d { out_channels: 8, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Affine { out: 16 },
            ],
            classes: 2,
        };
        assert_eq!(arch.feature_dim().unwrap(), 16);
        assert_eq!(arch.default_style_taps(), vec![1, 4]);
        let params = ModelParams::init(&arch, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::filled(vec![2, 3 * 16 * 16], 0.5);
        let (f, p) = forward(&params, &arch, &x).unwrap();
        assert_eq!(f.shape(), &[2, 16]);
        assert_eq!(p.shape(), &[2, 2]);
    }

    #[test]
    fn glorot_bounds_respected() {
        let arch = mlp();
        let params = ModelParams::init(&arch, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let w = params.theta_f.get("f.0.weight").unwrap();
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(params.theta_f.get("f.0.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
