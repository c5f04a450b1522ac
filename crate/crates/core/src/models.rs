//! The three implemented architectures, built as sequential layer lists,
//! plus scoring, reconstruction and the `.tam` model file format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::{rasterize, RasterConfig, RasterError, RasterImage};
use crate::stroke::Drawing;
use crate::tensor::{self, Parameter, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{kind:?} does not support image size {size}")]
    UnsupportedImageSize { kind: ModelKind, size: usize },
    #[error("layer {index} ({layer}) cannot take input {input:?}")]
    ShapeChain { index: usize, layer: String, input: Vec<usize> },
    #[error("operation requires a {expected} model, got {got:?}")]
    WrongModelKind { expected: &'static str, got: ModelKind },
    #[error("model expects {expected}x{expected} rasters, got {got}x{got}")]
    ImageSizeMismatch { expected: usize, got: usize },
    #[error("model file version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[non_exhaustive]
pub enum ModelKind {
    ShallowCnn,
    ConvAutoencoder,
    FcAutoencoder,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::ShallowCnn, ModelKind::ConvAutoencoder, ModelKind::FcAutoencoder];

    pub fn is_classifier(self) -> bool {
        matches!(self, ModelKind::ShallowCnn)
    }

    pub fn is_autoencoder(self) -> bool {
        !self.is_classifier()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ShallowCnn => "shallow_cnn",
            ModelKind::ConvAutoencoder => "conv_autoencoder",
            ModelKind::FcAutoencoder => "fc_autoencoder",
        }
    }

    pub fn build(self, image_size: usize) -> Result<ModelSpec, ModelError> {
        match self {
            ModelKind::ShallowCnn => build_shallow_cnn(image_size),
            ModelKind::ConvAutoencoder => build_conv_autoencoder(image_size),
            ModelKind::FcAutoencoder => build_fc_autoencoder(image_size),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown model kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        k: usize,
    },
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    Upsample {
        factor: usize,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        use LayerSpec::*;
        match (self, input) {
            (
                Conv2d { in_channels, out_channels, kernel, stride, padding },
                [c, h, w],
            ) if c == in_channels && *stride >= 1 && h + 2 * padding >= *kernel && w + 2 * padding >= *kernel => Some(vec![
                *out_channels,
                (h + 2 * padding - kernel) / stride + 1,
                (w + 2 * padding - kernel) / stride + 1,
            ]),
            (MaxPool { k }, [c, h, w]) if *k > 0 && h % k == 0 && w % k == 0 => Some(vec![*c, h / k, w / k]),
            (GlobalAvgPool, [c, _, _]) => Some(vec![*c]),
            (Dense { inputs, outputs }, [n]) if n == inputs => Some(vec![*outputs]),
            (Relu | Sigmoid, s) => Some(s.to_vec()),
            (Upsample { factor }, [c, h, w]) if *factor >= 1 => Some(vec![*c, h * factor, w * factor]),
            (Flatten, s) => Some(vec![s.iter().product()]),
            (Reshape { shape }, s) if shape.iter().product::<usize>() == s.iter().product::<usize>() => {
                Some(shape.clone())
            }
            _ => None,
        }
    }

    /// Shapes of the weight and bias tensors, for layers that have them.
    fn parameter_shapes(&self) -> Option<[Vec<usize>; 2]> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some([vec![out_channels, in_channels, kernel, kernel], vec![out_channels]])
            }
            LayerSpec::Dense { inputs, outputs } => Some([vec![outputs, inputs], vec![outputs]]),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }
}

/// Architecture description: a sequential layer list applied to a
/// `[1, image_size, image_size]` raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub image_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![1, self.image_size, self.image_size]
    }

    /// Walks the layer list and returns every intermediate shape, input first.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut shapes = vec![self.input_shape()];
        for (index, layer) in self.layers.iter().enumerate() {
            let input = shapes.last().unwrap();
            let next = layer.output_shape(input).ok_or_else(|| ModelError::ShapeChain {
                index,
                layer: format!("{layer:?}"),
                input: input.clone(),
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, ModelError> {
        Ok(self.shape_chain()?.pop().unwrap())
    }

    /// Checks the chain and the kind's output contract.
    pub fn validate(&self) -> Result<(), ModelError> {
        let out = self.output_shape()?;
        let ok = if self.kind.is_classifier() { out == [1] } else { out == self.input_shape() };
        if !ok {
            return Err(ModelError::ShapeChain {
                index: self.layers.len(),
                layer: format!("{:?} output contract", self.kind),
                input: out,
            });
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(LayerSpec::parameter_shapes)
            .flat_map(|s| s.into_iter().map(|d| d.iter().product::<usize>()))
            .sum()
    }
}

/// Filter counts and kernel sizes of the five shallow-CNN convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShallowCnnConfig {
    pub filters: [usize; 5],
    pub kernels: [usize; 5],
}

impl Default for ShallowCnnConfig {
    fn default() -> Self {
        ShallowCnnConfig {
            filters: [32, 32, 64, 64, 128],
            kernels: [7, 5, 5, 3, 3],
        }
    }
}

pub fn build_shallow_cnn(image_size: usize) -> Result<ModelSpec, ModelError> {
    build_shallow_cnn_with(image_size, ShallowCnnConfig::default())
}

/// conv → conv → maxpool 4 → conv → conv → maxpool 2 → conv → GAP → dense → sigmoid,
/// relu after every convolution, "same" padding.
pub fn build_shallow_cnn_with(image_size: usize, cfg: ShallowCnnConfig) -> Result<ModelSpec, ModelError> {
    if ![32, 64, 128, 256].contains(&image_size) {
        return Err(ModelError::UnsupportedImageSize { kind: ModelKind::ShallowCnn, size: image_size });
    }
    let [f1, f2, f3, f4, f5] = cfg.filters;
    let [k1, k2, k3, k4, k5] = cfg.kernels;
    use LayerSpec::*;
    let layers = vec![
        LayerSpec::conv(1, f1, k1, 1),
        Relu,
        LayerSpec::conv(f1, f2, k2, 1),
        Relu,
        MaxPool { k: 4 },
        LayerSpec::conv(f2, f3, k3, 1),
        Relu,
        LayerSpec::conv(f3, f4, k4, 1),
        Relu,
        MaxPool { k: 2 },
        LayerSpec::conv(f4, f5, k5, 1),
        Relu,
        GlobalAvgPool,
        Dense { inputs: f5, outputs: 1 },
        Sigmoid,
    ];
    let spec = ModelSpec { kind: ModelKind::ShallowCnn, image_size, layers };
    spec.validate()?;
    Ok(spec)
}

/// Encoder 64-64-32-32 (3×3, stride 2 on the 2nd and 4th layer), decoder
/// 32-32-64-64 with ×2 nearest upsampling before its 1st and 3rd layer, then
/// a 1-filter projection and sigmoid.
pub fn build_conv_autoencoder(image_size: usize) -> Result<ModelSpec, ModelError> {
    if ![32, 64].contains(&image_size) {
        return Err(ModelError::UnsupportedImageSize { kind: ModelKind::ConvAutoencoder, size: image_size });
    }
    use LayerSpec::*;
    let layers = vec![
        LayerSpec::conv(1, 64, 3, 1),
        Relu,
        LayerSpec::conv(64, 64, 3, 2),
        Relu,
        LayerSpec::conv(64, 32, 3, 1),
        Relu,
        LayerSpec::conv(32, 32, 3, 2),
        Relu,
        Upsample { factor: 2 },
        LayerSpec::conv(32, 32, 3, 1),
        Relu,
        LayerSpec::conv(32, 32, 3, 1),
        Relu,
        Upsample { factor: 2 },
        LayerSpec::conv(32, 64, 3, 1),
        Relu,
        LayerSpec::conv(64, 64, 3, 1),
        Relu,
        LayerSpec::conv(64, 1, 3, 1),
        Sigmoid,
    ];
    let spec = ModelSpec { kind: ModelKind::ConvAutoencoder, image_size, layers };
    spec.validate()?;
    Ok(spec)
}

pub const FC_ENCODER_WIDTHS: [usize; 6] = [1024, 512, 256, 128, 64, 32];

/// Six dense encoder layers tapering to a 32-wide bottleneck and six mirrored
/// decoder layers, on the flattened raster.
pub fn build_fc_autoencoder(image_size: usize) -> Result<ModelSpec, ModelError> {
    if ![32, 64].contains(&image_size) {
        return Err(ModelError::UnsupportedImageSize { kind: ModelKind::FcAutoencoder, size: image_size });
    }
    let input = image_size * image_size;
    let mut widths = vec![input];
    widths.extend(FC_ENCODER_WIDTHS);
    widths.extend(FC_ENCODER_WIDTHS.iter().rev().skip(1));
    widths.push(input);
    let mut layers = vec![LayerSpec::Flatten];
    let last = widths.len() - 2;
    for (i, w) in widths.windows(2).enumerate() {
        layers.push(LayerSpec::Dense { inputs: w[0], outputs: w[1] });
        layers.push(if i == last { LayerSpec::Sigmoid } else { LayerSpec::Relu });
    }
    layers.push(LayerSpec::Reshape { shape: vec![1, image_size, image_size] });
    let spec = ModelSpec { kind: ModelKind::FcAutoencoder, image_size, layers };
    spec.validate()?;
    Ok(spec)
}

/// Per-layer state saved on the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer, plus the final output last.
    pub activations: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }
}

/// A spec with concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
    /// Index of each layer's weight parameter (bias follows it).
    slots: Vec<Option<usize>>,
}

impl Network {
    /// Fan-in scaled uniform initialisation: `sqrt(6 / fan_in)` bounds for
    /// layers feeding a relu, `sqrt(3 / fan_in)` otherwise; zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            if let Some([w_shape, b_shape]) = layer.parameter_shapes() {
                let gain = if matches!(spec.layers.get(i + 1), Some(LayerSpec::Relu)) { 6.0 } else { 3.0 };
                let bound = (gain / layer.fan_in() as f64).sqrt();
                let n: usize = w_shape.iter().product();
                let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                params.push(Parameter::new(Tensor::from_vec(w_shape, w)));
                params.push(Parameter::new(Tensor::zeros(&b_shape)));
            }
        }
        Network::from_parameters(spec, params.into_iter().map(|p| p.value).collect())
    }

    pub fn from_parameters(spec: ModelSpec, values: Vec<Tensor>) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut next = 0;
        for layer in &spec.layers {
            match layer.parameter_shapes() {
                Some([w, b]) => {
                    let ok = values.get(next).is_some_and(|t| t.shape() == w.as_slice())
                        && values.get(next + 1).is_some_and(|t| t.shape() == b.as_slice());
                    if !ok {
                        return Err(ModelError::CorruptPayload(format!(
                            "parameter {next} does not match layer {layer:?}"
                        )));
                    }
                    slots.push(Some(next));
                    next += 2;
                }
                None => slots.push(None),
            }
        }
        if next != values.len() {
            return Err(ModelError::CorruptPayload(format!(
                "{} parameter tensors for {next} slots",
                values.len()
            )));
        }
        Ok(Network { spec, params: values.into_iter().map(Parameter::new).collect(), slots })
    }

    fn layer_params(&self, i: usize) -> (&Tensor, &Tensor) {
        let s = self.slots[i].expect("layer has parameters");
        (&self.params[s].value, &self.params[s + 1].value)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward_cached(input)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<ForwardCache, ModelError> {
        if input.shape() != self.spec.input_shape().as_slice() {
            return Err(ModelError::ShapeChain {
                index: 0,
                layer: "input".into(),
                input: input.shape().to_vec(),
            });
        }
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.spec.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let mut pool_idx = None;
            let y = match layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let (w, b) = self.layer_params(i);
                    tensor::conv2d(&x, w, b, *stride, *padding)?
                }
                LayerSpec::MaxPool { k } => {
                    let (y, idx) = tensor::maxpool(&x, *k)?;
                    pool_idx = Some(idx);
                    y
                }
                LayerSpec::GlobalAvgPool => tensor::global_average_pool(&x)?,
                LayerSpec::Dense { .. } => {
                    let (w, b) = self.layer_params(i);
                    tensor::dense(&x, w, b)?
                }
                LayerSpec::Relu => tensor::relu(&x),
                LayerSpec::Sigmoid => tensor::sigmoid(&x),
                LayerSpec::Upsample { factor } => tensor::upsample_nearest(&x, *factor)?,
                LayerSpec::Flatten => {
                    let n = x.len();
                    x.clone().reshape(&[n])?
                }
                LayerSpec::Reshape { shape } => x.clone().reshape(shape)?,
            };
            activations.push(x);
            argmax.push(pool_idx);
            x = y;
        }
        activations.push(x);
        Ok(ForwardCache { activations, argmax })
    }

    /// Backpropagates `grad_output` (d loss / d output) through the cached
    /// pass, adding parameter gradients into `self.params[*].grad`. Returns
    /// d loss / d input.
    pub fn backward(&mut self, cache: &ForwardCache, grad_output: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = grad_output.clone();
        for i in (0..self.spec.layers.len()).rev() {
            let input = &cache.activations[i];
            let output = &cache.activations[i + 1];
            g = match &self.spec.layers[i] {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let s = self.slots[i].unwrap();
                    let grads = tensor::conv2d_backward(input, &self.params[s].value, *stride, *padding, &g)?;
                    self.params[s].accumulate(&grads.weights);
                    self.params[s + 1].accumulate(&grads.bias);
                    grads.input
                }
                LayerSpec::MaxPool { .. } => {
                    tensor::maxpool_backward(input.shape(), cache.argmax[i].as_ref().unwrap(), &g)?
                }
                LayerSpec::GlobalAvgPool => tensor::global_average_pool_backward(input.shape(), &g)?,
                LayerSpec::Dense { .. } => {
                    let s = self.slots[i].unwrap();
                    let grads = tensor::dense_backward(input, &self.params[s].value, &g)?;
                    self.params[s].accumulate(&grads.weights);
                    self.params[s + 1].accumulate(&grads.bias);
                    grads.input
                }
                LayerSpec::Relu => tensor::relu_backward(input, &g),
                LayerSpec::Sigmoid => tensor::sigmoid_backward(output, &g),
                LayerSpec::Upsample { factor } => tensor::upsample_nearest_backward(input.shape(), *factor, &g)?,
                LayerSpec::Flatten | LayerSpec::Reshape { .. } => g.reshape(input.shape())?,
            };
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

/// Autoencoder threshold calibration: `threshold = mean + k · std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mean: f64,
    pub std: f64,
    pub k: f64,
    pub threshold: f64,
}

/// Result of comparing one raster against a trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Probability for classifiers, reconstruction error for autoencoders.
    pub value: f64,
    pub threshold: f64,
    pub accepted: bool,
}

/// Trained parameters with preprocessing and decision threshold.
///
/// The threshold lives in score space (accept iff `score >= threshold`) for
/// classifiers and in error space (accept iff `error <= threshold`) for
/// autoencoders.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub raster: RasterConfig,
    pub threshold: f64,
    pub calibration: Option<Calibration>,
}

impl TrainedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.network.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.network.spec.kind
    }

    fn input(&self, img: &RasterImage) -> Result<Tensor, ModelError> {
        if img.size != self.spec().image_size {
            return Err(ModelError::ImageSizeMismatch { expected: self.spec().image_size, got: img.size });
        }
        Ok(img.to_tensor())
    }

    /// Probability that the raster belongs to the authorized user.
    pub fn score(&self, img: &RasterImage) -> Result<f64, ModelError> {
        if !self.kind().is_classifier() {
            return Err(ModelError::WrongModelKind { expected: "classifier", got: self.kind() });
        }
        Ok(self.network.forward(&self.input(img)?)?.data()[0])
    }

    pub fn reconstruct(&self, img: &RasterImage) -> Result<Tensor, ModelError> {
        if !self.kind().is_autoencoder() {
            return Err(ModelError::WrongModelKind { expected: "autoencoder", got: self.kind() });
        }
        self.network.forward(&self.input(img)?)
    }

    /// Mean squared error between the raster and its reconstruction.
    pub fn reconstruction_error(&self, img: &RasterImage) -> Result<f64, ModelError> {
        let x = self.input(img)?;
        let y = self.reconstruct(img)?;
        Ok(tensor::mse_loss(&y, &x)?)
    }

    /// Score for classifiers, reconstruction error for autoencoders.
    pub fn raw_value(&self, img: &RasterImage) -> Result<f64, ModelError> {
        if self.kind().is_classifier() {
            self.score(img)
        } else {
            self.reconstruction_error(img)
        }
    }

    /// Maps the raw value to "higher = more authorized" so ROC code serves
    /// both model families: autoencoder errors are negated.
    pub fn oriented_value(&self, img: &RasterImage) -> Result<f64, ModelError> {
        let v = self.raw_value(img)?;
        Ok(if self.kind().is_classifier() { v } else { -v })
    }

    /// Applies the accept rule for this model kind.
    pub fn accepts(&self, value: f64) -> bool {
        if self.kind().is_classifier() {
            value >= self.threshold
        } else {
            value <= self.threshold
        }
    }

    pub fn decide(&self, img: &RasterImage) -> Result<Decision, ModelError> {
        let value = self.raw_value(img)?;
        Ok(Decision { value, threshold: self.threshold, accepted: self.accepts(value) })
    }

    /// Rasterizes with the stored preprocessing, then decides.
    pub fn decide_drawing(&self, d: &Drawing) -> Result<Decision, ModelError> {
        self.decide(&rasterize(d, &self.raster)?)
    }

    pub fn save(&self) -> Vec<u8> {
        save_model(self)
    }
}

const MAGIC: &[u8; 4] = b"TAM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    spec: ModelSpec,
    raster: RasterConfig,
    threshold: f64,
    calibration: Option<Calibration>,
    parameter_shapes: Vec<Vec<usize>>,
}

/// Encodes a model as `.tam`:
///
/// | bytes | content |
/// |---|---|
/// | 4 | magic `TAM\0` |
/// | 4 | format version, u32 LE |
/// | 4 | header length, u32 LE |
/// | n | JSON header: spec, raster config, threshold, calibration, parameter shapes |
/// | 8 | parameter value count, u64 LE |
/// | 8·m | parameter values, f64 LE, in layer order |
/// | 32 | SHA-256 of all preceding bytes |
pub fn save_model(m: &TrainedModel) -> Vec<u8> {
    let header = FileHeader {
        spec: m.network.spec.clone(),
        raster: m.raster,
        threshold: m.threshold,
        calibration: m.calibration,
        parameter_shapes: m.network.params.iter().map(|p| p.value.shape().to_vec()).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let count: usize = m.network.params.iter().map(|p| p.value.len()).sum();
    let mut out = Vec::with_capacity(4 + 4 + 4 + header.len() + 8 + 8 * count + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in &m.network.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn load_model(bytes: &[u8]) -> Result<TrainedModel, ModelError> {
    let corrupt = |m: &str| ModelError::CorruptPayload(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing TAM magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 32 + 12 {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize.checked_add(header_len).filter(|&e| e + 8 <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
    let header: FileHeader =
        serde_json::from_slice(&body[12..header_end]).map_err(|e| ModelError::CorruptPayload(format!("header: {e}")))?;
    let count = u64::from_le_bytes(body[header_end..header_end + 8].try_into().unwrap()) as usize;
    let payload = &body[header_end + 8..];
    if payload.len() != count.checked_mul(8).ok_or_else(|| corrupt("count overflow"))? {
        return Err(corrupt("payload length disagrees with header"));
    }
    let expected: usize = header.parameter_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if expected != count {
        return Err(corrupt("parameter shapes disagree with payload"));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = header
        .parameter_shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, values.by_ref().take(n).collect())
        })
        .collect();
    header.raster.validate()?;
    Ok(TrainedModel {
        network: Network::from_parameters(header.spec, tensors)?,
        raster: header.raster,
        threshold: header.threshold,
        calibration: header.calibration,
    })
}
