//! Minimal numeric engine: dense `f64` tensors, the forward and backward
//! passes of the layers the architectures need, losses and optimizers.
//!
//! Spatial tensors are single samples laid out `[C, H, W]`; batching is done
//! by the caller accumulating parameter gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pool size {k} does not divide {h}x{w}")]
    IndivisibleShape { k: usize, h: usize, w: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
}

fn mismatch(msg: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor::from_vec(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(mismatch(format!("{what}: expected [C,H,W], got {:?}", self.shape))),
        }
    }
}

/// `c (+)= op(a) · op(b)` with `op(a)` of shape m×k and `op(b)` k×n, all
/// row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches for these
    // strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weights: &[usize], stride: usize, padding: usize) -> Result<(usize, Self), TensorError> {
        let (c_in, h, w) = match input {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(mismatch(format!("conv2d input must be [C,H,W], got {input:?}"))),
        };
        let (c_out, wc, kh, kw) = match weights {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            _ => return Err(mismatch(format!("conv2d weights must be 4-d, got {weights:?}"))),
        };
        if wc != c_in {
            return Err(mismatch(format!("conv2d: input has {c_in} channels, weights expect {wc}")));
        }
        if stride == 0 {
            return Err(mismatch("conv2d: stride must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch(format!(
                "conv2d: {kh}x{kw} kernel does not fit {h}x{w} with padding {padding}"
            )));
        }
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        Ok((
            c_out,
            ConvGeometry { c_in, h, w, kh, kw, stride, padding, h_out, w_out },
        ))
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Row `(c, ky, kx)` / column `(oy, ox)` patch matrix of the padded input.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let g = self;
        let cols = g.positions();
        let mut out = vec![0.0; g.patch() * cols];
        for c in 0..g.c_in {
            let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols_data: &[f64]) -> Vec<f64> {
        let g = self;
        let cols = g.positions();
        let mut out = vec![0.0; g.c_in * g.h * g.w];
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = c * g.h * g.w + iy as usize * g.w;
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                out[base + ix as usize] += src[oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// 2-d cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kH, kW]`
/// weights.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let (c_out, g) = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    if bias.len() != c_out {
        return Err(mismatch(format!("conv2d: bias has {} values for {c_out} filters", bias.len())));
    }
    let cols = g.im2col(input.data());
    let n = g.positions();
    let mut out = vec![0.0; c_out * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    gemm(c_out, g.patch(), n, weights.data(), false, &cols, false, &mut out, true);
    Ok(Tensor::from_vec(vec![c_out, g.h_out, g.w_out], out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads, TensorError> {
    let (c_out, g) = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    if grad_out.shape() != [c_out, g.h_out, g.w_out] {
        return Err(mismatch(format!(
            "conv2d_backward: upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, g.h_out, g.w_out]
        )));
    }
    let n = g.positions();
    let cols = g.im2col(input.data());
    let mut dw = vec![0.0; weights.len()];
    gemm(c_out, n, g.patch(), grad_out.data(), false, &cols, true, &mut dw, false);
    let mut dcols = vec![0.0; g.patch() * n];
    gemm(g.patch(), c_out, n, weights.data(), true, grad_out.data(), false, &mut dcols, false);
    let db = grad_out.data().chunks(n).map(|c| c.iter().sum()).collect();
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().to_vec(), g.col2im(&dcols)),
        weights: Tensor::from_vec(weights.shape().to_vec(), dw),
        bias: Tensor::from_vec(vec![c_out], db),
    })
}

/// Non-overlapping k×k max pooling. Also returns, for every output cell, the
/// flat input index it was taken from (first maximum in row-major order).
pub fn maxpool(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>), TensorError> {
    let (c, h, w) = input.dims3("maxpool")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::IndivisibleShape { k, h, w });
    }
    let (ho, wo) = (h / k, w / k);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ch * h * w + (oy * k) * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = ch * h * w + (oy * k + dy) * w + ox * k + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(vec![c, ho, wo], out), argmax))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor, TensorError> {
    if argmax.len() != grad_out.len() {
        return Err(mismatch("maxpool_backward: argmax and gradient lengths differ"));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data[i] += g;
    }
    Ok(dx)
}

/// Per-channel mean of a `[C, H, W]` tensor.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = input.dims3("global_average_pool")?;
    let n = (h * w) as f64;
    let out = input.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
    Ok(Tensor::from_vec(vec![c], out))
}

pub fn global_average_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(mismatch("global_average_pool_backward: expected [C,H,W]")),
    };
    if grad_out.len() != c {
        return Err(mismatch("global_average_pool_backward: gradient length != channels"));
    }
    let n = (h * w) as f64;
    let data = grad_out.data().iter().flat_map(|&g| std::iter::repeat_n(g / n, h * w)).collect();
    Ok(Tensor::from_vec(input_shape.to_vec(), data))
}

/// Affine map `W·x + b` with `W` of shape `[M, N]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        s => return Err(mismatch(format!("dense weights must be [M,N], got {s:?}"))),
    };
    if input.len() != n || bias.len() != m {
        return Err(mismatch(format!(
            "dense: input {} / bias {} incompatible with weights [{m},{n}]",
            input.len(),
            bias.len()
        )));
    }
    let mut out = bias.data().to_vec();
    gemm(m, n, 1, weights.data(), false, input.data(), false, &mut out, true);
    Ok(Tensor::from_vec(vec![m], out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads, TensorError> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        s => return Err(mismatch(format!("dense weights must be [M,N], got {s:?}"))),
    };
    if input.len() != n || grad_out.len() != m {
        return Err(mismatch("dense_backward: shapes incompatible with weights"));
    }
    let mut dw = vec![0.0; m * n];
    gemm(m, 1, n, grad_out.data(), false, input.data(), false, &mut dw, false);
    let mut dx = vec![0.0; n];
    gemm(n, m, 1, weights.data(), true, grad_out.data(), false, &mut dx, false);
    Ok(DenseGrads {
        input: Tensor::from_vec(input.shape().to_vec(), dx),
        weights: Tensor::from_vec(vec![m, n], dw),
        bias: grad_out.clone().reshape(&[m])?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through relu; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through sigmoid given its output `s`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::from_vec(output.shape().to_vec(), data)
}

/// Nearest-neighbour spatial upsampling of `[C, H, W]` by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = input.dims3("upsample")?;
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(ch * ho + oy) * wo + ox] = x[(ch * h + oy / factor) * w + ox / factor];
            }
        }
    }
    Ok(Tensor::from_vec(vec![c, ho, wo], out))
}

pub fn upsample_nearest_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(mismatch("upsample_backward: expected [C,H,W]")),
    };
    let (ho, wo) = (h * factor, w * factor);
    if grad_out.shape() != [c, ho, wo] {
        return Err(mismatch("upsample_backward: gradient shape mismatch"));
    }
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                dx[(ch * h + oy / factor) * w + ox / factor] += g[(ch * ho + oy) * wo + ox];
            }
        }
    }
    Ok(Tensor::from_vec(input_shape.to_vec(), dx))
}

pub const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy of probability `p` against label `y`, with `p`
/// clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// d bce / d p at the clamped probability.
pub fn bce_grad(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -y / p + (1.0 - y) / (1.0 - p)
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(mismatch("mse_loss: tensors differ in length"));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor, TensorError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(mismatch("mse_grad: tensors differ in length"));
    }
    let scale = 2.0 / pred.len() as f64;
    let data = pred.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
    Ok(Tensor::from_vec(pred.shape().to_vec(), data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) {
        debug_assert_eq!(g.shape(), self.value.shape());
        for (a, b) in self.grad.data.iter_mut().zip(g.data()) {
            *a += b;
        }
    }

    pub fn scale_grad(&mut self, s: f64) {
        self.grad.data.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        let (m, v) = match config.kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        OptimizerState { config, step: 0, m, v }
    }

    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(index)?.as_slice(), self.v.get(index)?.as_slice()))
    }

    /// Applies one update from the accumulated gradients. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<(), TensorError> {
        if let Some(i) = params.iter().position(|p| !p.grad.is_finite()) {
            return Err(TensorError::NonFiniteGradient(i));
        }
        let c = self.config;
        self.step += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    for (w, g) in p.value.data.iter_mut().zip(&p.grad.data) {
                        *w -= c.learning_rate * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                assert_eq!(self.m.len(), params.len(), "optimizer built for other parameters");
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    for (((w, &g), m), v) in p.value.data.iter_mut().zip(&p.grad.data).zip(m).zip(v) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
