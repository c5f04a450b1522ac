//! Finite-difference checks for every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trace_auth::models::{ForwardCache, LayerSpec, ModelKind, ModelSpec, Network};
use trace_auth::tensor::{self, Tensor};

use super::{numeric_gradient, relative_error, FD_STEP};

/// Network cases are redrawn until every kink is this far from the operating point.
const KINK_MARGIN: f64 = 10.0 * FD_STEP;

/// Worst relative error seen for one layer type over all its random shapes.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub shapes: usize,
    pub worst: f64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so relu kinks fall outside `±h`.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// Distinct values at least 0.01 apart so pooling winners never swap under `±h`.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Tracker {
    layer: &'static str,
    shapes: usize,
    worst: f64,
}

impl Tracker {
    fn new(layer: &'static str) -> Self {
        Tracker { layer, shapes: 0, worst: 0.0 }
    }

    fn record(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.worst = self.worst.max(relative_error(analytic, numeric));
    }

    fn done(self) -> LayerCheck {
        LayerCheck { layer: self.layer, shapes: self.shapes, worst: self.worst }
    }
}

fn check_conv(rng: &mut ChaCha8Rng, cases: usize) -> LayerCheck {
    let mut t = Tracker::new("conv2d");
    for _ in 0..cases {
        let (c_in, c_out) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let h = rng.gen_range(k..=k + 5);
        let w = rng.gen_range(k..=k + 5);
        let xs = [c_in, h, w];
        let ws = [c_out, c_in, k, k];
        let x = uniform(rng, xs.iter().product());
        let wt = uniform(rng, ws.iter().product());
        let b = uniform(rng, c_out);
        let out_len = tensor::conv2d(&Tensor::from_vec(xs.to_vec(), x.clone()), &Tensor::from_vec(ws.to_vec(), wt.clone()), &Tensor::from_vec(vec![c_out], b.clone()), stride, pad)
            .unwrap();
        let r = uniform(rng, out_len.len());
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
            let y = tensor::conv2d(
                &Tensor::from_vec(xs.to_vec(), x.to_vec()),
                &Tensor::from_vec(ws.to_vec(), wt.to_vec()),
                &Tensor::from_vec(vec![c_out], b.to_vec()),
                stride,
                pad,
            )
            .unwrap();
            dot(y.data(), &r)
        };
        let g = tensor::conv2d_backward(
            &Tensor::from_vec(xs.to_vec(), x.clone()),
            &Tensor::from_vec(ws.to_vec(), wt.clone()),
            stride,
            pad,
            &Tensor::from_vec(out_len.shape().to_vec(), r.clone()),
        )
        .unwrap();
        t.record(g.input.data(), &numeric_gradient(&x, |v| loss(v, &wt, &b)));
        t.record(g.weights.data(), &numeric_gradient(&wt, |v| loss(&x, v, &b)));
        t.record(g.bias.data(), &numeric_gradient(&b, |v| loss(&x, &wt, v)));
        t.shapes += 1;
    }
    t.done()
}

fn check_dense(rng: &mut ChaCha8Rng, cases: usize) -> LayerCheck {
    let mut t = Tracker::new("dense");
    for _ in 0..cases {
        let (m, n) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let x = uniform(rng, m);
        let wt = uniform(rng, m * n);
        let b = uniform(rng, n);
        let r = uniform(rng, n);
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
            let y = tensor::dense(
                &Tensor::from_vec(vec![m], x.to_vec()),
                &Tensor::from_vec(vec![n, m], wt.to_vec()),
                &Tensor::from_vec(vec![n], b.to_vec()),
            )
            .unwrap();
            dot(y.data(), &r)
        };
        let g = tensor::dense_backward(
            &Tensor::from_vec(vec![m], x.clone()),
            &Tensor::from_vec(vec![n, m], wt.clone()),
            &Tensor::from_vec(vec![n], r.clone()),
        )
        .unwrap();
        t.record(g.input.data(), &numeric_gradient(&x, |v| loss(v, &wt, &b)));
        t.record(g.weights.data(), &numeric_gradient(&wt, |v| loss(&x, v, &b)));
        t.record(g.bias.data(), &numeric_gradient(&b, |v| loss(&x, &wt, v)));
        t.shapes += 1;
    }
    t.done()
}

fn random_chw(rng: &mut ChaCha8Rng, multiple: usize) -> Vec<usize> {
    vec![rng.gen_range(1..=3), multiple * rng.gen_range(1..=4), multiple * rng.gen_range(1..=4)]
}

/// Shared driver for input-only layers.
fn check_unary(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    cases: usize,
    mut shape: impl FnMut(&mut ChaCha8Rng) -> Vec<usize>,
    mut sample: impl FnMut(&mut ChaCha8Rng, usize) -> Vec<f64>,
    forward: impl Fn(&Tensor) -> Tensor,
    backward: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
) -> LayerCheck {
    let mut t = Tracker::new(name);
    for _ in 0..cases {
        let s = shape(rng);
        let x = Tensor::from_vec(s.clone(), sample(rng, s.iter().product()));
        let y = forward(&x);
        let r = Tensor::from_vec(y.shape().to_vec(), uniform(rng, y.len()));
        let analytic = backward(&x, &y, &r);
        let numeric = numeric_gradient(x.data(), |v| dot(forward(&Tensor::from_vec(s.clone(), v.to_vec())).data(), r.data()));
        t.record(analytic.data(), &numeric);
        t.shapes += 1;
    }
    t.done()
}

fn check_losses(rng: &mut ChaCha8Rng, cases: usize) -> Vec<LayerCheck> {
    let mut bce = Tracker::new("bce_loss");
    let mut mse = Tracker::new("mse_loss");
    for _ in 0..cases {
        let p = rng.gen_range(0.05..0.95);
        let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        bce.record(&[tensor::bce_grad(p, y)], &numeric_gradient(&[p], |v| tensor::bce_loss(v[0], y)));
        bce.shapes += 1;

        let n = rng.gen_range(1..=40);
        let pred = uniform(rng, n);
        let target = uniform(rng, n);
        let tt = Tensor::from_vec(vec![n], target);
        let g = tensor::mse_grad(&Tensor::from_vec(vec![n], pred.clone()), &tt).unwrap();
        mse.record(g.data(), &numeric_gradient(&pred, |v| tensor::mse_loss(&Tensor::from_vec(vec![n], v.to_vec()), &tt).unwrap()));
        mse.shapes += 1;
    }
    vec![bce.done(), mse.done()]
}

fn conv(i: usize, o: usize, k: usize, s: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: k, stride: s, padding: k / 2 }
}

/// Closest any relu input gets to zero, or any pooling window's runner-up
/// to its winner. Below a few step sizes a central difference straddles the
/// kink and measures a one-sided slope mix, not the derivative.
fn kink_margin(spec: &ModelSpec, cache: &ForwardCache) -> f64 {
    let mut margin = f64::INFINITY;
    for (layer, input) in spec.layers.iter().zip(&cache.activations) {
        match layer {
            LayerSpec::Relu => {
                margin = input.data().iter().fold(margin, |m, a| m.min(a.abs()));
            }
            LayerSpec::MaxPool { k } => {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                for ch in 0..c {
                    for r in (0..h).step_by(*k) {
                        for q in (0..w).step_by(*k) {
                            let mut v: Vec<f64> = (0..*k)
                                .flat_map(|i| (0..*k).map(move |j| (i, j)))
                                .map(|(i, j)| input.data()[(ch * h + r + i) * w + q + j])
                                .collect();
                            v.sort_by(|a, b| b.total_cmp(a));
                            // Ties among relu-clamped zeros carry no gradient either way.
                            if v[0] > 0.0 {
                                margin = margin.min(v[0] - v[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// Whole-network checks through `Network::backward`, covering the layer
/// wiring (flatten, reshape and parameter slots) on top of the kernels.
fn check_networks(rng: &mut ChaCha8Rng, cases: usize) -> LayerCheck {
    let mut t = Tracker::new("network");
    for case in 0..cases {
        let size = [4, 8][case % 2];
        let c = rng.gen_range(1..=3);
        let spec = match case % 3 {
            0 => ModelSpec {
                kind: ModelKind::ShallowCnn,
                image_size: size,
                layers: vec![
                    conv(1, c, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { k: 2 },
                    conv(c, 2, 3, 1),
                    LayerSpec::Relu,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Dense { inputs: 2, outputs: 1 },
                    LayerSpec::Sigmoid,
                ],
            },
            1 => ModelSpec {
                kind: ModelKind::ConvAutoencoder,
                image_size: size,
                layers: vec![
                    conv(1, c, 3, 2),
                    LayerSpec::Relu,
                    LayerSpec::Upsample { factor: 2 },
                    conv(c, 1, 3, 1),
                    LayerSpec::Sigmoid,
                ],
            },
            _ => ModelSpec {
                kind: ModelKind::FcAutoencoder,
                image_size: size,
                layers: vec![
                    LayerSpec::Flatten,
                    LayerSpec::Dense { inputs: size * size, outputs: 3 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { inputs: 3, outputs: size * size },
                    LayerSpec::Sigmoid,
                    LayerSpec::Reshape { shape: vec![1, size, size] },
                ],
            },
        };
        let xs = vec![1, size, size];
        let (mut net, x) = loop {
            let net = Network::init(spec.clone(), rng.gen()).unwrap();
            let x: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cache = net.forward_cached(&Tensor::from_vec(xs.clone(), x.clone())).unwrap();
            if kink_margin(&spec, &cache) >= KINK_MARGIN {
                break (net, x);
            }
        };
        let target: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let label = rng.gen_bool(0.5) as u8 as f64;
        let classifier = spec.kind.is_classifier();
        let loss_of = |out: &Tensor| {
            if classifier {
                tensor::bce_loss(out.data()[0], label)
            } else {
                tensor::mse_loss(out, &Tensor::from_vec(xs.clone(), target.clone())).unwrap()
            }
        };
        let values: Vec<Tensor> = net.params.iter().map(|p| p.value.clone()).collect();
        let run = |vals: &[Tensor], input: &[f64]| {
            let n = Network::from_parameters(spec.clone(), vals.to_vec()).unwrap();
            loss_of(&n.forward(&Tensor::from_vec(xs.clone(), input.to_vec())).unwrap())
        };

        let input = Tensor::from_vec(xs.clone(), x.clone());
        let cache = net.forward_cached(&input).unwrap();
        let out = cache.output().clone();
        let grad_out = if classifier {
            Tensor::scalar(tensor::bce_grad(out.data()[0], label))
        } else {
            tensor::mse_grad(&out, &Tensor::from_vec(xs.clone(), target.clone())).unwrap()
        };
        net.zero_grad();
        let gx = net.backward(&cache, &grad_out).unwrap();
        t.record(gx.data(), &numeric_gradient(&x, |v| run(&values, v)));
        for (i, p) in net.params.iter().enumerate() {
            let numeric = numeric_gradient(values[i].data(), |v| {
                let mut vals = values.clone();
                vals[i] = Tensor::from_vec(values[i].shape().to_vec(), v.to_vec());
                run(&vals, &x)
            });
            t.record(p.grad.data(), &numeric);
        }
        t.shapes += 1;
    }
    t.done()
}

/// Runs every layer check on `cases` random shapes each.
pub fn run_all(seed: u64, cases: usize) -> Vec<LayerCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![check_conv(&mut rng, cases), check_dense(&mut rng, cases)];
    out.push(check_unary(
        "maxpool",
        &mut rng,
        cases,
        |r| random_chw(r, 2),
        distinct,
        |x| tensor::maxpool(x, 2).unwrap().0,
        |x, _, g| {
            let (_, idx) = tensor::maxpool(x, 2).unwrap();
            tensor::maxpool_backward(x.shape(), &idx, g).unwrap()
        },
    ));
    out.push(check_unary(
        "global_avg_pool",
        &mut rng,
        cases,
        |r| random_chw(r, 1),
        uniform,
        |x| tensor::global_average_pool(x).unwrap(),
        |x, _, g| tensor::global_average_pool_backward(x.shape(), g).unwrap(),
    ));
    out.push(check_unary(
        "relu",
        &mut rng,
        cases,
        |r| random_chw(r, 1),
        off_kink,
        tensor::relu,
        |x, _, g| tensor::relu_backward(x, g),
    ));
    out.push(check_unary(
        "sigmoid",
        &mut rng,
        cases,
        |r| random_chw(r, 1),
        |r, n| uniform(r, n).into_iter().map(|v| 4.0 * v).collect(),
        tensor::sigmoid,
        |_, y, g| tensor::sigmoid_backward(y, g),
    ));
    out.push(check_unary(
        "upsample",
        &mut rng,
        cases,
        |r| random_chw(r, 1),
        uniform,
        |x| tensor::upsample_nearest(x, 2).unwrap(),
        |x, _, g| tensor::upsample_nearest_backward(x.shape(), 2, g).unwrap(),
    ));
    out.extend(check_losses(&mut rng, cases));
    out.push(check_networks(&mut rng, cases));
    out
}
