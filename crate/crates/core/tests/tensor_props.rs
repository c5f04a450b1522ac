mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trace_auth::models::{ModelKind, Network};
use trace_auth::raster::{rasterize, RasterConfig};
use trace_auth::synth::{cohort_manifest, CohortConfig};
use trace_auth::tensor::{self, OptimizerConfig, OptimizerState, Parameter, Tensor};

#[test]
fn conv_matches_loop_nest() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = [1, 3, 5, 7][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..=k / 2);
        let (h, w) = (rng.gen_range(k..k + 12), rng.gen_range(k..k + 12));
        let x: Vec<f64> = (0..c_in * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..c_out * c_in * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = tensor::conv2d(
            &Tensor::from_vec(vec![c_in, h, w], x.clone()),
            &Tensor::from_vec(vec![c_out, c_in, k, k], wt.clone()),
            &Tensor::from_vec(vec![c_out], b.clone()),
            stride,
            pad,
        )
        .unwrap();
        let (want, ho, wo) = common::conv_oracle(&x, (c_in, h, w), &wt, (c_out, k, k), &b, stride, pad);
        assert_eq!(got.shape(), [c_out, ho, wo]);
        for (a, e) in got.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }
}

#[test]
fn every_layer_passes_gradient_check() {
    for check in common::gradcheck::run_all(2024, 20) {
        assert!(check.shapes >= 20, "{}", check.layer);
        assert!(check.worst < common::FD_TOLERANCE, "{}: relative error {}", check.layer, check.worst);
    }
}

#[test]
fn adam_matches_hand_computed_steps() {
    let cfg = OptimizerConfig::default();
    let mut params = vec![Parameter::new(Tensor::from_vec(vec![2], vec![1.0, -2.0]))];
    let mut opt = OptimizerState::new(cfg, &params);
    let grads = [[0.5, -1.0], [0.25, 3.0]];
    let (mut m, mut v, mut w) = ([0.0; 2], [0.0; 2], [1.0, -2.0]);
    for (t, g) in grads.iter().enumerate() {
        params[0].zero_grad();
        params[0].accumulate(&Tensor::from_vec(vec![2], g.to_vec()));
        opt.step(&mut params).unwrap();
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..2 {
            assert!((params[0].value.data()[i] - w[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn non_finite_gradient_leaves_parameters_untouched() {
    let mut params = vec![Parameter::new(Tensor::from_vec(vec![2], vec![1.0, 2.0]))];
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &params);
    params[0].accumulate(&Tensor::from_vec(vec![2], vec![f64::NAN, 1.0]));
    assert!(opt.step(&mut params).is_err());
    assert_eq!(params[0].value.data(), [1.0, 2.0]);
}

#[test]
fn autoencoder_overfits_one_image() {
    let manifest = cohort_manifest(&CohortConfig { participants: 1, drawings_per_digit: 1, ..Default::default() });
    let record = manifest.records().next().unwrap();
    let x = rasterize(&record.drawing, &RasterConfig::default()).unwrap().to_tensor();
    let mut net = Network::init(ModelKind::ConvAutoencoder.build(32).unwrap(), 3).unwrap();
    let mut opt = OptimizerState::new(OptimizerConfig::default(), &net.params);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        net.zero_grad();
        let cache = net.forward_cached(&x).unwrap();
        loss = tensor::mse_loss(cache.output(), &x).unwrap();
        let g = tensor::mse_grad(cache.output(), &x).unwrap();
        net.backward(&cache, &g).unwrap();
        opt.step(&mut net.params).unwrap();
    }
    assert!(loss < 0.05, "final loss {loss}");
}
