//! Parity with torchvision: parameter names/shapes and pooled features under
//! deterministic patterned weights (see scripts/export_torchvision.py).

use std::collections::BTreeMap;

use chickface::backbones::{Backbone, FeatureExtractor};
use chickface::nn::{ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    input_size: u32,
    trainable_parameters: usize,
    params: Vec<(String, Vec<usize>)>,
    features: Vec<f32>,
}

fn fixtures() -> BTreeMap<String, Fixture> {
    let text = include_str!("fixtures/torchvision_parity.json");
    serde_json::from_str(text).unwrap()
}

fn pattern(name: &str, shape: &[usize], t: usize) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|i| {
            let s = (0.61 * i as f64 + 1.3 * t as f64).sin();
            let v = if name.ends_with("running_var") {
                1.0 + 0.25 * s * s
            } else if name.ends_with("running_mean") {
                0.1 * s
            } else if shape.len() == 1 && name.ends_with("weight") {
                1.0 + 0.1 * s
            } else if shape.len() == 1 {
                0.05 * s
            } else {
                let fan_in: usize = shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt() * 2f64.sqrt() * s
            };
            v as f32
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

fn pattern_input(side: usize) -> Tensor {
    let n = 3 * side * side;
    let v: Vec<f32> = (0..n)
        .map(|i| (0.8 * (0.013 * i as f64).sin() + 0.4 * (0.0071 * i as f64 + 0.5).cos()) as f32)
        .collect();
    Tensor::from_shape_vec((1, 3, side, side), v).unwrap()
}

fn check(backbone: Backbone, run_forward: bool) {
    let all = fixtures();
    let fx = &all[backbone.as_str()];
    assert_eq!(fx.input_size, backbone.input_size());
    assert_eq!(fx.features.len(), backbone.feature_dim());

    let mut specs = backbone.layers().specs();
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let ours: Vec<(String, Vec<usize>)> = specs.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
    assert_eq!(ours, fx.params, "{backbone}: parameter layout differs from torchvision");

    let mut store = ParamStore::default();
    for (t, (name, shape)) in fx.params.iter().enumerate() {
        store.tensors.insert(name.clone(), pattern(name, shape, t));
    }
    let model = FeatureExtractor::from_params(backbone, store).unwrap();
    assert_eq!(model.net.parameter_count(), fx.trainable_parameters);
    if !run_forward {
        return;
    }
    let got = model.features(pattern_input(fx.input_size as usize)).unwrap();
    let scale = fx.features.iter().fold(0f32, |m, v| m.max(v.abs()));
    let worst = got
        .iter()
        .zip(&fx.features)
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    assert!(worst <= 1e-3 * scale, "{backbone}: max deviation {worst} (scale {scale})");
}

#[test]
fn alexnet_matches_torchvision() {
    check(Backbone::Alexnet, true);
}

#[test]
fn vgg16_matches_torchvision() {
    check(Backbone::Vgg16, true);
}

#[test]
fn resnet50_matches_torchvision() {
    check(Backbone::Resnet50, true);
}

#[test]
fn resnet101_matches_torchvision() {
    check(Backbone::Resnet101, true);
}

#[test]
fn efficientnet_b0_matches_torchvision() {
    check(Backbone::EfficientnetB0, true);
}

#[test]
fn inception_v3_matches_torchvision() {
    check(Backbone::InceptionV3, true);
}
