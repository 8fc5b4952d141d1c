use chickface::backbones::Backbone;
use chickface::classifier::{Classifier, ClassifierConfig};
use chickface::dataset::Gender;
use chickface::explain::*;
use chickface::nn::{Conv2d, Layer, Network, Tensor};
use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayD};
use proptest::prelude::*;

/// Pointwise 3 -> 1 averaging convolution, ReLU, tap, global average pool.
fn toy(bias: f32) -> Network {
    let layer = Layer::seq(vec![
        Layer::Conv(Conv2d::new("c", 3, 1, 1)),
        Layer::relu(),
        Layer::Tap("t".into()),
        Layer::GlobalAvgPool,
    ]);
    let mut net = Network::init(layer, 0);
    net.params.tensors.insert("c.weight".into(), ArrayD::from_elem(vec![1, 3, 1, 1], 1.0 / 3.0));
    net.params.tensors.insert("c.bias".into(), ArrayD::from_elem(vec![1], bias));
    net
}

fn sum_score(y: &Tensor) -> chickface::Result<(f64, Tensor)> {
    Ok((y.sum() as f64, Tensor::ones(y.raw_dim())))
}

fn patch_input(h: usize, w: usize, patch: (usize, usize, usize, usize)) -> Tensor {
    let (y0, x0, y1, x1) = patch;
    Tensor::from_shape_fn((1, 3, h, w), |(_, _, y, x)| if y >= y0 && y < y1 && x >= x0 && x < x1 { 1.0 } else { 0.1 })
}

#[test]
fn toy_model_localizes_bright_patch() {
    let (h, w) = (12, 16);
    let x = patch_input(h, w, (3, 9, 6, 13));
    let map = gradcam_pp_network(&toy(0.0), x.clone(), "t", sum_score, (w as u32, h as u32)).unwrap();

    // hand computation: A = input mean over channels, dS/dA = 1/(h*w) everywhere
    let a = Array2::from_shape_fn((h, w), |(y, xx)| x[[0, 0, y, xx]] as f64);
    let g = 1.0 / (h * w) as f64;
    let alpha = g * g / (2.0 * g * g + a.sum() * g * g * g);
    let weight = alpha * g * (h * w) as f64;
    let expected = a.mapv(|v| weight * v);
    let expected = expected.mapv(|v| v / expected.iter().cloned().fold(0.0, f64::max));
    for ((y, xx), &v) in map.data.indexed_iter() {
        assert!((v as f64 - expected[[y, xx]]).abs() < 1e-5);
    }
    let (px, py) = map.stats().peak;
    assert!((9..13).contains(&px) && (3..6).contains(&py), "{px},{py}");
}

#[test]
fn constant_activations_give_uniform_map() {
    let x = Tensor::from_elem((1, 3, 8, 8), 0.4);
    let map = gradcam_pp_network(&toy(0.0), x, "t", sum_score, (20, 10)).unwrap();
    assert_eq!(map.data.dim(), (10, 20));
    assert!(map.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
}

#[test]
fn unknown_layer_is_rejected() {
    let x = Tensor::from_elem((1, 3, 4, 4), 0.4);
    assert!(gradcam_pp_network(&toy(0.0), x, "nope", sum_score, (4, 4)).is_err());
}

#[test]
fn head_bias_shift_leaves_map_unchanged() {
    let cfg = ClassifierConfig { backbone: Backbone::TinyTest, head_dims: [8, 4, 1], ..Default::default() };
    let model = Classifier::init(&cfg).unwrap();
    let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, 90]));
    let a = gradcam_pp(&model, &img, None, Gender::Male).unwrap();
    let mut shifted = model.clone();
    shifted.head.params.get_mut("fc2.bias").unwrap().mapv_inplace(|b| b + 3.5);
    let b = gradcam_pp(&shifted, &img, None, Gender::Male).unwrap();
    assert_eq!(a, b);
}

fn tiny_model() -> Classifier {
    let cfg = ClassifierConfig { backbone: Backbone::TinyTest, head_dims: [8, 4, 1], seed: 11, ..Default::default() };
    Classifier::init(&cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn maps_are_nonnegative_normalized_and_sized(
        w in 8u32..70, h in 8u32..70, seed in any::<u32>(), male in any::<bool>(), early in any::<bool>()
    ) {
        let model = tiny_model();
        let img = RgbImage::from_fn(w, h, |x, y| {
            let v = (x.wrapping_mul(31) ^ y.wrapping_mul(17) ^ seed) as u8;
            Rgb([v, v.wrapping_mul(3), v.wrapping_add(50)])
        });
        let class = if male { Gender::Male } else { Gender::Female };
        let layer = if early { Some("block1") } else { None };
        let map = gradcam_pp(&model, &img, layer, class).unwrap();
        prop_assert_eq!(map.data.dim(), (h as usize, w as usize));
        prop_assert!(map.normalized);
        prop_assert!(map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = map.data.iter().cloned().fold(0.0f32, f32::max);
        prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-6);
        let over = overlay(&img, &map, 0.4).unwrap();
        prop_assert_eq!(over.dimensions(), img.dimensions());
    }
}

#[test]
fn explain_record_matches_prediction() {
    let model = tiny_model();
    let img = RgbImage::from_pixel(64, 64, Rgb([200, 40, 40]));
    let (pred, map, rec) = explain_prediction(&model, "img-1", &img, None).unwrap();
    assert_eq!(rec.predicted, pred.gender);
    assert_eq!(rec.target_layer, "block2");
    assert_eq!(rec.map, map.stats());
    assert_eq!(colorize(&map).dimensions(), (64, 64));
}
