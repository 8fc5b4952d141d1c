//! Convolutional feature extractors. Layer and parameter names match the
//! torchvision `state_dict` layout, so pretrained checkpoints exported to
//! safetensors load directly. Every backbone ends in global average pooling
//! and yields a fixed-length feature vector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Conv2d, Layer, Network, ParamStore, Pool2d, Tensor};
use crate::raster;
use crate::{Error, Result};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Alexnet,
    EfficientnetB0,
    InceptionV3,
    Resnet50,
    Resnet101,
    Vgg16,
    TinyTest,
}

impl Backbone {
    pub const ALL: [Backbone; 7] = [
        Backbone::Alexnet,
        Backbone::EfficientnetB0,
        Backbone::InceptionV3,
        Backbone::Resnet50,
        Backbone::Resnet101,
        Backbone::Vgg16,
        Backbone::TinyTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Alexnet => "alexnet",
            Backbone::EfficientnetB0 => "efficientnet_b0",
            Backbone::InceptionV3 => "inception_v3",
            Backbone::Resnet50 => "resnet50",
            Backbone::Resnet101 => "resnet101",
            Backbone::Vgg16 => "vgg16",
            Backbone::TinyTest => "tiny_test",
        }
    }

    /// Square input side.
    pub fn input_size(self) -> u32 {
        match self {
            Backbone::InceptionV3 => 299,
            Backbone::TinyTest => 64,
            _ => 224,
        }
    }

    pub fn feature_dim(self) -> usize {
        match self {
            Backbone::Alexnet => 256,
            Backbone::EfficientnetB0 => 1280,
            Backbone::InceptionV3 | Backbone::Resnet50 | Backbone::Resnet101 => 2048,
            Backbone::Vgg16 => 512,
            Backbone::TinyTest => TINY_WIDTHS[1],
        }
    }

    /// Per-channel `(mean, std)` applied to `[0, 1]` pixel values. Inception
    /// checkpoints expect inputs scaled to `[-1, 1]`.
    pub fn normalization(self) -> ([f32; 3], [f32; 3]) {
        match self {
            Backbone::InceptionV3 => ([0.5; 3], [0.5; 3]),
            _ => (IMAGENET_MEAN, IMAGENET_STD),
        }
    }

    /// Name of the last spatial activation, the default saliency target.
    pub fn default_target_layer(self) -> &'static str {
        match self {
            Backbone::Alexnet => "features.11",
            Backbone::EfficientnetB0 => "features.8",
            Backbone::InceptionV3 => "Mixed_7c",
            Backbone::Resnet50 | Backbone::Resnet101 => "layer4",
            Backbone::Vgg16 => "features.29",
            Backbone::TinyTest => "block2",
        }
    }

    pub fn layers(self) -> Layer {
        match self {
            Backbone::Alexnet => alexnet(),
            Backbone::EfficientnetB0 => efficientnet_b0(),
            Backbone::InceptionV3 => inception_v3(),
            Backbone::Resnet50 => resnet(&[3, 4, 6, 3]),
            Backbone::Resnet101 => resnet(&[3, 4, 23, 3]),
            Backbone::Vgg16 => vgg16(),
            Backbone::TinyTest => tiny_test(),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown backbone `{s}`")))
    }
}

const TINY_WIDTHS: [usize; 2] = [16, 32];

fn conv_relu(name: String, in_c: usize, out_c: usize, k: usize) -> Vec<Layer> {
    vec![Layer::Conv(Conv2d::new(name, in_c, out_c, k)), Layer::relu()]
}

fn max_pool(kernel: usize, stride: usize, pad: usize) -> Layer {
    Layer::MaxPool(Pool2d { kernel, stride, pad })
}

fn tiny_test() -> Layer {
    let [a, b] = TINY_WIDTHS;
    Layer::seq(vec![
        Layer::Conv(Conv2d::new("block1.conv", 3, a, 3).stride(2)),
        Layer::relu(),
        Layer::Tap("block1".into()),
        Layer::Conv(Conv2d::new("block2.conv", a, b, 3).stride(2)),
        Layer::relu(),
        Layer::Tap("block2".into()),
        Layer::GlobalAvgPool,
    ])
}

fn alexnet() -> Layer {
    Layer::seq(vec![
        Layer::Conv(Conv2d::new("features.0", 3, 64, 11).stride(4).pad(2)),
        Layer::relu(),
        max_pool(3, 2, 0),
        Layer::Conv(Conv2d::new("features.3", 64, 192, 5)),
        Layer::relu(),
        max_pool(3, 2, 0),
        Layer::Conv(Conv2d::new("features.6", 192, 384, 3)),
        Layer::relu(),
        Layer::Conv(Conv2d::new("features.8", 384, 256, 3)),
        Layer::relu(),
        Layer::Conv(Conv2d::new("features.10", 256, 256, 3)),
        Layer::relu(),
        Layer::Tap("features.11".into()),
        max_pool(3, 2, 0),
        Layer::GlobalAvgPool,
    ])
}

fn vgg16() -> Layer {
    const CFG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
    let mut layers = Vec::new();
    let (mut idx, mut in_c) = (0usize, 3usize);
    for (i, &c) in CFG.iter().enumerate() {
        if c == 0 {
            if i == CFG.len() - 1 {
                layers.push(Layer::Tap(format!("features.{}", idx - 1)));
            }
            layers.push(max_pool(2, 2, 0));
            idx += 1;
        } else {
            layers.extend(conv_relu(format!("features.{idx}"), in_c, c, 3));
            in_c = c;
            idx += 2;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    Layer::seq(layers)
}

fn conv_bn(conv: Conv2d, bn: &str, eps: f32) -> Vec<Layer> {
    let out_c = conv.out_c;
    vec![Layer::Conv(conv.no_bias()), Layer::bn(bn, out_c, eps)]
}

fn resnet(blocks: &[usize; 4]) -> Layer {
    const EPS: f32 = 1e-5;
    let mut layers = conv_bn(Conv2d::new("conv1", 3, 64, 7).stride(2), "bn1", EPS);
    layers.push(Layer::relu());
    layers.push(max_pool(3, 2, 1));
    let mut in_c = 64;
    for (li, &n) in blocks.iter().enumerate() {
        let width = 64 << li;
        let stride = if li == 0 { 1 } else { 2 };
        for bi in 0..n {
            let p = format!("layer{}.{bi}", li + 1);
            let s = if bi == 0 { stride } else { 1 };
            let out_c = width * 4;
            let mut body = conv_bn(Conv2d::new(format!("{p}.conv1"), in_c, width, 1), &format!("{p}.bn1"), EPS);
            body.push(Layer::relu());
            body.extend(conv_bn(Conv2d::new(format!("{p}.conv2"), width, width, 3).stride(s), &format!("{p}.bn2"), EPS));
            body.push(Layer::relu());
            body.extend(conv_bn(Conv2d::new(format!("{p}.conv3"), width, out_c, 1), &format!("{p}.bn3"), EPS));
            let shortcut = (bi == 0).then(|| {
                Box::new(Layer::seq(conv_bn(
                    Conv2d::new(format!("{p}.downsample.0"), in_c, out_c, 1).stride(s).pad(0),
                    &format!("{p}.downsample.1"),
                    EPS,
                )))
            });
            layers.push(Layer::Residual { body: Box::new(Layer::seq(body)), shortcut, relu: true });
            in_c = out_c;
        }
        layers.push(Layer::Tap(format!("layer{}", li + 1)));
    }
    layers.push(Layer::GlobalAvgPool);
    Layer::seq(layers)
}

fn conv_bn_act(prefix: &str, conv: Conv2d, act: Option<Activation>, eps: f32) -> Layer {
    let mut v = conv_bn(conv, &format!("{prefix}.1"), eps);
    if let Some(a) = act {
        v.push(Layer::Act(a));
    }
    Layer::seq(v)
}

fn efficientnet_b0() -> Layer {
    const EPS: f32 = 1e-5;
    // expand ratio, kernel, stride, in, out, repeats
    const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 32, 16, 1),
        (6, 3, 2, 16, 24, 2),
        (6, 5, 2, 24, 40, 2),
        (6, 3, 2, 40, 80, 3),
        (6, 5, 1, 80, 112, 3),
        (6, 5, 2, 112, 192, 4),
        (6, 3, 1, 192, 320, 1),
    ];
    let silu = Some(Activation::Silu);
    let mut layers = vec![conv_bn_act("features.0", Conv2d::new("features.0.0", 3, 32, 3).stride(2), silu, EPS)];
    for (si, &(expand, k, stride, in0, out, n)) in STAGES.iter().enumerate() {
        for bi in 0..n {
            let p = format!("features.{}.{bi}.block", si + 1);
            let in_c = if bi == 0 { in0 } else { out };
            let s = if bi == 0 { stride } else { 1 };
            let mid = in_c * expand;
            let mut block = Vec::new();
            let mut idx = 0;
            if expand != 1 {
                block.push(conv_bn_act(&format!("{p}.0"), Conv2d::new(format!("{p}.0.0"), in_c, mid, 1), silu, EPS));
                idx += 1;
            }
            let dw = Conv2d::new(format!("{p}.{idx}.0"), mid, mid, k).stride(s).groups(mid);
            block.push(conv_bn_act(&format!("{p}.{idx}"), dw, silu, EPS));
            idx += 1;
            let sq = (in_c / 4).max(1);
            block.push(Layer::SqueezeExcite(Box::new(Layer::seq(vec![
                Layer::GlobalAvgPool,
                Layer::Conv(Conv2d::new(format!("{p}.{idx}.fc1"), mid, sq, 1)),
                Layer::Act(Activation::Silu),
                Layer::Conv(Conv2d::new(format!("{p}.{idx}.fc2"), sq, mid, 1)),
                Layer::Act(Activation::Sigmoid),
            ]))));
            idx += 1;
            block.push(conv_bn_act(&format!("{p}.{idx}"), Conv2d::new(format!("{p}.{idx}.0"), mid, out, 1), None, EPS));
            let block = Layer::seq(block);
            if s == 1 && in_c == out {
                layers.push(Layer::Residual { body: Box::new(block), shortcut: None, relu: false });
            } else {
                layers.push(block);
            }
        }
    }
    layers.push(conv_bn_act("features.8", Conv2d::new("features.8.0", 320, 1280, 1), silu, EPS));
    layers.push(Layer::Tap("features.8".into()));
    layers.push(Layer::GlobalAvgPool);
    Layer::seq(layers)
}

/// Conv (no bias) + BN(eps 1e-3) + ReLU, named `<name>.conv` / `<name>.bn`.
fn basic(name: &str, in_c: usize, out_c: usize, kh: usize, kw: usize, stride: usize, pad: (usize, usize)) -> Layer {
    let mut conv = Conv2d::new(format!("{name}.conv"), in_c, out_c, 1).kernel_hw(kh, kw).stride(stride).no_bias();
    conv.geometry.pad = pad;
    Layer::seq(vec![Layer::Conv(conv), Layer::bn(format!("{name}.bn"), out_c, 1e-3), Layer::relu()])
}

fn inception_a(p: &str, in_c: usize, pool_features: usize) -> Layer {
    let b = |n: &str| format!("{p}.{n}");
    Layer::Concat(vec![
        basic(&b("branch1x1"), in_c, 64, 1, 1, 1, (0, 0)),
        Layer::seq(vec![basic(&b("branch5x5_1"), in_c, 48, 1, 1, 1, (0, 0)), basic(&b("branch5x5_2"), 48, 64, 5, 5, 1, (2, 2))]),
        Layer::seq(vec![
            basic(&b("branch3x3dbl_1"), in_c, 64, 1, 1, 1, (0, 0)),
            basic(&b("branch3x3dbl_2"), 64, 96, 3, 3, 1, (1, 1)),
            basic(&b("branch3x3dbl_3"), 96, 96, 3, 3, 1, (1, 1)),
        ]),
        Layer::seq(vec![
            Layer::AvgPool(Pool2d { kernel: 3, stride: 1, pad: 1 }),
            basic(&b("branch_pool"), in_c, pool_features, 1, 1, 1, (0, 0)),
        ]),
    ])
}

fn inception_b(p: &str, in_c: usize) -> Layer {
    let b = |n: &str| format!("{p}.{n}");
    Layer::Concat(vec![
        basic(&b("branch3x3"), in_c, 384, 3, 3, 2, (0, 0)),
        Layer::seq(vec![
            basic(&b("branch3x3dbl_1"), in_c, 64, 1, 1, 1, (0, 0)),
            basic(&b("branch3x3dbl_2"), 64, 96, 3, 3, 1, (1, 1)),
            basic(&b("branch3x3dbl_3"), 96, 96, 3, 3, 2, (0, 0)),
        ]),
        max_pool(3, 2, 0),
    ])
}

fn inception_c(p: &str, c7: usize) -> Layer {
    let b = |n: &str| format!("{p}.{n}");
    Layer::Concat(vec![
        basic(&b("branch1x1"), 768, 192, 1, 1, 1, (0, 0)),
        Layer::seq(vec![
            basic(&b("branch7x7_1"), 768, c7, 1, 1, 1, (0, 0)),
            basic(&b("branch7x7_2"), c7, c7, 1, 7, 1, (0, 3)),
            basic(&b("branch7x7_3"), c7, 192, 7, 1, 1, (3, 0)),
        ]),
        Layer::seq(vec![
            basic(&b("branch7x7dbl_1"), 768, c7, 1, 1, 1, (0, 0)),
            basic(&b("branch7x7dbl_2"), c7, c7, 7, 1, 1, (3, 0)),
            basic(&b("branch7x7dbl_3"), c7, c7, 1, 7, 1, (0, 3)),
            basic(&b("branch7x7dbl_4"), c7, c7, 7, 1, 1, (3, 0)),
            basic(&b("branch7x7dbl_5"), c7, 192, 1, 7, 1, (0, 3)),
        ]),
        Layer::seq(vec![
            Layer::AvgPool(Pool2d { kernel: 3, stride: 1, pad: 1 }),
            basic(&b("branch_pool"), 768, 192, 1, 1, 1, (0, 0)),
        ]),
    ])
}

fn inception_d(p: &str) -> Layer {
    let b = |n: &str| format!("{p}.{n}");
    Layer::Concat(vec![
        Layer::seq(vec![basic(&b("branch3x3_1"), 768, 192, 1, 1, 1, (0, 0)), basic(&b("branch3x3_2"), 192, 320, 3, 3, 2, (0, 0))]),
        Layer::seq(vec![
            basic(&b("branch7x7x3_1"), 768, 192, 1, 1, 1, (0, 0)),
            basic(&b("branch7x7x3_2"), 192, 192, 1, 7, 1, (0, 3)),
            basic(&b("branch7x7x3_3"), 192, 192, 7, 1, 1, (3, 0)),
            basic(&b("branch7x7x3_4"), 192, 192, 3, 3, 2, (0, 0)),
        ]),
        max_pool(3, 2, 0),
    ])
}

fn inception_e(p: &str, in_c: usize) -> Layer {
    let b = |n: &str| format!("{p}.{n}");
    Layer::Concat(vec![
        basic(&b("branch1x1"), in_c, 320, 1, 1, 1, (0, 0)),
        Layer::seq(vec![
            basic(&b("branch3x3_1"), in_c, 384, 1, 1, 1, (0, 0)),
            Layer::Concat(vec![
                basic(&b("branch3x3_2a"), 384, 384, 1, 3, 1, (0, 1)),
                basic(&b("branch3x3_2b"), 384, 384, 3, 1, 1, (1, 0)),
            ]),
        ]),
        Layer::seq(vec![
            basic(&b("branch3x3dbl_1"), in_c, 448, 1, 1, 1, (0, 0)),
            basic(&b("branch3x3dbl_2"), 448, 384, 3, 3, 1, (1, 1)),
            Layer::Concat(vec![
                basic(&b("branch3x3dbl_3a"), 384, 384, 1, 3, 1, (0, 1)),
                basic(&b("branch3x3dbl_3b"), 384, 384, 3, 1, 1, (1, 0)),
            ]),
        ]),
        Layer::seq(vec![
            Layer::AvgPool(Pool2d { kernel: 3, stride: 1, pad: 1 }),
            basic(&b("branch_pool"), in_c, 192, 1, 1, 1, (0, 0)),
        ]),
    ])
}

fn inception_v3() -> Layer {
    Layer::seq(vec![
        basic("Conv2d_1a_3x3", 3, 32, 3, 3, 2, (0, 0)),
        basic("Conv2d_2a_3x3", 32, 32, 3, 3, 1, (0, 0)),
        basic("Conv2d_2b_3x3", 32, 64, 3, 3, 1, (1, 1)),
        max_pool(3, 2, 0),
        basic("Conv2d_3b_1x1", 64, 80, 1, 1, 1, (0, 0)),
        basic("Conv2d_4a_3x3", 80, 192, 3, 3, 1, (0, 0)),
        max_pool(3, 2, 0),
        inception_a("Mixed_5b", 192, 32),
        inception_a("Mixed_5c", 256, 64),
        inception_a("Mixed_5d", 288, 64),
        inception_b("Mixed_6a", 288),
        inception_c("Mixed_6b", 128),
        inception_c("Mixed_6c", 160),
        inception_c("Mixed_6d", 160),
        inception_c("Mixed_6e", 192),
        Layer::Tap("Mixed_6e".into()),
        inception_d("Mixed_7a"),
        inception_e("Mixed_7b", 1280),
        inception_e("Mixed_7c", 2048),
        Layer::Tap("Mixed_7c".into()),
        Layer::GlobalAvgPool,
    ])
}

/// A backbone bound to its weights.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub backbone: Backbone,
    pub net: Network,
}

impl FeatureExtractor {
    /// Randomly initialized weights (He-normal convs, identity batch norm).
    pub fn init(backbone: Backbone, seed: u64) -> Self {
        FeatureExtractor { backbone, net: Network::init(backbone.layers(), seed) }
    }

    /// Loads weights by name; tensors not used by the feature extractor
    /// (e.g. the original classifier) are ignored.
    pub fn from_params(backbone: Backbone, params: ParamStore) -> Result<Self> {
        let net = Network::with_params(backbone.layers(), params)
            .map_err(|e| Error::Model(format!("{backbone}: {e}")))?;
        Ok(FeatureExtractor { backbone, net })
    }

    pub fn load(backbone: Backbone, path: &Path) -> Result<Self> {
        let (params, _) = ParamStore::load(path)?;
        Self::from_params(backbone, params)
    }

    /// Resize to the nominal input and normalize into a `[1, 3, S, S]` tensor.
    pub fn preprocess(&self, image: &RgbImage) -> Tensor {
        let side = self.backbone.input_size();
        let resized = if image.dimensions() == (side, side) {
            image.clone()
        } else {
            raster::resize(image, side, side)
        };
        let (mean, std) = self.backbone.normalization();
        raster::to_chw(&resized, mean, std).insert_axis(Axis(0))
    }

    pub fn preprocess_batch(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let parts: Vec<Tensor> = images.iter().map(|im| self.preprocess(im)).collect();
        let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(format!("empty batch: {e}")))
    }

    /// Pooled features `[N, feature_dim]` for a preprocessed batch.
    pub fn features(&self, x: Tensor) -> Result<Array2<f32>> {
        if x.dim().1 != 3 {
            return Err(Error::invalid(format!("expected 3 input channels, got {}", x.dim().1)));
        }
        let y = self.net.forward(x)?;
        let (n, c, _, _) = y.dim();
        Ok(y.into_shape_with_order((n, c)).expect("pooled output"))
    }

    pub fn extract(&self, image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.features(self.preprocess(image))?.row(0).to_vec())
    }
}
