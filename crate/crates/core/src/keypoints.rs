//! Seven-channel heatmap keypoint regression: Gaussian targets, argmax
//! decoding with a quarter-cell refinement, and a small fully convolutional
//! model trained with per-pixel MSE.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Keypoint, KeypointSet, Point2};
use crate::nn::{Adam, Conv2d, Layer, Network, ParamStore, Tensor};
use crate::parallel::Execution;
use crate::raster;
use crate::{Error, Result};

pub const NUM_KEYPOINTS: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmaps {
    /// `[7, H', W']`, channel order = canonical keypoint order.
    pub data: Array3<f32>,
    /// Input pixels per heatmap cell.
    pub stride: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointModelConfig {
    /// `(height, width)` of the model input.
    pub input_size: (u32, u32),
    pub stride: u32,
    /// Gaussian width of the targets, in heatmap cells.
    pub sigma: f64,
    pub backbone_ref: String,
    pub visibility_floor: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub width: usize,
}

impl Default for KeypointModelConfig {
    fn default() -> Self {
        KeypointModelConfig {
            input_size: (256, 256),
            stride: 4,
            sigma: 2.0,
            backbone_ref: "fcn".into(),
            visibility_floor: 0.1,
            lr: 1e-3,
            batch_size: 8,
            width: 32,
        }
    }
}

impl KeypointModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.stride == 0 || !self.stride.is_power_of_two() || h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "stride {} must be a power of two dividing input {h}x{w}",
                self.stride
            )));
        }
        if !(self.sigma > 0.0) || self.batch_size == 0 || !(self.lr > 0.0) || self.width == 0 {
            return Err(Error::invalid(format!("invalid keypoint config {self:?}")));
        }
        if self.backbone_ref != "fcn" {
            return Err(Error::Model(format!("unknown keypoint backbone `{}`", self.backbone_ref)));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        ((self.input_size.0 / self.stride) as usize, (self.input_size.1 / self.stride) as usize)
    }
}

/// Renders unnormalized Gaussians (peak 1) centred on each visible keypoint;
/// invisible keypoints give all-zero channels. Keypoints are in model-input
/// pixel coordinates. Cell `(i, j)` is centred at `((j+0.5)*stride, (i+0.5)*stride)`.
pub fn render_targets(kps: &KeypointSet, cfg: &KeypointModelConfig) -> Result<Heatmaps> {
    cfg.validate()?;
    let (h, w) = cfg.input_size;
    kps.validate(w as f64, h as f64)?;
    let (gh, gw) = cfg.grid();
    let stride = cfg.stride as f64;
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let mut data = Array3::<f32>::zeros((NUM_KEYPOINTS, gh, gw));
    for (c, (_, k)) in kps.iter().enumerate() {
        if !k.visible {
            continue;
        }
        let cx = k.point.x / stride - 0.5;
        let cy = k.point.y / stride - 0.5;
        for ((i, j), v) in data.index_axis_mut(Axis(0), c).indexed_iter_mut() {
            let d2 = (j as f64 - cx).powi(2) + (i as f64 - cy).powi(2);
            *v = (-d2 / denom).exp() as f32;
        }
    }
    Ok(Heatmaps { data, stride: cfg.stride })
}

/// Argmax per channel, moved a quarter cell toward the larger neighbour on
/// each axis (no move on ties or at the border), then scaled from the model
/// input `(input_w, input_h)` to `orig_size`. Channels whose maximum is below
/// `visibility_floor` decode as invisible.
pub fn decode(heatmaps: &Heatmaps, orig_size: (f64, f64), visibility_floor: f32) -> KeypointSet {
    let (_, gh, gw) = heatmaps.data.dim();
    let stride = heatmaps.stride as f64;
    let (in_w, in_h) = (gw as f64 * stride, gh as f64 * stride);
    let mut entries = [Keypoint::default(); NUM_KEYPOINTS];
    for (c, entry) in entries.iter_mut().enumerate() {
        let ch = heatmaps.data.index_axis(Axis(0), c);
        let (mut best, mut at) = (f32::NEG_INFINITY, (0usize, 0usize));
        for ((i, j), &v) in ch.indexed_iter() {
            if v > best {
                best = v;
                at = (i, j);
            }
        }
        let (i, j) = at;
        let quarter = |lo: f32, hi: f32| -> f64 {
            if hi > lo {
                0.25
            } else if lo > hi {
                -0.25
            } else {
                0.0
            }
        };
        let dx = if j > 0 && j + 1 < gw { quarter(ch[[i, j - 1]], ch[[i, j + 1]]) } else { 0.0 };
        let dy = if i > 0 && i + 1 < gh { quarter(ch[[i - 1, j]], ch[[i + 1, j]]) } else { 0.0 };
        let x = (j as f64 + 0.5 + dx) * stride * orig_size.0 / in_w;
        let y = (i as f64 + 0.5 + dy) * stride * orig_size.1 / in_h;
        *entry = Keypoint { point: Point2::new(x, y), visible: best >= visibility_floor };
    }
    KeypointSet::new(entries)
}

/// Anything that maps a face image to seven heatmaps.
pub trait HeatmapModel: Send + Sync {
    fn config(&self) -> &KeypointModelConfig;
    fn heatmaps(&self, face_image: &RgbImage) -> Result<Heatmaps>;
}

/// Resize, run the model, decode, map back to `face_image` coordinates.
pub fn predict_keypoints(face_image: &RgbImage, model: &dyn HeatmapModel) -> Result<KeypointSet> {
    let (w, h) = face_image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty face image"));
    }
    let hm = model.heatmaps(face_image).map_err(|e| match e {
        Error::Model(m) => Error::Model(m),
        other => Error::Model(other.to_string()),
    })?;
    Ok(decode(&hm, (w as f64, h as f64), model.config().visibility_floor))
}

/// Fully convolutional heatmap regressor over RGB plus two coordinate
/// channels; downsamples by `stride` with strided 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct KeypointModel {
    pub cfg: KeypointModelConfig,
    pub net: Network,
}

const INPUT_CHANNELS: usize = 5;
const MEAN: [f32; 3] = [0.5; 3];
const STD: [f32; 3] = [0.25; 3];
/// Samples per gradient chunk; fixed so results do not depend on threads.
const CHUNK: usize = 4;

fn fcn(cfg: &KeypointModelConfig) -> Layer {
    let w = cfg.width;
    let mut layers = vec![Layer::Conv(Conv2d::new("stem", INPUT_CHANNELS, w / 2, 3)), Layer::relu()];
    let mut c = w / 2;
    for d in 0..cfg.stride.trailing_zeros() {
        layers.push(Layer::Conv(Conv2d::new(format!("down{d}"), c, w, 3).stride(2)));
        layers.push(Layer::relu());
        c = w;
    }
    for k in 0..2 {
        layers.push(Layer::Conv(Conv2d::new(format!("context{k}"), c, w, 3)));
        layers.push(Layer::relu());
        c = w;
    }
    layers.push(Layer::Conv(Conv2d::new("head", c, NUM_KEYPOINTS, 1)));
    Layer::seq(layers)
}

impl KeypointModel {
    pub fn init(cfg: KeypointModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = Network::init(fcn(&cfg), seed);
        Ok(KeypointModel { cfg, net })
    }

    /// `[1, 5, H, W]`: normalized RGB and x/y coordinates in `[-1, 1]`.
    pub fn preprocess(&self, face_image: &RgbImage) -> Tensor {
        let (h, w) = self.cfg.input_size;
        let img = raster::resize(face_image, w, h);
        let rgb = raster::to_chw(&img, MEAN, STD);
        let (h, w) = (h as usize, w as usize);
        let mut x = Tensor::zeros((1, INPUT_CHANNELS, h, w));
        x.slice_mut(s![0, 0..3, .., ..]).assign(&rgb);
        for i in 0..h {
            for j in 0..w {
                x[[0, 3, i, j]] = (j as f32 + 0.5) / w as f32 * 2.0 - 1.0;
                x[[0, 4, i, j]] = (i as f32 + 0.5) / h as f32 * 2.0 - 1.0;
            }
        }
        x
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = BTreeMap::from([
            ("kind".to_string(), "keypoints".to_string()),
            ("config".to_string(), serde_json::to_string(&self.cfg)?),
        ]);
        self.net.params.to_safetensors(&meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = ParamStore::from_safetensors(bytes)?;
        let cfg: KeypointModelConfig = match (meta.get("kind").map(String::as_str), meta.get("config")) {
            (Some("keypoints"), Some(c)) => serde_json::from_str(c)?,
            _ => return Err(Error::Model("not a keypoint model snapshot".into())),
        };
        cfg.validate()?;
        let net = Network::with_params(fcn(&cfg), params)?;
        Ok(KeypointModel { cfg, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
    }
}

impl HeatmapModel for KeypointModel {
    fn config(&self) -> &KeypointModelConfig {
        &self.cfg
    }

    fn heatmaps(&self, face_image: &RgbImage) -> Result<Heatmaps> {
        let y = self.net.forward(self.preprocess(face_image))?;
        let data = y.index_axis(Axis(0), 0).mapv(|v| v.max(0.0));
        Ok(Heatmaps { data, stride: self.cfg.stride })
    }
}

/// One training example: a face image with keypoints in its own pixel frame.
#[derive(Clone, Debug)]
pub struct KeypointSample {
    pub image: RgbImage,
    pub keypoints: KeypointSet,
}

struct Prepared {
    input: Tensor,
    target: Array3<f32>,
}

fn prepare(model: &KeypointModel, s: &KeypointSample) -> Result<Prepared> {
    let (w, h) = s.image.dimensions();
    let (ih, iw) = model.cfg.input_size;
    let (sx, sy) = (iw as f64 / w as f64, ih as f64 / h as f64);
    let kps = s.keypoints.map_points(|p| Point2::new(p.x * sx, p.y * sy));
    let target = render_targets(&kps, &model.cfg)?.data;
    Ok(Prepared { input: model.preprocess(&s.image), target })
}

/// Summed squared error and parameter gradients of the summed loss for a chunk.
fn chunk_loss_grad(model: &KeypointModel, chunk: &[&Prepared], elems: f32) -> Result<(f64, ParamStore)> {
    let views: Vec<_> = chunk.iter().map(|p| p.input.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("same input size");
    let (y, trace) = model.net.forward_traced(x, false)?;
    let mut dy = Tensor::zeros(y.raw_dim());
    let mut loss = 0.0f64;
    for (n, p) in chunk.iter().enumerate() {
        let diff = &y.index_axis(Axis(0), n) - &p.target;
        loss += diff.iter().map(|d| (*d as f64).powi(2)).sum::<f64>() / elems as f64;
        dy.index_axis_mut(Axis(0), n).assign(&(diff * (2.0 / elems)));
    }
    let grads = model.net.backward(trace, dy, true)?.params.unwrap_or_default();
    Ok((loss, grads))
}

/// Trains with Adam on mean per-pixel squared error. Returns the model and the
/// mean training loss of every epoch. Deterministic for a given seed.
pub fn train_keypoint_model(
    samples: &[KeypointSample],
    cfg: &KeypointModelConfig,
    epochs: usize,
    seed: u64,
    exec: Execution,
) -> Result<(KeypointModel, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::invalid("empty keypoint training set"));
    }
    let mut model = KeypointModel::init(cfg.clone(), seed)?;
    let prepared = exec.map(samples, |s| prepare(&model, s)).into_iter().collect::<Result<Vec<_>>>()?;
    let (gh, gw) = cfg.grid();
    let elems = (NUM_KEYPOINTS * gh * gw) as f32;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7970);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let parts = exec.map_chunks(&items, CHUNK, |c| chunk_loss_grad(&model, c, elems));
            let mut grads = ParamStore::default();
            for part in parts {
                let (l, g) = part?;
                epoch_loss += l;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f32);
            opt.step(&mut model.net.params.tensors, &grads.tensors);
        }
        history.push(epoch_loss / prepared.len() as f64);
    }
    Ok((model, history))
}
