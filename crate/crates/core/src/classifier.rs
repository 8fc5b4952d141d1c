//! Gender classification: a backbone feature extractor followed by three
//! fully connected layers and a sigmoid. Male is the positive class.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, FeatureExtractor};
use crate::dataset::Gender;
use crate::nn::{Adam, ParamStore, Tensor};
use crate::parallel::Execution;
use crate::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;
const SNAPSHOT_FORMAT: &str = "chickface-classifier/1";
/// Samples per gradient chunk; fixed so results do not depend on threads.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTune {
    /// Backbone and head are both updated.
    #[default]
    Full,
    /// Backbone frozen; features are computed once.
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    pub head_dims: [usize; 3],
    pub lr: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Safetensors file with backbone weights; random init when absent.
    pub pretrained_ref: Option<String>,
    pub batch_size: usize,
    pub fine_tune: FineTune,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: Backbone::Resnet50,
            head_dims: [512, 128, 1],
            lr: 1e-5,
            epochs: 50,
            threshold: 0.5,
            seed: 0,
            pretrained_ref: None,
            batch_size: 32,
            fine_tune: FineTune::Full,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.head_dims[2] != 1 || self.head_dims[..2].contains(&0) {
            return Err(Error::invalid(format!("head dims must be [a, b, 1] with a, b > 0, got {:?}", self.head_dims)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// Male iff `p > threshold`.
pub fn decide_gender(p: f64, threshold: f64) -> Gender {
    if p > threshold {
        Gender::Male
    } else {
        Gender::Female
    }
}

/// Binary cross-entropy with `p` clamped to `[eps, 1 - eps]`; `label` is 1 for male.
pub fn bce_loss(p: f64, label: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Derivative of `bce_loss(sigmoid(logit), label)` with respect to the logit.
fn bce_logit_grad(logit: f64, label: f64) -> f64 {
    let p = sigmoid(logit);
    if p < BCE_EPS || p > 1.0 - BCE_EPS {
        0.0
    } else {
        p - label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p: f64,
    pub gender: Gender,
    pub logit: f64,
}

impl Prediction {
    pub fn from_logit(logit: f64, threshold: f64) -> Self {
        let p = sigmoid(logit);
        Prediction { p, gender: decide_gender(p, threshold), logit }
    }
}

/// Three affine layers with ReLU between them, in f64.
/// Parameters are `fc{i}.weight` (`[out, in]`) and `fc{i}.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub input_dim: usize,
    pub dims: [usize; 3],
    pub params: BTreeMap<String, ArrayD<f64>>,
}

pub struct HeadCache {
    inputs: [Array2<f64>; 3],
    pre: [Array2<f64>; 2],
}

impl Head {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` for weights and biases.
    pub fn init(input_dim: usize, dims: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut fan_in = input_dim;
        for (i, &out) in dims.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = ArrayD::from_shape_simple_fn(vec![out, fan_in], || rng.random_range(-bound..bound));
            let b = ArrayD::from_shape_simple_fn(vec![out], || rng.random_range(-bound..bound));
            params.insert(format!("fc{i}.weight"), w);
            params.insert(format!("fc{i}.bias"), b);
            fan_in = out;
        }
        Head { input_dim, dims, params }
    }

    fn weight(&self, i: usize) -> ArrayView2<'_, f64> {
        self.params[&format!("fc{i}.weight")].view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    fn bias(&self, i: usize) -> &ArrayD<f64> {
        &self.params[&format!("fc{i}.bias")]
    }

    fn check(&self) -> Result<()> {
        let mut fan_in = self.input_dim;
        for (i, &out) in self.dims.iter().enumerate() {
            let w = self.params.get(&format!("fc{i}.weight")).map(|w| w.shape().to_vec());
            let b = self.params.get(&format!("fc{i}.bias")).map(|b| b.shape().to_vec());
            if w != Some(vec![out, fan_in]) || b != Some(vec![out]) {
                return Err(Error::Model(format!("head layer fc{i} has wrong shape")));
            }
            fan_in = out;
        }
        Ok(())
    }

    /// Logit of one feature vector.
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: features.len() });
        }
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).expect("row");
        Ok(self.forward_batch(&x)?.0[0])
    }

    /// Logits `[N]` for features `[N, D]`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<(Array1<f64>, HeadCache)> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, got: x.ncols() });
        }
        let affine = |i: usize, a: &Array2<f64>| {
            let b = self.bias(i).view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            a.dot(&self.weight(i).t()) + &b
        };
        let z0 = affine(0, x);
        let a0 = z0.mapv(|v| v.max(0.0));
        let z1 = affine(1, &a0);
        let a1 = z1.mapv(|v| v.max(0.0));
        let z2 = affine(2, &a1);
        let logits = z2.column(0).to_owned();
        Ok((logits, HeadCache { inputs: [x.clone(), a0, a1], pre: [z0, z1] }))
    }

    /// Gradients of `sum_n dlogits[n] * logit[n]`: parameter gradients and
    /// the gradient with respect to the input features.
    pub fn backward(&self, cache: &HeadCache, dlogits: &Array1<f64>) -> (BTreeMap<String, ArrayD<f64>>, Array2<f64>) {
        let mut grads = BTreeMap::new();
        let mut dz = dlogits.view().insert_axis(Axis(1)).to_owned();
        for i in (0..3).rev() {
            let a = &cache.inputs[i];
            grads.insert(format!("fc{i}.weight"), dz.t().dot(a).into_dyn());
            grads.insert(format!("fc{i}.bias"), dz.sum_axis(Axis(0)).into_dyn());
            let mut da = dz.dot(&self.weight(i));
            if i > 0 {
                ndarray::Zip::from(&mut da).and(&cache.pre[i - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            dz = da;
        }
        (grads, dz)
    }

    /// Mean BCE over the batch with its gradients (parameters, input).
    pub fn loss_and_grads(&self, x: &Array2<f64>, labels: &[f64]) -> Result<(f64, BTreeMap<String, ArrayD<f64>>, Array2<f64>)> {
        if labels.len() != x.nrows() || labels.is_empty() {
            return Err(Error::DimensionMismatch { expected: x.nrows(), got: labels.len() });
        }
        let (sum, grads, dx) = self.sum_loss_grads(x, labels)?;
        let n = labels.len() as f64;
        let grads = grads.into_iter().map(|(k, g)| (k, g / n)).collect();
        Ok((sum / n, grads, dx / n))
    }

    fn sum_loss_grads(&self, x: &Array2<f64>, labels: &[f64]) -> Result<(f64, BTreeMap<String, ArrayD<f64>>, Array2<f64>)> {
        let (logits, cache) = self.forward_batch(x)?;
        let loss = logits.iter().zip(labels).map(|(&l, &y)| bce_loss(sigmoid(l), y)).sum();
        let dl = Array1::from_iter(logits.iter().zip(labels).map(|(&l, &y)| bce_logit_grad(l, y)));
        let (grads, dx) = self.backward(&cache, &dl);
        Ok((loss, grads, dx))
    }
}

/// Backbone plus head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub extractor: FeatureExtractor,
    pub head: Head,
}

impl Classifier {
    pub fn init(cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let extractor = match &cfg.pretrained_ref {
            Some(path) => FeatureExtractor::load(cfg.backbone, Path::new(path))?,
            None => FeatureExtractor::init(cfg.backbone, cfg.seed),
        };
        let head = Head::init(cfg.backbone.feature_dim(), cfg.head_dims, cfg.seed ^ 0x6865_6164);
        Ok(Classifier { cfg: cfg.clone(), extractor, head })
    }

    fn features64(&self, x: Tensor) -> Result<Array2<f64>> {
        Ok(self.extractor.features(x)?.mapv(f64::from))
    }

    pub fn logits_of(&self, x: Tensor) -> Result<Array1<f64>> {
        let f = self.features64(x)?;
        Ok(self.head.forward_batch(&f)?.0)
    }

    pub fn logit(&self, image: &RgbImage) -> Result<f64> {
        Ok(self.logits_of(self.extractor.preprocess(image))?[0])
    }

    pub fn predict(&self, image: &RgbImage) -> Result<Prediction> {
        Ok(Prediction::from_logit(self.logit(image)?, self.cfg.threshold))
    }

    pub fn predict_batch(&self, images: &[&RgbImage], exec: Execution) -> Result<Vec<Prediction>> {
        let logits = exec.map_chunks(images, CHUNK, |chunk| self.logits_of(self.extractor.preprocess_batch(chunk)?));
        let mut out = Vec::with_capacity(images.len());
        for part in logits {
            out.extend(part?.iter().map(|&l| Prediction::from_logit(l, self.cfg.threshold)));
        }
        Ok(out)
    }

    /// Safetensors bytes: backbone weights as f32 under `backbone.`, head as
    /// f64 under `head.`, config in the metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        for (k, t) in &self.extractor.net.params.tensors {
            buffers.push((format!("backbone.{k}"), Dtype::F32, t.shape().to_vec(), t.iter().flat_map(|v| v.to_le_bytes()).collect()));
        }
        for (k, t) in &self.head.params {
            buffers.push((format!("head.{k}"), Dtype::F64, t.shape().to_vec(), t.iter().flat_map(|v| v.to_le_bytes()).collect()));
        }
        let views = buffers
            .iter()
            .map(|(k, dtype, shape, bytes)| {
                TensorView::new(*dtype, shape.clone(), bytes).map(|v| (k.clone(), v)).map_err(|e| Error::Model(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([
            ("format".to_string(), SNAPSHOT_FORMAT.to_string()),
            ("config".to_string(), serde_json::to_string(&self.cfg)?),
        ]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Model(e.to_string()))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(SNAPSHOT_FORMAT) {
            return Err(Error::Model("not a classifier snapshot".into()));
        }
        let cfg: ClassifierConfig = serde_json::from_str(meta.get("config").map(String::as_str).unwrap_or("{}"))?;
        cfg.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Model(e.to_string()))?;
        let mut backbone = ParamStore::default();
        let mut head = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            if let Some(k) = name.strip_prefix("head.") {
                let values = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                head.insert(k.to_string(), ArrayD::from_shape_vec(shape, values).map_err(|e| Error::Model(e.to_string()))?);
            } else if let Some(k) = name.strip_prefix("backbone.") {
                let values = view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                backbone.tensors.insert(k.to_string(), ArrayD::from_shape_vec(shape, values).map_err(|e| Error::Model(e.to_string()))?);
            }
        }
        let extractor = FeatureExtractor::from_params(cfg.backbone, backbone)?;
        let head = Head { input_dim: cfg.backbone.feature_dim(), dims: cfg.head_dims, params: head };
        head.check()?;
        Ok(Classifier { cfg, extractor, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| Error::Model(format!("{}: {e}", path.display())))
    }
}

/// One labelled crop.
#[derive(Clone, Debug)]
pub struct ClassifierSample {
    pub chick_id: String,
    pub image_id: String,
    pub gender: Gender,
    pub image: RgbImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct BestEpoch<M> {
    /// 1-based; 0 means the untrained model.
    pub epoch: usize,
    pub val_accuracy: f64,
    pub model: M,
    /// Validation logits of this model, in validation order.
    pub val_logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best: BestEpoch<M>,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn check_protocol(train: &[ClassifierSample], val: &[ClassifierSample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.chick_id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(s.chick_id.as_str())) {
        return Err(Error::Protocol(format!("chick `{}` appears in both training and validation", s.chick_id)));
    }
    Ok(())
}

fn accuracy(logits: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&l, &y)| (decide_gender(sigmoid(l), threshold) == Gender::Male) == (y > 0.5))
        .count();
    hits as f64 / labels.len() as f64
}

/// Adam on mean BCE over mini-batches shuffled per epoch. Keeps the earliest
/// epoch with the highest validation accuracy.
fn fit<M: Clone>(
    model: &mut M,
    n_train: usize,
    train_labels: &[f64],
    val_labels: &[f64],
    cfg: &ClassifierConfig,
    mut batch_step: impl FnMut(&mut M, &[usize]) -> Result<f64>,
    val_logits: impl Fn(&M) -> Result<Vec<f64>>,
) -> Result<TrainOutcome<M>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
    let mut order: Vec<usize> = (0..n_train).collect();
    let initial = val_logits(model)?;
    let mut best = BestEpoch {
        epoch: 0,
        val_accuracy: accuracy(&initial, val_labels, cfg.threshold),
        model: model.clone(),
        val_logits: initial,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            loss += batch_step(model, batch)? * batch.len() as f64;
        }
        let logits = val_logits(model)?;
        let val_accuracy = accuracy(&logits, val_labels, cfg.threshold);
        history.push(EpochRecord { epoch, train_loss: loss / train_labels.len() as f64, val_accuracy });
        if epoch == 1 || val_accuracy > best.val_accuracy {
            best = BestEpoch { epoch, val_accuracy, model: model.clone(), val_logits: logits };
        }
    }
    Ok(TrainOutcome { model: model.clone(), history, best })
}

/// Trains only a head on precomputed features (`[N, D]` rows, labels 1 = male).
pub fn train_head(
    train: (&Array2<f64>, &[f64]),
    val: (&Array2<f64>, &[f64]),
    cfg: &ClassifierConfig,
) -> Result<TrainOutcome<Head>> {
    cfg.validate()?;
    if train.1.is_empty() || val.1.is_empty() || train.0.nrows() != train.1.len() || val.0.nrows() != val.1.len() {
        return Err(Error::invalid("feature/label sets must be non-empty and aligned"));
    }
    let mut head = Head::init(train.0.ncols(), cfg.head_dims, cfg.seed ^ 0x6865_6164);
    let mut opt = Adam::new(cfg.lr);
    fit(
        &mut head,
        train.1.len(),
        train.1,
        val.1,
        cfg,
        |head, batch| {
            let x = train.0.select(Axis(0), batch);
            let y: Vec<f64> = batch.iter().map(|&i| train.1[i]).collect();
            let (loss, grads, _) = head.loss_and_grads(&x, &y)?;
            opt.step(&mut head.params, &grads);
            Ok(loss)
        },
        |head| Ok(head.forward_batch(val.0)?.0.to_vec()),
    )
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let views: Vec<_> = parts.iter().map(|t| t.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same input size")
}

fn batched_features(extractor: &FeatureExtractor, inputs: &[Tensor], exec: Execution) -> Result<Array2<f64>> {
    let parts = exec.map_chunks(inputs, CHUNK, |chunk| {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        Ok::<_, Error>(extractor.features(stack(&refs))?.mapv(f64::from))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("feature rows"))
}

/// Summed loss and gradients of one chunk through backbone and head.
fn full_chunk(model: &Classifier, inputs: &[&Tensor], labels: &[f64]) -> Result<(f64, ParamStore, BTreeMap<String, ArrayD<f64>>)> {
    let (y, trace) = model.extractor.net.forward_traced(stack(inputs), false)?;
    let (n, d, _, _) = y.dim();
    let f = y.into_shape_with_order((n, d)).expect("pooled").mapv(f64::from);
    let (loss, head_grads, df) = model.head.sum_loss_grads(&f, labels)?;
    let dy = df.mapv(|v| v as f32).into_shape_with_order((n, d, 1, 1)).expect("pooled grad");
    let grads = model.extractor.net.backward(trace, dy, true)?.params.unwrap_or_default();
    Ok((loss, grads, head_grads))
}

pub fn train_classifier(train: &[ClassifierSample], val: &[ClassifierSample], cfg: &ClassifierConfig) -> Result<TrainOutcome<Classifier>> {
    train_classifier_with(train, val, cfg, Execution::default())
}

/// Trains on `train`, selecting the best epoch on `val`. Chick IDs must not
/// overlap between the two sets.
pub fn train_classifier_with(
    train: &[ClassifierSample],
    val: &[ClassifierSample],
    cfg: &ClassifierConfig,
    exec: Execution,
) -> Result<TrainOutcome<Classifier>> {
    cfg.validate()?;
    check_protocol(train, val)?;
    let mut model = Classifier::init(cfg)?;
    let train_x: Vec<Tensor> = exec.map(train, |s| model.extractor.preprocess(&s.image));
    let val_x: Vec<Tensor> = exec.map(val, |s| model.extractor.preprocess(&s.image));
    let train_y: Vec<f64> = train.iter().map(|s| s.gender.label()).collect();
    let val_y: Vec<f64> = val.iter().map(|s| s.gender.label()).collect();

    match cfg.fine_tune {
        FineTune::HeadOnly => {
            let ftr = batched_features(&model.extractor, &train_x, exec)?;
            let fval = batched_features(&model.extractor, &val_x, exec)?;
            let out = train_head((&ftr, &train_y), (&fval, &val_y), cfg)?;
            let wrap = |head: Head| Classifier { cfg: cfg.clone(), extractor: model.extractor.clone(), head };
            Ok(TrainOutcome {
                model: wrap(out.model),
                history: out.history,
                best: BestEpoch {
                    epoch: out.best.epoch,
                    val_accuracy: out.best.val_accuracy,
                    model: wrap(out.best.model),
                    val_logits: out.best.val_logits,
                },
            })
        }
        FineTune::Full => {
            let mut opt_backbone = Adam::new(cfg.lr as f32);
            let mut opt_head = Adam::new(cfg.lr);
            fit(
                &mut model,
                train.len(),
                &train_y,
                &val_y,
                cfg,
                |model, batch| {
                    let items: Vec<(&Tensor, f64)> = batch.iter().map(|&i| (&train_x[i], train_y[i])).collect();
                    let parts = exec.map_chunks(&items, CHUNK, |c| {
                        let xs: Vec<&Tensor> = c.iter().map(|p| p.0).collect();
                        let ys: Vec<f64> = c.iter().map(|p| p.1).collect();
                        full_chunk(model, &xs, &ys)
                    });
                    let mut loss = 0.0;
                    let mut gb = ParamStore::default();
                    let mut gh: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
                    for part in parts {
                        let (l, b, h) = part?;
                        loss += l;
                        gb.accumulate(&b);
                        for (k, g) in h {
                            match gh.get_mut(&k) {
                                Some(acc) => *acc += &g,
                                None => {
                                    gh.insert(k, g);
                                }
                            }
                        }
                    }
                    let n = batch.len() as f64;
                    gb.scale(1.0 / n as f32);
                    gh.values_mut().for_each(|g| g.mapv_inplace(|v| v / n));
                    opt_backbone.step(&mut model.extractor.net.params.tensors, &gb.tensors);
                    opt_head.step(&mut model.head.params, &gh);
                    Ok(loss / n)
                },
                |model| {
                    let f = batched_features(&model.extractor, &val_x, exec)?;
                    Ok(model.head.forward_batch(&f)?.0.to_vec())
                },
            )
        }
    }
}
