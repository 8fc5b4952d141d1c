//! Minimal f32 CNN engine: a tree of layers evaluated over `[N, C, H, W]`
//! tensors, with reverse-mode gradients for parameters, inputs and named taps.
//!
//! Parameter names follow the dotted `state_dict` convention so checkpoints
//! exported from other frameworks load by name. Batch norm always uses its
//! running statistics.

pub mod adam;
pub mod conv;
pub mod params;

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array4, Axis, Ix1, Ix4, Zip};

pub use adam::Adam;
pub use conv::ConvGeometry;
pub use params::{ParamKind, ParamSpec, ParamStore};

use crate::{Error, Result};

pub type Tensor = Array4<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub geometry: ConvGeometry,
    pub bias: bool,
}

impl Conv2d {
    /// Square kernel, stride 1, "same" padding, with bias.
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_c,
            out_c,
            geometry: ConvGeometry { kernel: (k, k), stride: (1, 1), pad: (k / 2, k / 2), groups: 1 },
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.geometry.stride = (s, s);
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.geometry.pad = (p, p);
        self
    }

    pub fn kernel_hw(mut self, kh: usize, kw: usize) -> Self {
        self.geometry.kernel = (kh, kw);
        self.geometry.pad = (kh / 2, kw / 2);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.geometry.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Act(Activation),
    MaxPool(Pool2d),
    /// Average pooling; padded cells count towards the divisor.
    AvgPool(Pool2d),
    GlobalAvgPool,
    Seq(Vec<Layer>),
    /// `body(x) + shortcut(x)` (identity shortcut when `None`), optionally
    /// followed by ReLU.
    Residual { body: Box<Layer>, shortcut: Option<Box<Layer>>, relu: bool },
    /// Runs every branch on the same input and concatenates channels.
    Concat(Vec<Layer>),
    /// `x * gate(x)` where the gate yields `[N, C, 1, 1]`.
    SqueezeExcite(Box<Layer>),
    /// Identity that exposes its activation and gradient under a name.
    Tap(String),
}

pub enum Cache {
    None,
    Input(Tensor),
    Output(Tensor),
    MaxPool { argmax: Array4<u32>, input_dim: (usize, usize, usize, usize) },
    Shape((usize, usize, usize, usize)),
    Seq(Vec<Cache>),
    Residual { body: Box<Cache>, shortcut: Box<Cache>, output: Option<Tensor> },
    Concat { caches: Vec<Cache>, channels: Vec<usize> },
    SqueezeExcite { input: Tensor, gate: Tensor, inner: Box<Cache> },
}

struct Pass {
    trace: bool,
    taps: Option<BTreeMap<String, Tensor>>,
}

struct Backprop<'a> {
    grads: Option<&'a mut ParamStore>,
    tap_grads: BTreeMap<String, Tensor>,
}

fn view4<'a>(p: &'a ParamStore, key: &str) -> Result<ndarray::ArrayView4<'a, f32>> {
    p.get(key)?
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::Model(format!("`{key}`: {e}")))
}

fn view1<'a>(p: &'a ParamStore, key: &str) -> Result<ndarray::ArrayView1<'a, f32>> {
    p.get(key)?
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|e| Error::Model(format!("`{key}`: {e}")))
}

impl BatchNorm {
    fn affine(&self, p: &ParamStore) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        let gamma = view1(p, &format!("{}.weight", self.name))?;
        let beta = view1(p, &format!("{}.bias", self.name))?;
        let mean = view1(p, &format!("{}.running_mean", self.name))?;
        let var = view1(p, &format!("{}.running_var", self.name))?;
        let inv: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let scale: Vec<f32> = gamma.iter().zip(&inv).map(|(g, i)| g * i).collect();
        let shift = beta.iter().zip(mean.iter()).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        Ok((scale, shift, inv))
    }
}

fn pooled_dims(x: &Tensor, pool: &Pool2d) -> Result<(usize, usize)> {
    let (_, _, h, w) = x.dim();
    Ok((
        conv::out_dim(h, pool.kernel, pool.stride, pool.pad)?,
        conv::out_dim(w, pool.kernel, pool.stride, pool.pad)?,
    ))
}

fn max_pool(x: &Tensor, pool: &Pool2d) -> Result<(Tensor, Array4<u32>)> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = pooled_dims(x, pool)?;
    let mut out = Tensor::from_elem((n, c, oh, ow), f32::NEG_INFINITY);
    let mut arg = Array4::<u32>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let (mut best, mut at) = (f32::NEG_INFINITY, 0u32);
                    for ky in 0..pool.kernel {
                        let iy = (oy * pool.stride + ky) as isize - pool.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..pool.kernel {
                            let ix = (ox * pool.stride + kx) as isize - pool.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = plane[[iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                at = (iy as usize * w + ix as usize) as u32;
                            }
                        }
                    }
                    out[[ni, ci, oy, ox]] = best;
                    arg[[ni, ci, oy, ox]] = at;
                }
            }
        }
    }
    Ok((out, arg))
}

fn avg_pool(x: &Tensor, pool: &Pool2d) -> Result<Tensor> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = pooled_dims(x, pool)?;
    let norm = 1.0 / (pool.kernel * pool.kernel) as f32;
    let mut out = Tensor::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..pool.kernel {
                        let iy = (oy * pool.stride + ky) as isize - pool.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..pool.kernel {
                            let ix = (ox * pool.stride + kx) as isize - pool.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                acc += plane[[iy as usize, ix as usize]];
                            }
                        }
                    }
                    out[[ni, ci, oy, ox]] = acc * norm;
                }
            }
        }
    }
    Ok(out)
}

fn avg_pool_backward(dy: &Tensor, input_dim: (usize, usize, usize, usize), pool: &Pool2d) -> Tensor {
    let (n, c, h, w) = input_dim;
    let (_, _, oh, ow) = dy.dim();
    let norm = 1.0 / (pool.kernel * pool.kernel) as f32;
    let mut dx = Tensor::zeros(input_dim);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dy[[ni, ci, oy, ox]] * norm;
                    for ky in 0..pool.kernel {
                        let iy = (oy * pool.stride + ky) as isize - pool.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..pool.kernel {
                            let ix = (ox * pool.stride + kx) as isize - pool.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[[ni, ci, iy as usize, ix as usize]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Layer {
    pub fn seq(layers: Vec<Layer>) -> Layer {
        Layer::Seq(layers)
    }

    pub fn relu() -> Layer {
        Layer::Act(Activation::Relu)
    }

    pub fn bn(name: impl Into<String>, channels: usize, eps: f32) -> Layer {
        Layer::BatchNorm(BatchNorm { name: name.into(), channels, eps })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.collect_specs(&mut out);
        out
    }

    fn collect_specs(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Layer::Conv(c) => {
                let (kh, kw) = c.geometry.kernel;
                let cg = c.in_c / c.geometry.groups.max(1);
                out.push(ParamSpec {
                    name: c.weight_key(),
                    shape: vec![c.out_c, cg, kh, kw],
                    kind: ParamKind::Weight { fan_in: cg * kh * kw },
                });
                if c.bias {
                    out.push(ParamSpec { name: c.bias_key(), shape: vec![c.out_c], kind: ParamKind::Bias });
                }
            }
            Layer::BatchNorm(b) => {
                for (suffix, kind) in [
                    ("weight", ParamKind::BnWeight),
                    ("bias", ParamKind::BnBias),
                    ("running_mean", ParamKind::BnMean),
                    ("running_var", ParamKind::BnVar),
                ] {
                    out.push(ParamSpec { name: format!("{}.{suffix}", b.name), shape: vec![b.channels], kind });
                }
            }
            Layer::Seq(ls) | Layer::Concat(ls) => ls.iter().for_each(|l| l.collect_specs(out)),
            Layer::Residual { body, shortcut, .. } => {
                body.collect_specs(out);
                if let Some(s) = shortcut {
                    s.collect_specs(out);
                }
            }
            Layer::SqueezeExcite(inner) => inner.collect_specs(out),
            Layer::Act(_) | Layer::MaxPool(_) | Layer::AvgPool(_) | Layer::GlobalAvgPool | Layer::Tap(_) => {}
        }
    }

    pub fn tap_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_taps(&mut out);
        out
    }

    fn collect_taps(&self, out: &mut Vec<String>) {
        match self {
            Layer::Tap(n) => out.push(n.clone()),
            Layer::Seq(ls) | Layer::Concat(ls) => ls.iter().for_each(|l| l.collect_taps(out)),
            Layer::Residual { body, shortcut, .. } => {
                body.collect_taps(out);
                if let Some(s) = shortcut {
                    s.collect_taps(out);
                }
            }
            Layer::SqueezeExcite(inner) => inner.collect_taps(out),
            _ => {}
        }
    }

    fn forward(&self, p: &ParamStore, x: Tensor, pass: &mut Pass) -> Result<(Tensor, Cache)> {
        let keep = |t: Tensor, pass: &Pass| if pass.trace { Cache::Input(t) } else { Cache::None };
        match self {
            Layer::Conv(c) => {
                if x.dim().1 != c.in_c {
                    return Err(Error::DimensionMismatch { expected: c.in_c, got: x.dim().1 });
                }
                let w = view4(p, &c.weight_key())?;
                let b = if c.bias { Some(view1(p, &c.bias_key())?) } else { None };
                let y = conv::conv2d_forward(&x, w, b, &c.geometry)?;
                Ok((y, keep(x, pass)))
            }
            Layer::BatchNorm(bn) => {
                if x.dim().1 != bn.channels {
                    return Err(Error::DimensionMismatch { expected: bn.channels, got: x.dim().1 });
                }
                let (scale, shift, _) = bn.affine(p)?;
                let mut y = x.clone();
                for (ci, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
                    let (a, b) = (scale[ci], shift[ci]);
                    plane.mapv_inplace(|v| v * a + b);
                }
                Ok((y, keep(x, pass)))
            }
            Layer::Act(a) => {
                let y = match a {
                    Activation::Relu => x.mapv(|v| v.max(0.0)),
                    Activation::Silu => x.mapv(|v| v * sigmoid(v)),
                    Activation::Sigmoid => x.mapv(sigmoid),
                };
                let cache = match (pass.trace, a) {
                    (false, _) => Cache::None,
                    (true, Activation::Silu) => Cache::Input(x),
                    (true, _) => Cache::Output(y.clone()),
                };
                Ok((y, cache))
            }
            Layer::MaxPool(pool) => {
                let (y, argmax) = max_pool(&x, pool)?;
                let cache = if pass.trace { Cache::MaxPool { argmax, input_dim: x.dim() } } else { Cache::None };
                Ok((y, cache))
            }
            Layer::AvgPool(pool) => Ok((avg_pool(&x, pool)?, Cache::Shape(x.dim()))),
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dim();
                let y = x
                    .to_shape((n, c, h * w))
                    .expect("reshape")
                    .mean_axis(Axis(2))
                    .expect("non-empty spatial dims")
                    .into_shape_with_order((n, c, 1, 1))
                    .expect("reshape");
                Ok((y, Cache::Shape(x.dim())))
            }
            Layer::Seq(layers) => {
                let mut caches = Vec::with_capacity(layers.len());
                let mut cur = x;
                for l in layers {
                    let (y, c) = l.forward(p, cur, pass)?;
                    caches.push(c);
                    cur = y;
                }
                Ok((cur, Cache::Seq(caches)))
            }
            Layer::Residual { body, shortcut, relu } => {
                let (b, cb) = body.forward(p, x.clone(), pass)?;
                let (sc, cs) = match shortcut {
                    Some(s) => s.forward(p, x, pass)?,
                    None => (x, Cache::None),
                };
                if b.dim() != sc.dim() {
                    return Err(Error::DimensionMismatch { expected: sc.len(), got: b.len() });
                }
                let mut y = b + sc;
                if *relu {
                    y.mapv_inplace(|v| v.max(0.0));
                }
                let output = (pass.trace && *relu).then(|| y.clone());
                Ok((y, Cache::Residual { body: Box::new(cb), shortcut: Box::new(cs), output }))
            }
            Layer::Concat(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::with_capacity(branches.len());
                for b in branches {
                    let (y, c) = b.forward(p, x.clone(), pass)?;
                    outs.push(y);
                    caches.push(c);
                }
                let channels = outs.iter().map(|o| o.dim().1).collect();
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                let y = concatenate(Axis(1), &views).map_err(|e| Error::Model(format!("concat: {e}")))?;
                Ok((y, Cache::Concat { caches, channels }))
            }
            Layer::SqueezeExcite(inner) => {
                let (gate, ci) = inner.forward(p, x.clone(), pass)?;
                let y = &x * &gate;
                let cache = if pass.trace {
                    Cache::SqueezeExcite { input: x, gate, inner: Box::new(ci) }
                } else {
                    Cache::None
                };
                Ok((y, cache))
            }
            Layer::Tap(name) => {
                if let Some(taps) = pass.taps.as_mut() {
                    taps.insert(name.clone(), x.clone());
                }
                Ok((x, Cache::None))
            }
        }
    }

    fn backward(&self, p: &ParamStore, cache: Cache, dy: Tensor, bp: &mut Backprop) -> Result<Tensor> {
        let missing = || Error::Model("backward called without a traced forward pass".into());
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => {
                let w = view4(p, &c.weight_key())?;
                let g = conv::conv2d_backward(&x, w, &dy, &c.geometry)?;
                if let Some(grads) = bp.grads.as_deref_mut() {
                    grads.add_to(&c.weight_key(), g.dw.into_dyn());
                    if c.bias {
                        grads.add_to(&c.bias_key(), g.db.into_dyn());
                    }
                }
                Ok(g.dx)
            }
            (Layer::BatchNorm(bn), Cache::Input(x)) => {
                let (scale, _, inv) = bn.affine(p)?;
                let mut dx = dy.clone();
                for (ci, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                    let a = scale[ci];
                    plane.mapv_inplace(|v| v * a);
                }
                if let Some(grads) = bp.grads.as_deref_mut() {
                    let mean = view1(p, &format!("{}.running_mean", bn.name))?;
                    let mut dgamma = ndarray::Array1::<f32>::zeros(bn.channels);
                    let mut dbeta = ndarray::Array1::<f32>::zeros(bn.channels);
                    for ci in 0..bn.channels {
                        let xs = x.index_axis(Axis(1), ci);
                        let gs = dy.index_axis(Axis(1), ci);
                        let (m, i) = (mean[ci], inv[ci]);
                        let mut dg = 0.0f32;
                        Zip::from(&xs).and(&gs).for_each(|&xv, &gv| dg += gv * (xv - m) * i);
                        dgamma[ci] = dg;
                        dbeta[ci] = gs.sum();
                    }
                    grads.add_to(&format!("{}.weight", bn.name), dgamma.into_dyn());
                    grads.add_to(&format!("{}.bias", bn.name), dbeta.into_dyn());
                }
                Ok(dx)
            }
            (Layer::Act(Activation::Relu), Cache::Output(y)) => {
                Ok(Zip::from(&dy).and(&y).map_collect(|&g, &o| if o > 0.0 { g } else { 0.0 }))
            }
            (Layer::Act(Activation::Sigmoid), Cache::Output(y)) => {
                Ok(Zip::from(&dy).and(&y).map_collect(|&g, &o| g * o * (1.0 - o)))
            }
            (Layer::Act(Activation::Silu), Cache::Input(x)) => Ok(Zip::from(&dy).and(&x).map_collect(|&g, &v| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })),
            (Layer::MaxPool(_), Cache::MaxPool { argmax, input_dim }) => {
                let mut dx = Tensor::zeros(input_dim);
                let w = input_dim.3;
                for ((ni, ci, oy, ox), &g) in dy.indexed_iter() {
                    let at = argmax[[ni, ci, oy, ox]] as usize;
                    dx[[ni, ci, at / w, at % w]] += g;
                }
                Ok(dx)
            }
            (Layer::AvgPool(pool), Cache::Shape(dim)) => Ok(avg_pool_backward(&dy, dim, pool)),
            (Layer::GlobalAvgPool, Cache::Shape((n, c, h, w))) => {
                let k = 1.0 / (h * w) as f32;
                let mut dx = Tensor::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        dx.slice_mut(s![ni, ci, .., ..]).fill(dy[[ni, ci, 0, 0]] * k);
                    }
                }
                Ok(dx)
            }
            (Layer::Seq(layers), Cache::Seq(caches)) => {
                let mut g = dy;
                for (l, c) in layers.iter().zip(caches).rev() {
                    g = l.backward(p, c, g, bp)?;
                }
                Ok(g)
            }
            (Layer::Residual { body, shortcut, relu }, Cache::Residual { body: cb, shortcut: cs, output }) => {
                let g = if *relu {
                    let y = output.ok_or_else(missing)?;
                    Zip::from(&dy).and(&y).map_collect(|&g, &o| if o > 0.0 { g } else { 0.0 })
                } else {
                    dy
                };
                let db = body.backward(p, *cb, g.clone(), bp)?;
                let ds = match shortcut {
                    Some(s) => s.backward(p, *cs, g, bp)?,
                    None => g,
                };
                Ok(db + ds)
            }
            (Layer::Concat(branches), Cache::Concat { caches, channels }) => {
                let mut dx: Option<Tensor> = None;
                let mut start = 0;
                for ((b, c), ch) in branches.iter().zip(caches).zip(channels) {
                    let part = dy.slice(s![.., start..start + ch, .., ..]).to_owned();
                    start += ch;
                    let d = b.backward(p, c, part, bp)?;
                    dx = Some(match dx {
                        Some(acc) => acc + d,
                        None => d,
                    });
                }
                dx.ok_or_else(|| Error::Model("empty concat".into()))
            }
            (Layer::SqueezeExcite(inner), Cache::SqueezeExcite { input, gate, inner: ci }) => {
                let (n, c, _, _) = input.dim();
                let prod = &dy * &input;
                let dgate = prod
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .into_shape_with_order((n, c, 1, 1))
                    .expect("reshape");
                let d_inner = inner.backward(p, *ci, dgate, bp)?;
                Ok(&dy * &gate + d_inner)
            }
            (Layer::Tap(name), _) => {
                bp.tap_grads.insert(name.clone(), dy.clone());
                Ok(dy)
            }
            _ => Err(missing()),
        }
    }
}

/// Result of a traced forward pass, consumed by [`Network::backward`].
pub struct Trace {
    cache: Cache,
    pub taps: BTreeMap<String, Tensor>,
}

pub struct Gradients {
    pub input: Tensor,
    pub params: Option<ParamStore>,
    pub taps: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub layer: Layer,
    pub params: ParamStore,
    specs: Vec<ParamSpec>,
}

impl Network {
    pub fn init(layer: Layer, seed: u64) -> Network {
        let specs = layer.specs();
        let params = ParamStore::init(&specs, seed);
        Network { layer, params, specs }
    }

    pub fn with_params(layer: Layer, params: ParamStore) -> Result<Network> {
        let specs = layer.specs();
        params.check(&specs)?;
        let params = params.restrict(&specs);
        Ok(Network { layer, params, specs })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn parameter_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.trainable())
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn forward(&self, x: Tensor) -> Result<Tensor> {
        let mut pass = Pass { trace: false, taps: None };
        Ok(self.layer.forward(&self.params, x, &mut pass)?.0)
    }

    pub fn forward_traced(&self, x: Tensor, record_taps: bool) -> Result<(Tensor, Trace)> {
        let mut pass = Pass { trace: true, taps: record_taps.then(BTreeMap::new) };
        let (y, cache) = self.layer.forward(&self.params, x, &mut pass)?;
        Ok((y, Trace { cache, taps: pass.taps.unwrap_or_default() }))
    }

    /// Backpropagates `dy` through a traced pass. Parameter gradients are
    /// only accumulated when `param_grads` is set.
    pub fn backward(&self, trace: Trace, dy: Tensor, param_grads: bool) -> Result<Gradients> {
        let mut store = ParamStore::default();
        let mut bp = Backprop { grads: param_grads.then_some(&mut store), tap_grads: BTreeMap::new() };
        let input = self.layer.backward(&self.params, trace.cache, dy, &mut bp)?;
        let taps = bp.tap_grads;
        Ok(Gradients { input, params: param_grads.then_some(store), taps })
    }
}
