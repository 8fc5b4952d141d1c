//! Grad-CAM++ saliency over a named spatial layer and jet-colormap overlays.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Prediction};
use crate::dataset::Gender;
use crate::nn::{Network, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `[H, W]`, non-negative.
    pub data: Array2<f32>,
    pub normalized: bool,
}

impl SaliencyMap {
    pub fn width(&self) -> u32 {
        self.data.ncols() as u32
    }

    pub fn height(&self) -> u32 {
        self.data.nrows() as u32
    }

    /// Divides by the maximum; an all-zero map stays zero.
    pub fn normalize(mut self) -> Self {
        let max = self.data.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            self.data.mapv_inplace(|v| v / max);
        }
        self.normalized = true;
        self
    }

    pub fn stats(&self) -> MapStats {
        let mut peak = (0, 0);
        let mut max = f32::NEG_INFINITY;
        for ((y, x), &v) in self.data.indexed_iter() {
            if v > max {
                max = v;
                peak = (x as u32, y as u32);
            }
        }
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64;
        MapStats { max: max.max(0.0) as f64, mean, peak }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub max: f64,
    pub mean: f64,
    /// `(x, y)` of the first maximum in row-major order.
    pub peak: (u32, u32),
}

/// One explained input, as written next to the PNGs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub image_id: String,
    pub predicted: Gender,
    pub p: f64,
    pub explained: Gender,
    pub target_layer: String,
    pub map: MapStats,
}

/// Pixel-wise Grad-CAM++ weights from the activations `a` and the score
/// gradient `g` of one sample (`[K, h, w]` each), returned at `h x w`.
pub fn gradcam_pp_weights(a: &ndarray::Array3<f32>, g: &ndarray::Array3<f32>) -> Array2<f32> {
    let (k, h, w) = a.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for c in 0..k {
        let ac = a.index_axis(Axis(0), c);
        let gc = g.index_axis(Axis(0), c);
        let sum_a: f64 = ac.iter().map(|&v| v as f64).sum();
        let mut weight = 0.0;
        for (&gv, _) in gc.iter().zip(ac.iter()) {
            let gv = gv as f64;
            let g2 = gv * gv;
            let denom = 2.0 * g2 + sum_a * g2 * gv;
            let alpha = if denom != 0.0 { g2 / denom } else { 0.0 };
            weight += alpha * gv.max(0.0);
        }
        cam.zip_mut_with(&ac, |m, &v| *m += weight * v as f64);
    }
    cam.mapv(|v| v.max(0.0) as f32)
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(map: &Array2<f32>, width: u32, height: u32) -> Array2<f32> {
    let (h, w) = map.dim();
    let (oh, ow) = (height as usize, width as usize);
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| coord(x, ow, w)).collect();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (y0, y1, ty) = coord(y, oh, h);
        let (x0, x1, tx) = xs[x];
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Grad-CAM++ for any network. `score` maps the network output to a scalar
/// score and its gradient with respect to that output. The map is taken at
/// `target_layer`, upsampled to `out_size` `(width, height)` and
/// max-normalized.
pub fn gradcam_pp_network(
    net: &Network,
    x: Tensor,
    target_layer: &str,
    score: impl Fn(&Tensor) -> Result<(f64, Tensor)>,
    out_size: (u32, u32),
) -> Result<SaliencyMap> {
    if x.dim().0 != 1 {
        return Err(Error::invalid("saliency needs a single-sample batch"));
    }
    if !net.layer.tap_names().iter().any(|t| t == target_layer) {
        return Err(Error::invalid(format!("rejected layer `{target_layer}`: not a spatial layer of this network")));
    }
    let (y, trace) = net.forward_traced(x, true)?;
    let (_, dy) = score(&y)?;
    let act = trace.taps.get(target_layer).cloned().ok_or_else(|| Error::invalid(format!("rejected layer `{target_layer}`")))?;
    let grads = net.backward(trace, dy, false)?;
    let g = grads.taps.get(target_layer).ok_or_else(|| Error::invalid(format!("rejected layer `{target_layer}`")))?;
    let cam = gradcam_pp_weights(&act.index_axis(Axis(0), 0).to_owned(), &g.index_axis(Axis(0), 0).to_owned());
    let data = upsample_bilinear(&cam, out_size.0, out_size.1);
    Ok(SaliencyMap { data, normalized: false }.normalize())
}

/// Saliency of `image` for `class`: the score is the logit for male and the
/// negated logit for female. `target_layer` defaults to the backbone's last
/// spatial layer.
pub fn gradcam_pp(model: &Classifier, image: &RgbImage, target_layer: Option<&str>, class: Gender) -> Result<SaliencyMap> {
    let layer = target_layer.unwrap_or(model.cfg.backbone.default_target_layer());
    let sign = match class {
        Gender::Male => 1.0,
        Gender::Female => -1.0,
    };
    let head = &model.head;
    let score = |y: &Tensor| -> Result<(f64, Tensor)> {
        let (n, d, _, _) = y.dim();
        let f = y.view().into_shape_with_order((n, d)).expect("pooled").mapv(f64::from);
        let (logits, cache) = head.forward_batch(&f)?;
        let (_, df) = head.backward(&cache, &ndarray::Array1::from_elem(n, sign));
        let dy = df.mapv(|v| v as f32).into_shape_with_order((n, d, 1, 1)).expect("pooled grad");
        Ok((sign * logits[0], dy))
    };
    let (w, h) = image.dimensions();
    gradcam_pp_network(&model.extractor.net, model.extractor.preprocess(image), layer, score, (w, h))
}

/// Explains the predicted class and summarizes the map.
pub fn explain_prediction(
    model: &Classifier,
    image_id: &str,
    image: &RgbImage,
    target_layer: Option<&str>,
) -> Result<(Prediction, SaliencyMap, ExplainRecord)> {
    let pred = model.predict(image)?;
    let layer = target_layer.unwrap_or(model.cfg.backbone.default_target_layer());
    let map = gradcam_pp(model, image, Some(layer), pred.gender)?;
    let record = ExplainRecord {
        image_id: image_id.to_string(),
        predicted: pred.gender,
        p: pred.p,
        explained: pred.gender,
        target_layer: layer.to_string(),
        map: map.stats(),
    };
    Ok((pred, map, record))
}

/// Jet colormap: 0 is dark blue, 1 is dark red.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0;
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub fn colorize(map: &SaliencyMap) -> RgbImage {
    RgbImage::from_fn(map.width(), map.height(), |x, y| Rgb(jet(map.data[[y as usize, x as usize]]).map(|c| c.round() as u8)))
}

/// `(1 - alpha) * image + alpha * jet(map)`, rounded per channel.
pub fn overlay(image: &RgbImage, map: &SaliencyMap, alpha: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !map.normalized {
        return Err(Error::invalid("overlay needs a normalized map"));
    }
    if image.dimensions() != (map.width(), map.height()) {
        return Err(Error::invalid(format!(
            "map is {}x{} but image is {}x{}",
            map.width(),
            map.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let c = jet(map.data[[y as usize, x as usize]]);
        let p = image.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| ((1.0 - alpha) * p[i] as f32 + alpha * c[i]).round().clamp(0.0, 255.0) as u8))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn weights_follow_closed_form() {
        // one channel, two cells: a = [1, 3], g = [2, 0.5]
        let a = Array3::from_shape_vec((1, 1, 2), vec![1.0, 3.0]).unwrap();
        let g = Array3::from_shape_vec((1, 1, 2), vec![2.0, 0.5]).unwrap();
        let alpha = |g: f64| g * g / (2.0 * g * g + 4.0 * g * g * g);
        let w = alpha(2.0) * 2.0 + alpha(0.5) * 0.5;
        let cam = gradcam_pp_weights(&a, &g);
        assert!((cam[[0, 0]] as f64 - w).abs() < 1e-6);
        assert!((cam[[0, 1]] as f64 - 3.0 * w).abs() < 1e-6);
    }

    #[test]
    fn upsample_preserves_constants_and_size() {
        let m = Array2::from_elem((3, 5), 0.25f32);
        let u = upsample_bilinear(&m, 17, 9);
        assert_eq!(u.dim(), (9, 17));
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn overlay_rules() {
        let img = RgbImage::from_fn(4, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 60, 7]));
        let zero = SaliencyMap { data: Array2::zeros((3, 4)), normalized: true };
        assert_eq!(overlay(&img, &zero, 0.0).unwrap(), img);
        let wash = overlay(&img, &zero, 1.0).unwrap();
        assert!(wash.pixels().all(|p| p.0 == [0, 0, 128]));
        let ones = SaliencyMap { data: Array2::from_elem((3, 4), 1.0), normalized: true };
        assert!(overlay(&img, &ones, 1.0).unwrap().pixels().all(|p| p.0 == [128, 0, 0]));
        assert!(overlay(&img, &ones, 1.5).is_err());
        assert!(overlay(&img, &SaliencyMap { normalized: false, ..ones }, 0.5).is_err());
    }
}
