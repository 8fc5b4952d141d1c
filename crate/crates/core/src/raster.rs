//! Small raster helpers shared by the pipeline stages.
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` in continuous image
//! coordinates, so its centre sits at `(i + 0.5, j + 0.5)`.

use image::{imageops, Rgb, RgbImage};
use ndarray::{Array2, Array3};

/// Rec. 601 luma in `[0, 255]`, shape `[h, w]`.
pub fn to_gray(img: &RgbImage) -> Array2<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        let [r, g, b] = p.0;
        out[[y as usize, x as usize]] = 0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32;
    }
    out
}

/// Bilinear sample at continuous coordinates `(x, y)`; neighbours outside the
/// image contribute black.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    // index space: pixel centres at integers
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let (px, py) = (x0 + dx, y0 + dy);
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let p = img.get_pixel(px as u32, py as u32).0;
            for c in 0..3 {
                acc[c] += wgt * p[c] as f64;
            }
        }
    }
    acc
}

pub fn to_rgb8(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Bilinear resize.
pub fn resize(img: &RgbImage, width: u32, height: u32) -> RgbImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    imageops::resize(img, width, height, imageops::FilterType::Triangle)
}

/// Copies the pixel rectangle `[x0, x0+w) x [y0, y0+h)`; the rectangle must
/// lie inside the image.
pub fn crop(img: &RgbImage, x0: u32, y0: u32, w: u32, h: u32) -> RgbImage {
    imageops::crop_imm(img, x0, y0, w, h).to_image()
}

/// Converts to a `[3, h, w]` float tensor, applying `(v/255 - mean) / std`
/// per channel.
pub fn to_chw(img: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (p.0[c] as f32 / 255.0 - mean[c]) / std[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_at_pixel_centre_is_exact() {
        let mut img = RgbImage::new(4, 3);
        img.put_pixel(2, 1, Rgb([10, 20, 30]));
        assert_eq!(sample_bilinear(&img, 2.5, 1.5), [10.0, 20.0, 30.0]);
        // halfway to the right neighbour (black)
        assert_eq!(sample_bilinear(&img, 3.0, 1.5), [5.0, 10.0, 15.0]);
        // far outside
        assert_eq!(sample_bilinear(&img, -5.0, 1.5), [0.0; 3]);
    }

    #[test]
    fn gray_of_white_is_255() {
        let img = RgbImage::from_pixel(2, 2, Rgb([255, 255, 255]));
        let g = to_gray(&img);
        assert!((g[[1, 1]] - 255.0).abs() < 1e-3);
    }
}
