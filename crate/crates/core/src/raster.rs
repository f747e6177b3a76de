//! Single-channel floating point rasters and the pixel filters the pipeline uses.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use thiserror::Error;

use crate::annotation::Rect;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image decode/encode failed: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("region ({x},{y},{w},{h}) outside {width}x{height} image")]
    OutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
}

/// Row-major grayscale raster. Normalized images hold values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: u32, height: u32, value: f32) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        Plane { width, height, data }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for r in 0..height {
            for c in 0..width {
                data.push(f(c, r));
            }
        }
        Plane { width, height, data }
    }

    /// 8-bit gray to [0, 1].
    pub fn from_gray8(img: &GrayImage) -> Self {
        Plane {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Raw 8-bit values as floats, without normalization.
    pub fn from_gray8_raw(img: &GrayImage) -> Self {
        Plane {
            width: img.width(),
            height: img.height(),
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Quantizes a normalized plane to 8 bits.
    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |c, r| {
            Luma([(self.get(c, r).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> f32 {
        self.data[row as usize * self.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, col: u32, row: u32, v: f32) {
        let w = self.width as usize;
        self.data[row as usize * w + col as usize] = v;
    }

    /// Edge-clamped read.
    #[inline]
    pub fn get_clamped(&self, col: i64, row: i64) -> f32 {
        let c = col.clamp(0, self.width as i64 - 1) as u32;
        let r = row.clamp(0, self.height as i64 - 1) as u32;
        self.get(c, r)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn crop(&self, region: Rect) -> Result<Plane, RasterError> {
        if !region.fits(self.width, self.height) {
            return Err(RasterError::OutOfBounds {
                x: region.x,
                y: region.y,
                w: region.w,
                h: region.h,
                width: self.width,
                height: self.height,
            });
        }
        Ok(Plane::from_fn(region.w, region.h, |c, r| self.get(region.x + c, region.y + r)))
    }

    /// 3x3 mean with clamped borders.
    pub fn mean3x3(&self) -> Plane {
        self.box_mean(1)
    }

    /// (2r+1)x(2r+1) mean with clamped borders.
    pub fn box_mean(&self, radius: u32) -> Plane {
        let r = radius as i64;
        let n = (2 * r + 1) as f32;
        let horizontal = Plane::from_fn(self.width, self.height, |c, row| {
            (-r..=r).map(|d| self.get_clamped(c as i64 + d, row as i64)).sum::<f32>() / n
        });
        Plane::from_fn(self.width, self.height, |c, row| {
            (-r..=r)
                .map(|d| horizontal.get_clamped(c as i64, row as i64 + d))
                .sum::<f32>()
                / n
        })
    }

    /// 3x3 median with clamped borders.
    pub fn median3x3(&self) -> Plane {
        Plane::from_fn(self.width, self.height, |c, r| {
            let mut window = [0f32; 9];
            let mut k = 0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    window[k] = self.get_clamped(c as i64 + dc, r as i64 + dr);
                    k += 1;
                }
            }
            window.sort_by(f32::total_cmp);
            window[4]
        })
    }

    /// 3x3 convolution with clamped borders; output clamped to [0, 1].
    pub fn convolve3x3(&self, kernel: [[f32; 3]; 3]) -> Plane {
        Plane::from_fn(self.width, self.height, |c, r| {
            let mut acc = 0f32;
            for (dr, row) in kernel.iter().enumerate() {
                for (dc, k) in row.iter().enumerate() {
                    acc += k * self.get_clamped(c as i64 + dc as i64 - 1, r as i64 + dr as i64 - 1);
                }
            }
            acc.clamp(0.0, 1.0)
        })
    }

    /// Variance of the residual left after subtracting the 3x3 mean filter.
    pub fn residual_variance(&self) -> f64 {
        let smooth = self.mean3x3();
        let residual = Plane::from_vec(
            self.width,
            self.height,
            self.data.iter().zip(smooth.data.iter()).map(|(a, b)| a - b).collect(),
        );
        residual.variance()
    }

    /// Area-averaging resample: each output pixel is the coverage-weighted
    /// mean of the source pixels its footprint overlaps.
    pub fn resize_area(&self, out_w: u32, out_h: u32) -> Plane {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let cols = area_weights(self.width, out_w);
        let rows = area_weights(self.height, out_h);
        // horizontal pass: height x out_w
        let mut tmp = vec![0f64; self.height as usize * out_w as usize];
        for r in 0..self.height as usize {
            let src = &self.data[r * self.width as usize..(r + 1) * self.width as usize];
            for (oc, weights) in cols.iter().enumerate() {
                tmp[r * out_w as usize + oc] = weights.iter().map(|&(i, w)| src[i] as f64 * w).sum();
            }
        }
        let mut data = vec![0f32; out_w as usize * out_h as usize];
        for (or, weights) in rows.iter().enumerate() {
            for oc in 0..out_w as usize {
                let v: f64 = weights.iter().map(|&(i, w)| tmp[i * out_w as usize + oc] * w).sum();
                data[or * out_w as usize + oc] = v as f32;
            }
        }
        Plane::from_vec(out_w, out_h, data)
    }

    /// Normalized histogram of values in [0, 1] over `bins` equal-width bins.
    pub fn histogram(&self, bins: usize) -> Vec<f64> {
        let mut h = vec![0f64; bins];
        if self.data.is_empty() || bins == 0 {
            return h;
        }
        for &v in &self.data {
            let idx = ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
            h[idx] += 1.0;
        }
        let n = self.data.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Plane, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Plane::from_gray8(&img.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.to_gray8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Plane, RasterError> {
        Ok(Plane::from_gray8(&load_gray8(path)?))
    }
}

/// Loads any supported image as 8-bit luma (RGB is converted with Rec. 601 weights).
pub fn load_gray8(path: &Path) -> Result<GrayImage, RasterError> {
    Ok(image::open(path)?.to_luma8())
}

/// For each output index, the (source index, weight) pairs of its footprint.
fn area_weights(src: u32, dst: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src as usize);
            let mut weights: Vec<(usize, f64)> = (first..last)
                .filter_map(|i| {
                    let overlap = end.min(i as f64 + 1.0) - start.max(i as f64);
                    (overlap > 1e-12).then_some((i, overlap / scale))
                })
                .collect();
            let total: f64 = weights.iter().map(|w| w.1).sum();
            weights.iter_mut().for_each(|w| w.1 /= total);
            weights
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_constant_downscale_is_exact() {
        let src = Plane::from_fn(8, 8, |c, r| ((c / 2) * 10 + (r / 2)) as f32 / 100.0);
        let out = src.resize_area(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                assert!((out.get(c, r) - (c * 10 + r) as f32 / 100.0).abs() < 1e-6);
            }
        }
        assert!((out.mean() - src.mean()).abs() < 1e-9);
    }

    #[test]
    fn non_integer_ratio_preserves_mean() {
        let src = Plane::from_fn(10, 7, |c, r| ((c * 7 + r * 3) % 11) as f32 / 10.0);
        let out = src.resize_area(4, 3);
        assert!((out.mean() - src.mean()).abs() < 1e-5);
        let up = src.resize_area(23, 13);
        assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn median_removes_isolated_impulse() {
        let mut p = Plane::new(5, 5, 0.5);
        p.set(2, 2, 1.0);
        assert_eq!(p.median3x3(), Plane::new(5, 5, 0.5));
    }

    #[test]
    fn crop_bounds() {
        let p = Plane::new(512, 512, 0.0);
        assert!(matches!(p.crop(Rect::new(500, 500, 100, 100)), Err(RasterError::OutOfBounds { .. })));
        assert_eq!(p.crop(Rect::new(10, 10, 5, 6)).unwrap().width(), 5);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let p = Plane::from_fn(6, 4, |c, r| (c * 4 + r) as f32 / 255.0);
        let back = Plane::decode_png(&p.encode_png().unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
