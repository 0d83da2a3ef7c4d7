use std::path::Path;

use crate::diffcalc::Tensor;
use crate::{Error, Result};

/// Alpha above this value counts as foreground.
pub const SILHOUETTE_THRESHOLD: f64 = 0.5;

/// RGB image with a separate alpha (silhouette) channel, values in `[0, 1]`.
///
/// Pixels are stored row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgba {
    width: usize,
    height: usize,
    rgb: Vec<[f64; 3]>,
    alpha: Vec<f64>,
}

impl ImageRgba {
    pub fn new(width: usize, height: usize, rgb: Vec<[f64; 3]>, alpha: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if n == 0 || rgb.len() != n || alpha.len() != n {
            return Err(Error::contract(
                "image",
                format!("{width}x{height} image needs {n} pixels, got rgb {} alpha {}", rgb.len(), alpha.len()),
            ));
        }
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if !rgb.iter().flatten().copied().all(in_range) || !alpha.iter().copied().all(in_range) {
            return Err(Error::contract("image", "channel values must lie in [0, 1]"));
        }
        Ok(Self { width, height, rgb, alpha })
    }

    /// Uniform color with zero alpha.
    pub fn background(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let n = width * height;
        Self { width, height, rgb: vec![rgb; n], alpha: vec![0.0; n] }
    }

    /// Builds an image from values that may stray slightly outside `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, rgb: Vec<[f64; 3]>, alpha: Vec<f64>) -> Result<Self> {
        let rgb = rgb.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect();
        let alpha = alpha.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(width, height, rgb, alpha)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb(&self) -> &[[f64; 3]] {
        &self.rgb
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    pub fn same_extent(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Binary silhouette: `alpha > 0.5`.
    pub fn mask(&self) -> Vec<bool> {
        self.alpha.iter().map(|&a| a > SILHOUETTE_THRESHOLD).collect()
    }

    /// Channel-major `[3, H, W]` tensor of the RGB values.
    pub fn to_chw(&self) -> Tensor {
        let n = self.pixel_count();
        let mut data = vec![0.0; 3 * n];
        for (i, c) in self.rgb.iter().enumerate() {
            for ch in 0..3 {
                data[ch * n + i] = c[ch];
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("extents are nonzero")
    }

    /// Flattened `[H, W, 4]` tensor (r, g, b, alpha per pixel).
    pub fn to_hwc4(&self) -> Tensor {
        let data = self.rgb.iter().zip(&self.alpha).flat_map(|(c, &a)| [c[0], c[1], c[2], a]).collect();
        Tensor::new(vec![self.height, self.width, 4], data).expect("extents are nonzero")
    }

    /// Inverse of [`to_hwc4`](Self::to_hwc4), clamping into `[0, 1]`.
    pub fn from_hwc4(width: usize, height: usize, data: &[f64]) -> Result<Self> {
        if data.len() != width * height * 4 {
            return Err(Error::contract("image", "rgba buffer has the wrong length"));
        }
        let rgb = data.chunks(4).map(|p| [p[0], p[1], p[2]]).collect();
        let alpha = data.chunks(4).map(|p| p[3]).collect();
        Self::from_clamped(width, height, rgb, alpha)
    }

    /// Copy with RGB zeroed wherever `mask` is false and alpha set from the mask.
    pub fn with_mask(&self, mask: &[bool]) -> Self {
        let rgb = self.rgb.iter().zip(mask).map(|(c, &m)| if m { *c } else { [0.0; 3] }).collect();
        let alpha = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Self { width: self.width, height: self.height, rgb, alpha }
    }

    /// Writes an 8-bit RGBA PNG; alpha carries the silhouette.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut buf = Vec::with_capacity(self.pixel_count() * 4);
        for (c, &a) in self.rgb.iter().zip(&self.alpha) {
            buf.extend_from_slice(&[q(c[0]), q(c[1]), q(c[2]), q(a)]);
        }
        image::save_buffer_with_format(
            path,
            &buf,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgba8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Reads any PNG, converting to 8-bit RGBA. Images without alpha load fully opaque.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut rgb = Vec::with_capacity(w * h);
        let mut alpha = Vec::with_capacity(w * h);
        for p in img.pixels() {
            let [r, g, b, a] = p.0;
            rgb.push([r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]);
            alpha.push(a as f64 / 255.0);
        }
        Self::new(w, h, rgb, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 16 * 16;
        let rgb = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let alpha = (0..n).map(|_| rng.gen()).collect();
        let img = ImageRgba::new(16, 16, rgb, alpha).unwrap();
        let path = dir.path().join("img.png");
        img.save_png(&path).unwrap();
        let back = ImageRgba::load_png(&path).unwrap();
        assert!(back.same_extent(&img));
        let diff = img
            .rgb()
            .iter()
            .flatten()
            .zip(back.rgb().iter().flatten())
            .chain(img.alpha().iter().zip(back.alpha()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1.0 / 255.0 + 1e-12, "diff {diff}");
    }

    #[test]
    fn binary_mask_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let alpha: Vec<f64> = (0..64).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let img = ImageRgba::new(8, 8, vec![[0.2, 0.4, 0.6]; 64], alpha.clone()).unwrap();
        let path = dir.path().join("mask.png");
        img.save_png(&path).unwrap();
        assert_eq!(ImageRgba::load_png(&path).unwrap().alpha(), alpha.as_slice());
    }

    #[test]
    fn missing_file_is_an_error_with_path() {
        let err = ImageRgba::load_png("/definitely/not/here.png").unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.png"));
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(ImageRgba::new(1, 1, vec![[1.5, 0.0, 0.0]], vec![0.0]).is_err());
        assert!(ImageRgba::new(2, 1, vec![[0.0; 3]], vec![0.0]).is_err());
    }

    #[test]
    fn chw_layout() {
        let img = ImageRgba::new(2, 1, vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], vec![1.0, 1.0]).unwrap();
        assert_eq!(img.to_chw().data(), &[0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
        assert_eq!(img.to_chw().shape(), &[3, 1, 2]);
    }
}
