use image::imageops::{self, FilterType};
use image::DynamicImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const INPUT_SIZE: u32 = 224;

/// Resize and normalisation constants. Feeds the `preprocessing_hash` stored
/// with every feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub input_size: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            input_size: INPUT_SIZE,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl PreprocessConfig {
    pub fn hash(&self) -> [u8; 32] {
        let canonical = format!(
            "resize=bilinear;size={};mean={:?};std={:?};channels=rgb;layout=chw",
            self.input_size, self.mean, self.std
        );
        Sha256::digest(canonical.as_bytes()).into()
    }
}

/// Channel-first `3 x size x size` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub size: u32,
    pub data: Vec<f32>,
}

impl InputTensor {
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = (self.size * self.size) as usize;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn shape(&self) -> [usize; 4] {
        [1, 3, self.size as usize, self.size as usize]
    }
}

/// Plain bilinear down-sample to `size x size` (no aspect preservation),
/// grayscale replicated to three channels, then `(v - mean_c) / std_c` with
/// `v` in `[0, 1]`.
pub fn preprocess(image: &DynamicImage, cfg: &PreprocessConfig) -> InputTensor {
    let size = cfg.input_size;
    let rgb = image.to_rgb32f();
    let resized = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let plane = (size * size) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] - cfg.mean[c]) / cfg.std[c];
        }
    }
    InputTensor { size, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn grayscale_is_replicated() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_fn(1024, 1024, |x, y| {
            Luma([((x * 3 + y * 5) % 256) as u8])
        }));
        let t = preprocess(&img, &PreprocessConfig::default());
        assert_eq!(t.shape(), [1, 3, 224, 224]);
        let cfg = PreprocessConfig::default();
        // Undo the per-channel normalisation; the raw planes must agree.
        let raw = |c: usize| -> Vec<f32> {
            t.channel(c).iter().map(|v| v * cfg.std[c] + cfg.mean[c]).collect()
        };
        let (r, g, b) = (raw(0), raw(1), raw(2));
        for i in 0..r.len() {
            assert!((r[i] - g[i]).abs() < 1e-6 && (r[i] - b[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_normalises_exactly() {
        let cfg = PreprocessConfig::default();
        let v = 173u8;
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(224, 224, Rgb([v, v, v])));
        let t = preprocess(&img, &cfg);
        for c in 0..3 {
            let expect = (v as f32 / 255.0 - cfg.mean[c]) / cfg.std[c];
            assert!(t.channel(c).iter().all(|x| (x - expect).abs() < 1e-6), "channel {c}");
        }
    }

    #[test]
    fn tiny_images_upsample() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(1, 1, Luma([255])));
        let t = preprocess(&img, &PreprocessConfig::default());
        assert_eq!(t.data.len(), 3 * 224 * 224);
        assert!(t.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hash_tracks_constants() {
        let a = PreprocessConfig::default();
        let mut b = a.clone();
        b.std[2] = 0.3;
        assert_eq!(a.hash(), PreprocessConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
