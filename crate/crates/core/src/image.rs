//! 8-bit RGB tactile frames.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("noise sigma must be non-negative and finite, got {0}")]
    NegativeSigma(f64),
    #[error("invalid gain range [{0}, {1}]")]
    GainRange(f64, f64),
    #[error("image size mismatch: {0}")]
    Size(String),
    #[error("png i/o: {0}")]
    Png(#[from] ::image::ImageError),
}

/// Square RGB frame, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TactileImage {
    pub size: usize,
    pub data: Vec<u8>,
    pub instance_id: String,
}

/// Round half away from zero and clamp into `u8`.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

impl TactileImage {
    pub fn black(size: usize, instance_id: impl Into<String>) -> Self {
        Self {
            size,
            data: vec![0; size * size * 3],
            instance_id: instance_id.into(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.size + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.size + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// True when pixel `(x, y)` lies inside the centred circular mask.
    pub fn in_mask(&self, x: usize, y: usize) -> bool {
        in_circle(self.size, x, y)
    }

    pub fn mean_abs_diff(&self, other: &TactileImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let total: u64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.abs_diff(b) as u64)
            .sum();
        total as f64 / self.data.len() as f64
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        ::image::save_buffer(
            path,
            &self.data,
            self.size as u32,
            self.size as u32,
            ::image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    pub fn read_png(path: &Path, instance_id: impl Into<String>) -> Result<Self, ImageError> {
        let img = ::image::open(path)?.to_rgb8();
        if img.width() != img.height() {
            return Err(ImageError::Size(format!(
                "{} is {}x{}, expected square",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        Ok(Self {
            size: img.width() as usize,
            data: img.into_raw(),
            instance_id: instance_id.into(),
        })
    }

    /// Area-average resample to `target x target`, one `f32` plane per
    /// channel (channel-major), values in `[0, 1]`.
    pub fn area_resample(&self, target: usize) -> Vec<f32> {
        let weights = area_weights(self.size, target);
        let mut out = vec![0f32; 3 * target * target];
        // Separable: rows first, then columns.
        let mut rows = vec![0f64; 3 * target * self.size];
        for y in 0..self.size {
            for (tx, w) in weights.iter().enumerate() {
                let mut acc = [0f64; 3];
                for &(x, wx) in w {
                    let o = (y * self.size + x) * 3;
                    for c in 0..3 {
                        acc[c] += wx * self.data[o + c] as f64;
                    }
                }
                for c in 0..3 {
                    rows[(c * self.size + y) * target + tx] = acc[c];
                }
            }
        }
        for c in 0..3 {
            for (ty, w) in weights.iter().enumerate() {
                for tx in 0..target {
                    let mut acc = 0f64;
                    for &(y, wy) in w {
                        acc += wy * rows[(c * self.size + y) * target + tx];
                    }
                    out[(c * target + ty) * target + tx] = (acc / 255.0) as f32;
                }
            }
        }
        out
    }

    /// Same as [`area_resample`](Self::area_resample) but requantised to 8 bits.
    pub fn area_resample_u8(&self, target: usize) -> Vec<u8> {
        self.area_resample(target)
            .iter()
            .map(|&v| quantize(v as f64 * 255.0))
            .collect()
    }
}

pub(crate) fn in_circle(size: usize, x: usize, y: usize) -> bool {
    let c = size as f64 * 0.5;
    let dx = x as f64 + 0.5 - c;
    let dy = y as f64 + 0.5 - c;
    dx * dx + dy * dy <= c * c
}

/// For each target cell, the source indices and their overlap fractions.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let lo = t as f64 * scale;
            let hi = lo + scale;
            let mut w = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((s, overlap / scale));
                }
                s += 1;
            }
            w
        })
        .collect()
}

/// Photometric augmentation: a global gain drawn from `gain_range` and
/// additive Gaussian noise (in 8-bit units), clipped and requantised.
/// Pixels outside the circular mask stay black.
pub fn augment(
    image: &TactileImage,
    seed: u64,
    noise_sigma: f64,
    gain_range: (f64, f64),
) -> Result<TactileImage, ImageError> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(ImageError::NegativeSigma(noise_sigma));
    }
    let (lo, hi) = gain_range;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
        return Err(ImageError::GainRange(lo, hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let noise = Normal::new(0.0, noise_sigma).expect("sigma checked above");
    let mut out = image.clone();
    for y in 0..image.size {
        for x in 0..image.size {
            if !in_circle(image.size, x, y) {
                continue;
            }
            let o = (y * image.size + x) * 3;
            for c in 0..3 {
                let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                out.data[o + c] = quantize(image.data[o + c] as f64 * gain + n);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal as SNormal};

    fn gradient_image() -> TactileImage {
        let mut img = TactileImage::black(64, "t");
        for y in 0..64 {
            for x in 0..64 {
                if img.in_mask(x, y) {
                    img.set_pixel(x, y, [100 + x as u8, 120, 140 - y as u8]);
                }
            }
        }
        img
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        assert_eq!(quantize(2.5), 3);
        assert_eq!(quantize(3.5), 4);
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(300.0), 255);
    }

    #[test]
    fn augment_identity() {
        let img = gradient_image();
        let out = augment(&img, 5, 0.0, (1.0, 1.0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn augment_rejects_negative_sigma() {
        assert!(matches!(
            augment(&gradient_image(), 0, -1.0, (1.0, 1.0)),
            Err(ImageError::NegativeSigma(_))
        ));
    }

    #[test]
    fn augment_keeps_mask_black() {
        let img = gradient_image();
        let out = augment(&img, 9, 2.0, (0.9, 1.1)).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !img.in_mask(x, y) {
                    assert_eq!(out.pixel(x, y), [0, 0, 0]);
                }
            }
        }
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = gradient_image();
        assert_eq!(augment(&img, 3, 2.0, (0.9, 1.1)).unwrap(), augment(&img, 3, 2.0, (0.9, 1.1)).unwrap());
        assert_ne!(augment(&img, 3, 2.0, (0.9, 1.1)).unwrap(), augment(&img, 4, 2.0, (0.9, 1.1)).unwrap());
    }

    #[test]
    fn augment_noise_matches_gaussian() {
        // Flat mid-grey frame so clipping never triggers.
        let mut img = TactileImage::black(256, "t");
        for y in 0..256 {
            for x in 0..256 {
                if img.in_mask(x, y) {
                    img.set_pixel(x, y, [128, 128, 128]);
                }
            }
        }
        let out = augment(&img, 17, 2.0, (1.0, 1.0)).unwrap();
        let mut dev: Vec<f64> = Vec::new();
        for y in 0..256 {
            for x in 0..256 {
                if img.in_mask(x, y) {
                    dev.push(out.pixel(x, y)[0] as f64 - 128.0);
                }
            }
        }
        // Quantisation makes the deviations integers, so compare against the
        // discretised normal: P(D <= k) = Phi((k + 0.5) / sigma).
        let n = SNormal::new(0.0, 2.0).unwrap();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let len = dev.len() as f64;
        let mut ks: f64 = 0.0;
        for k in -10..=10 {
            let emp = dev.iter().filter(|&&d| d <= k as f64).count() as f64 / len;
            ks = ks.max((emp - n.cdf(k as f64 + 0.5)).abs());
        }
        // Kolmogorov critical value at p = 0.01.
        let crit = 1.628 / len.sqrt();
        assert!(ks < crit, "ks statistic {ks} >= {crit}");
    }

    #[test]
    fn resample_preserves_flat_field_and_mean() {
        let mut img = TactileImage::black(480, "t");
        img.data.iter_mut().for_each(|v| *v = 200);
        let small = img.area_resample(224);
        assert_eq!(small.len(), 3 * 224 * 224);
        assert!(small.iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-5));

        let g = gradient_image();
        let s = g.area_resample(28);
        let mean_src = g.data.iter().step_by(3).map(|&v| v as f64).sum::<f64>() / (64.0 * 64.0);
        let mean_dst = s[..28 * 28].iter().map(|&v| v as f64 * 255.0).sum::<f64>() / (28.0 * 28.0);
        assert!((mean_src - mean_dst).abs() < 1e-3);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = gradient_image();
        img.write_png(&p).unwrap();
        let back = TactileImage::read_png(&p, "t").unwrap();
        assert_eq!(back, img);
    }
}
