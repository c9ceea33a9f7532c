//! Stochastic augmentation and mixup.
//!
//! One augmentation pass draws its random decisions in a fixed order
//! (flip, flip, angle, zoom, brightness) from the caller's stream, so a
//! given (seed, sample, epoch) stream always yields the same image no
//! matter how samples are scheduled across workers.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};

use super::FundusImage;

/// Knobs for one augmentation pass plus the mixup concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Maximum absolute rotation, degrees; the angle is uniform in
    /// `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Scale factor interval; 1.0 means no zoom.
    pub zoom_range: (f64, f64),
    /// Additive luminance delta interval on the unit scale.
    pub brightness_delta: (f64, f64),
    pub enable_flip: bool,
    pub enable_rotation: bool,
    pub enable_zoom: bool,
    pub enable_brightness: bool,
    /// Beta concentration for mixup's lambda.
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_deg: 15.0,
            zoom_range: (0.9, 1.1),
            brightness_delta: (-0.08, 0.08),
            enable_flip: true,
            enable_rotation: true,
            enable_zoom: true,
            enable_brightness: true,
            mixup_alpha: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.rotation_deg < 0.0 {
            return Err(Error::config(format!(
                "rotation_deg {} must be non-negative",
                self.rotation_deg
            )));
        }
        if self.zoom_range.0 <= 0.0 || self.zoom_range.0 > self.zoom_range.1 {
            return Err(Error::config(format!(
                "zoom_range {:?} must be a positive interval",
                self.zoom_range
            )));
        }
        if self.brightness_delta.0 > self.brightness_delta.1 {
            return Err(Error::config(format!(
                "brightness_delta {:?} is inverted",
                self.brightness_delta
            )));
        }
        if self.mixup_alpha <= 0.0 {
            return Err(Error::config(format!(
                "mixup_alpha {} must be positive",
                self.mixup_alpha
            )));
        }
        Ok(())
    }

    /// Identity configuration: every transform disabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            enable_flip: false,
            enable_rotation: false,
            enable_zoom: false,
            enable_brightness: false,
            ..AugmentConfig::default()
        }
    }
}

impl FundusImage {
    pub fn flip_horizontal(&self) -> FundusImage {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * w + (w - 1 - x)) * 3;
                data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        FundusImage { height: h, width: w, data, source_id: self.source_id.clone() }
    }

    pub fn flip_vertical(&self) -> FundusImage {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; self.data.len()];
        for y in 0..h {
            let src = y * w * 3;
            let dst = (h - 1 - y) * w * 3;
            data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        FundusImage { height: h, width: w, data, source_id: self.source_id.clone() }
    }

    /// Rotate about the image center, bilinear sampling, black fill.
    pub fn rotate(&self, degrees: f64) -> FundusImage {
        let theta = degrees.to_radians();
        let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
        let (cy, cx) = ((self.height as f32 - 1.0) * 0.5, (self.width as f32 - 1.0) * 0.5);
        self.sample_map(|y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
        })
    }

    /// Scale about the center by `factor` (> 1 zooms in); exposed regions
    /// fill with black.
    pub fn zoom(&self, factor: f64) -> FundusImage {
        let inv = (1.0 / factor) as f32;
        let (cy, cx) = ((self.height as f32 - 1.0) * 0.5, (self.width as f32 - 1.0) * 0.5);
        self.sample_map(|y, x| (cy + (y - cy) * inv, cx + (x - cx) * inv))
    }

    /// Additive brightness shift, clamped to the unit interval.
    pub fn brightness(&self, delta: f64) -> FundusImage {
        let d = delta as f32;
        FundusImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v + d).clamp(0.0, 1.0)).collect(),
            source_id: self.source_id.clone(),
        }
    }

    /// Resample this image through an output-to-source coordinate map,
    /// bilinear, black outside the frame.
    fn sample_map(&self, map: impl Fn(f32, f32) -> (f32, f32)) -> FundusImage {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y as f32, x as f32);
                let dst = (y * w + x) * 3;
                if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f32 || sx > (w - 1) as f32 {
                    continue;
                }
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let (dy, dx) = (sy - y0 as f32, sx - x0 as f32);
                for ch in 0..3 {
                    let g = |yy: usize, xx: usize| self.data[(yy * w + xx) * 3 + ch];
                    let v = g(y0, x0) * (1.0 - dy) * (1.0 - dx)
                        + g(y0, x1) * (1.0 - dy) * dx
                        + g(y1, x0) * dy * (1.0 - dx)
                        + g(y1, x1) * dy * dx;
                    data[dst + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        FundusImage { height: h, width: w, data, source_id: self.source_id.clone() }
    }

    /// One stochastic augmentation pass: flips, rotation, zoom, brightness,
    /// in that order. All five random draws happen unconditionally so the
    /// stream position never depends on the enable flags.
    pub fn augment(&self, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<FundusImage> {
        cfg.validate()?;
        let hflip = rng.random_bool(cfg.hflip_prob);
        let vflip = rng.random_bool(cfg.vflip_prob);
        let angle = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        };
        let zoom = if cfg.zoom_range.0 < cfg.zoom_range.1 {
            rng.random_range(cfg.zoom_range.0..=cfg.zoom_range.1)
        } else {
            cfg.zoom_range.0
        };
        let delta = if cfg.brightness_delta.0 < cfg.brightness_delta.1 {
            rng.random_range(cfg.brightness_delta.0..=cfg.brightness_delta.1)
        } else {
            cfg.brightness_delta.0
        };

        let mut out = self.clone();
        if cfg.enable_flip && hflip {
            out = out.flip_horizontal();
        }
        if cfg.enable_flip && vflip {
            out = out.flip_vertical();
        }
        if cfg.enable_rotation && angle != 0.0 {
            out = out.rotate(angle);
        }
        if cfg.enable_zoom && zoom != 1.0 {
            out = out.zoom(zoom);
        }
        if cfg.enable_brightness && delta != 0.0 {
            out = out.brightness(delta);
        }
        Ok(out)
    }
}

/// Convex combination of two samples: `lambda * i + (1 - lambda) * j` for
/// both pixels and label vectors.
pub fn mixup(
    x_i: &[f32],
    y_i: &[f32],
    x_j: &[f32],
    y_j: &[f32],
    lambda: f64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if x_i.len() != x_j.len() {
        return Err(Error::shape(format!(
            "mixup: image lengths differ, {} vs {}",
            x_i.len(),
            x_j.len()
        )));
    }
    if y_i.len() != y_j.len() {
        return Err(Error::shape(format!(
            "mixup: label lengths differ, {} vs {}",
            y_i.len(),
            y_j.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::numeric(format!("mixup: lambda {lambda} outside [0, 1]")));
    }
    let l = lambda as f32;
    let x = x_i.iter().zip(x_j).map(|(&a, &b)| l * a + (1.0 - l) * b).collect();
    let y = y_i.iter().zip(y_j).map(|(&a, &b)| l * a + (1.0 - l) * b).collect();
    Ok((x, y))
}

/// Draw mixup's mixing weight from `Beta(alpha, alpha)`.
pub fn sample_mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::config(format!("mixup alpha {alpha} must be positive")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::config(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> FundusImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
        FundusImage::from_rgb8(h, w, &bytes, "rand").unwrap()
    }

    #[test]
    fn disabled_config_is_identity() {
        let img = random_image(1, 8, 8);
        let cfg = AugmentConfig::disabled();
        let mut rng = stream(7, Domain::Augment, 0, 0);
        let out = img.augment(&cfg, &mut rng).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn zeroed_ranges_are_identity_even_when_enabled() {
        let img = random_image(2, 8, 8);
        let cfg = AugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_deg: 0.0,
            zoom_range: (1.0, 1.0),
            brightness_delta: (0.0, 0.0),
            ..AugmentConfig::default()
        };
        let mut rng = stream(7, Domain::Augment, 1, 0);
        let out = img.augment(&cfg, &mut rng).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let img = random_image(3, 5, 9);
        assert_eq!(img.flip_horizontal().flip_horizontal().data, img.data);
        assert_eq!(img.flip_vertical().flip_vertical().data, img.data);
    }

    #[test]
    fn same_stream_gives_identical_augmentation() {
        let img = random_image(4, 12, 12);
        let cfg = AugmentConfig::default();
        let a = img.augment(&cfg, &mut stream(9, Domain::Augment, 3, 5)).unwrap();
        let b = img.augment(&cfg, &mut stream(9, Domain::Augment, 3, 5)).unwrap();
        assert_eq!(a.data, b.data);
        let c = img.augment(&cfg, &mut stream(9, Domain::Augment, 3, 6)).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn rotation_keeps_values_in_range_and_fills_black() {
        let img = FundusImage::new(9, 9, vec![1.0; 9 * 9 * 3], "w").unwrap();
        let out = img.rotate(45.0);
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.pixel(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(out.pixel(4, 4), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let xi = [1.0f32, 0.0, 0.5];
        let xj = [0.0f32, 1.0, 0.5];
        let yi = [1.0f32, 0.0, 0.0];
        let yj = [0.0f32, 1.0, 0.0];
        let (x, y) = mixup(&xi, &yi, &xj, &yj, 1.0).unwrap();
        assert_eq!(x, xi.to_vec());
        assert_eq!(y, yi.to_vec());
        let (_, y) = mixup(&xi, &yi, &xj, &yj, 0.5).unwrap();
        assert_eq!(y, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn mixup_preserves_label_mass() {
        let yi = [0.7f32, 0.2, 0.1];
        let yj = [0.1f32, 0.1, 0.8];
        for &l in &[0.0, 0.25, 0.6180339887, 1.0] {
            let (_, y) = mixup(&[0.0; 3], &yi, &[0.0; 3], &yj, l).unwrap();
            let sum: f64 = y.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mixup_rejects_mismatched_shapes() {
        assert!(mixup(&[0.0; 3], &[1.0], &[0.0; 4], &[1.0], 0.5).is_err());
        assert!(mixup(&[0.0; 3], &[1.0], &[0.0; 3], &[0.5, 0.5], 0.5).is_err());
        assert!(mixup(&[0.0; 3], &[1.0], &[0.0; 3], &[1.0], 1.5).is_err());
    }

    #[test]
    fn beta_lambda_is_symmetric_around_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xbe7a);
        let n = 100_000;
        let mut acc = 0.0f64;
        for _ in 0..n {
            acc += sample_mixup_lambda(0.2, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "empirical mean {mean}");
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = AugmentConfig::default();
        cfg.hflip_prob = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.zoom_range = (0.0, 1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.mixup_alpha = 0.0;
        assert!(cfg.validate().is_err());
    }
}
