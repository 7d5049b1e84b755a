//! Contrastive view family: brightness, contrast, rotation, aspect ratio,
//! horizontal flip, and a randomly sized and located crop.
//!
//! [`apply`] composes the transformations in a fixed order:
//! crop (with aspect) and resize, rotate, flip, contrast, brightness, clip.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Additive offset, in units of the `[0, 1]` intensity range.
    pub brightness_range: (f64, f64),
    /// Multiplicative contrast about the image mean.
    pub contrast_range: (f64, f64),
    pub rotation_range: (f64, f64),
    /// Crop width/height ratio relative to the source aspect ratio.
    pub aspect_ratio_range: (f64, f64),
    pub hflip_prob: f64,
    /// Crop area as a fraction of the source area.
    pub crop_scale_range: (f64, f64),
    /// `(height, width)` of every output view.
    pub output_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness_range: (-0.1, 0.1),
            contrast_range: (0.9, 1.1),
            rotation_range: (-10.0, 10.0),
            aspect_ratio_range: (0.9, 1.1),
            hflip_prob: 0.5,
            crop_scale_range: (0.4, 1.0),
            output_size: (208, 256),
        }
    }
}

impl AugmentConfig {
    /// Every range collapsed onto the identity transformation.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            brightness_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            rotation_range: (0.0, 0.0),
            aspect_ratio_range: (1.0, 1.0),
            hflip_prob: 0.0,
            crop_scale_range: (1.0, 1.0),
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("brightness", self.brightness_range),
            ("contrast", self.contrast_range),
            ("rotation", self.rotation_range),
            ("aspect ratio", self.aspect_ratio_range),
            ("crop scale", self.crop_scale_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.contrast_range.0 <= 0.0 || self.aspect_ratio_range.0 <= 0.0 {
            return Err(Error::invalid("contrast and aspect ratio must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid("hflip_prob must lie in [0,1]"));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && hi <= 1.0) {
            return Err(Error::invalid("crop scale range must lie in (0,1]"));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::invalid("output size must be positive"));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl CropBox {
    pub fn area(&self) -> f64 {
        self.height * self.width
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.top >= 0.0
            && self.left >= 0.0
            && self.height > 0.0
            && self.width > 0.0
            && self.top + self.height <= height as f64 + 1e-9
            && self.left + self.width <= width as f64 + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub brightness: f64,
    pub contrast: f64,
    pub rotation_deg: f64,
    pub aspect_ratio: f64,
    pub hflip: bool,
    pub crop_scale: f64,
    pub crop: CropBox,
    pub output_size: (usize, usize),
}

impl AugmentParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            rotation_deg: 0.0,
            aspect_ratio: 1.0,
            hflip: false,
            crop_scale: 1.0,
            crop: CropBox {
                top: 0.0,
                left: 0.0,
                height: height as f64,
                width: width as f64,
            },
            output_size: (height, width),
        }
    }
}

fn draw(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one parameter set for a source image of `input_size` `(height, width)`.
pub fn sample_params(config: &AugmentConfig, input_size: (usize, usize), rng: &mut Rng) -> AugmentParams {
    let (h, w) = (input_size.0 as f64, input_size.1 as f64);
    let brightness = draw(rng, config.brightness_range);
    let contrast = draw(rng, config.contrast_range);
    let rotation_deg = draw(rng, config.rotation_range);
    let aspect_ratio = draw(rng, config.aspect_ratio_range);
    let hflip = config.hflip_prob > 0.0 && rng.random::<f64>() < config.hflip_prob;
    let crop_scale = draw(rng, config.crop_scale_range);

    let area = crop_scale * h * w;
    let crop_w = (area * aspect_ratio * w / h).sqrt().min(w);
    let crop_h = (area / crop_w).min(h);
    let top = draw(rng, (0.0, h - crop_h));
    let left = draw(rng, (0.0, w - crop_w));
    AugmentParams {
        brightness,
        contrast,
        rotation_deg,
        aspect_ratio,
        hflip,
        crop_scale,
        crop: CropBox {
            top,
            left,
            height: crop_h,
            width: crop_w,
        },
        output_size: config.output_size,
    }
}

pub fn apply(image: &GrayImage, params: &AugmentParams) -> Result<GrayImage> {
    if !params.crop.within(image.height, image.width) {
        return Err(Error::invalid(format!(
            "crop box {:?} outside {}x{} image",
            params.crop, image.height, image.width
        )));
    }
    let (oh, ow) = params.output_size;
    let c = &params.crop;
    let mut out = if (c.top, c.left, c.height, c.width)
        == (0.0, 0.0, image.height as f64, image.width as f64)
    {
        image.resize(oh, ow)
    } else {
        image.resample_box(c.top, c.left, c.height, c.width, oh, ow)
    };
    if params.rotation_deg != 0.0 {
        out = out.rotate(params.rotation_deg, 0.0);
    }
    if params.hflip {
        out = out.flip_horizontal();
    }
    if params.contrast != 1.0 {
        let mean = out.data.iter().map(|&v| v as f64).sum::<f64>() / out.data.len() as f64;
        let (m, k) = (mean as f32, params.contrast as f32);
        for v in &mut out.data {
            *v = m + (*v - m) * k;
        }
    }
    if params.brightness != 0.0 {
        let b = params.brightness as f32;
        for v in &mut out.data {
            *v += b;
        }
    }
    out.clamp_unit();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct View {
    pub image: GrayImage,
    pub params: AugmentParams,
}

/// Two independent draws from one stream.
pub fn make_pair(image: &GrayImage, config: &AugmentConfig, rng: &mut Rng) -> Result<(View, View)> {
    let p1 = sample_params(config, image.dims(), rng);
    let p2 = sample_params(config, image.dims(), rng);
    Ok((
        View {
            image: apply(image, &p1)?,
            params: p1,
        },
        View {
            image: apply(image, &p2)?,
            params: p2,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;
    use proptest::prelude::*;

    fn textured(h: usize, w: usize) -> GrayImage {
        let data = (0..h * w)
            .map(|i| (((i * 7919) % 101) as f32 / 100.0).clamp(0.0, 1.0))
            .collect();
        GrayImage::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn degenerate_ranges_give_identity() {
        let cfg = AugmentConfig::identity((208, 256));
        let p = sample_params(&cfg, (208, 256), &mut from_seed(1));
        assert_eq!(p, AugmentParams::identity(208, 256));
        let img = textured(208, 256);
        assert_eq!(apply(&img, &p).unwrap(), img);
        let (a, b) = make_pair(&img, &cfg, &mut from_seed(4)).unwrap();
        assert_eq!(a.image, img);
        assert_eq!(b.image, img);
    }

    #[test]
    fn draws_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = from_seed(2);
        for _ in 0..10_000 {
            let p = sample_params(&cfg, (208, 256), &mut rng);
            let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
            assert!(inside(p.brightness, cfg.brightness_range));
            assert!(inside(p.contrast, cfg.contrast_range));
            assert!(inside(p.rotation_deg, cfg.rotation_range));
            assert!(inside(p.aspect_ratio, cfg.aspect_ratio_range));
            assert!(inside(p.crop_scale, cfg.crop_scale_range));
            assert!(p.crop.within(208, 256), "{:?}", p.crop);
        }
    }

    #[test]
    fn fixed_stream_is_deterministic() {
        let cfg = AugmentConfig::default();
        let a = sample_params(&cfg, (208, 256), &mut from_seed(3));
        let b = sample_params(&cfg, (208, 256), &mut from_seed(3));
        assert_eq!(a, b);
        let img = textured(64, 64);
        let cfg = AugmentConfig {
            output_size: (64, 64),
            ..cfg
        };
        let (a1, a2) = make_pair(&img, &cfg, &mut from_seed(8)).unwrap();
        let (b1, b2) = make_pair(&img, &cfg, &mut from_seed(8)).unwrap();
        assert_eq!((a1.image, a2.image), (b1.image, b2.image));
    }

    #[test]
    fn flip_twice_restores() {
        let img = textured(40, 50);
        let mut p = AugmentParams::identity(40, 50);
        p.hflip = true;
        let once = apply(&img, &p).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply(&once, &p).unwrap(), img);
    }

    #[test]
    fn brightness_on_constant_image() {
        for (c, b) in [(0.3f32, 0.2f64), (0.9, 0.3), (0.1, -0.25)] {
            let img = GrayImage::filled(20, 30, c);
            let mut p = AugmentParams::identity(20, 30);
            p.brightness = b;
            let out = apply(&img, &p).unwrap();
            let expected = (c + b as f32).clamp(0.0, 1.0);
            assert!(out.data.iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn half_area_crop() {
        let cfg = AugmentConfig {
            crop_scale_range: (0.5, 0.5),
            ..AugmentConfig::default()
        };
        let img = textured(208, 256);
        let mut rng = from_seed(5);
        for _ in 0..50 {
            let (a, b) = make_pair(&img, &cfg, &mut rng).unwrap();
            for v in [a, b] {
                let frac = v.params.crop.area() / (208.0 * 256.0);
                assert!((frac - 0.5).abs() < 1e-9, "{frac}");
            }
        }
    }

    #[test]
    fn crop_outside_is_an_error() {
        let img = textured(20, 20);
        let mut p = AugmentParams::identity(20, 20);
        p.crop.left = 5.0;
        assert!(apply(&img, &p).is_err());
    }

    #[test]
    fn order_is_fixed() {
        // Brightness after contrast: contrast about the mean of a two-level
        // image, then the offset. The reverse order gives a different result.
        let mut img = GrayImage::filled(2, 2, 0.2);
        img.data[0] = 0.6;
        let mut p = AugmentParams::identity(2, 2);
        p.contrast = 2.0;
        p.brightness = 0.1;
        let out = apply(&img, &p).unwrap();
        let mean = 0.3f32;
        assert!((out.data[0] - ((0.6 - mean) * 2.0 + mean + 0.1)).abs() < 1e-6);
        assert!((out.data[1] - ((0.2 - mean) * 2.0 + mean + 0.1)).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn outputs_stay_in_unit_range(seed in 0u64..10_000) {
            let cfg = AugmentConfig {
                brightness_range: (-0.5, 0.5),
                contrast_range: (0.2, 3.0),
                output_size: (24, 32),
                ..AugmentConfig::default()
            };
            let img = textured(26, 32);
            let mut rng = from_seed(seed);
            let p = sample_params(&cfg, img.dims(), &mut rng);
            let out = apply(&img, &p).unwrap();
            prop_assert_eq!(out.dims(), (24, 32));
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
