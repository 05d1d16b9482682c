use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::resize::resize_bilinear;
use crate::error::{validation, Result};
use crate::image::Image;

/// Sampling ranges for the non-shifting augmentation 𝒯.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonShiftConfig {
    /// Crop area as a fraction of the frame.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub hflip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift bound in turns, at most 0.5.
    pub hue: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
}

impl Default for NonShiftConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.54, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            jitter_p: 0.8,
            grayscale_p: 0.2,
        }
    }
}

impl NonShiftConfig {
    /// A configuration whose every sample is the identity.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            hflip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(validation(format!("crop scale {:?} not within (0, 1]", self.crop_scale)));
        }
        let (r0, r1) = self.crop_ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(validation(format!("crop ratio {:?} invalid", self.crop_ratio)));
        }
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(validation(format!("{name} = {p} is not a probability")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(validation(format!("hue = {} outside [0, 0.5]", self.hue)));
        }
        Ok(())
    }

    /// Draws every random choice for an image of the given size.
    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> NonShiftSpec {
        // Full-area crops keep the frame regardless of its aspect ratio.
        let crop = (self.crop_scale.0 < 1.0).then(|| self.sample_crop(height, width, rng));
        let hflip = rng.random_bool(self.hflip_p);
        let jitter = rng.random_bool(self.jitter_p).then(|| {
            let mut factor = |s: f64| 1.0 - s + 2.0 * s * rng.random::<f64>();
            let brightness = factor(self.brightness);
            let contrast = factor(self.contrast);
            let saturation = factor(self.saturation);
            let hue = self.hue * (2.0 * rng.random::<f64>() - 1.0);
            let mut order = [0u8, 1, 2, 3];
            for i in (1..4).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            Jitter {
                brightness,
                contrast,
                saturation,
                hue,
                order,
            }
        });
        let grayscale = rng.random_bool(self.grayscale_p);
        NonShiftSpec {
            crop,
            hflip,
            jitter,
            grayscale,
        }
    }

    fn sample_crop(&self, height: usize, width: usize, rng: &mut impl Rng) -> Crop {
        let area = (height * width) as f64;
        let (lr0, lr1) = (self.crop_ratio.0.ln(), self.crop_ratio.1.ln());
        for _ in 0..10 {
            let target = area * uniform(rng, self.crop_scale.0, self.crop_scale.1);
            let ratio = uniform(rng, lr0, lr1).exp();
            let w = (target * ratio).sqrt().round() as usize;
            let h = (target / ratio).sqrt().round() as usize;
            if w > 0 && h > 0 && w <= width && h <= height {
                let y = rng.random_range(0..=height - h);
                let x = rng.random_range(0..=width - w);
                return Crop {
                    y,
                    x,
                    height: h,
                    width: w,
                };
            }
        }
        // Central crop clipped to the ratio bounds.
        let in_ratio = width as f64 / height as f64;
        let (w, h) = if in_ratio < self.crop_ratio.0 {
            (width, ((width as f64 / self.crop_ratio.0).round() as usize).clamp(1, height))
        } else if in_ratio > self.crop_ratio.1 {
            (((height as f64 * self.crop_ratio.1).round() as usize).clamp(1, width), height)
        } else {
            (width, height)
        };
        Crop {
            y: (height - h) / 2,
            x: (width - w) / 2,
            height: h,
            width: w,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// Colour jitter factors; `order` lists brightness (0), contrast (1),
/// saturation (2) and hue (3) in application order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [u8; 4],
}

/// Fully materialized augmentation; application is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonShiftSpec {
    /// `None` keeps the full frame.
    pub crop: Option<Crop>,
    pub hflip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
}

impl NonShiftSpec {
    pub fn identity() -> Self {
        Self {
            crop: None,
            hflip: false,
            jitter: None,
            grayscale: false,
        }
    }
}

fn luma(img: &Image, y: usize, x: usize) -> f32 {
    if img.channels() == 1 {
        img.get(0, y, x)
    } else {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    }
}

fn blend(img: &Image, other: impl Fn(usize, usize, usize) -> f32, factor: f64) -> Image {
    let (c, h, w) = img.shape();
    let f = factor as f32;
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f * img.get(ch, y, x) + (1.0 - f) * other(ch, y, x);
                out.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(img: &Image, shift: f64) -> Image {
    if img.channels() != 3 || shift == 0.0 {
        return img.clone();
    }
    let (_, h, w) = img.shape();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
            let (r, g, b) = hsv_to_rgb(hh + shift as f32, s, v);
            out.set(0, y, x, r.clamp(0.0, 1.0));
            out.set(1, y, x, g.clamp(0.0, 1.0));
            out.set(2, y, x, b.clamp(0.0, 1.0));
        }
    }
    out
}

fn jitter(img: &Image, j: &Jitter) -> Image {
    let mut out = img.clone();
    for op in j.order {
        out = match op {
            0 => blend(&out, |_, _, _| 0.0, j.brightness),
            1 => {
                let (_, h, w) = out.shape();
                let mut sum = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        sum += luma(&out, y, x) as f64;
                    }
                }
                let mean = (sum / (h * w) as f64) as f32;
                blend(&out, |_, _, _| mean, j.contrast)
            }
            2 if out.channels() == 3 => {
                let src = out.clone();
                blend(&out, |_, y, x| luma(&src, y, x), j.saturation)
            }
            3 => shift_hue(&out, j.hue),
            _ => out,
        };
    }
    out
}

fn grayscale(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let (c, h, w) = img.shape();
    let mut out = Image::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let g = luma(img, y, x);
            for ch in 0..c {
                out.set(ch, y, x, g);
            }
        }
    }
    out
}

fn crop_resize(img: &Image, crop: Crop) -> Image {
    let (c, h, w) = img.shape();
    if crop.y == 0 && crop.x == 0 && crop.height == h && crop.width == w {
        return img.clone();
    }
    let mut patch = Image::zeros(c, crop.height, crop.width);
    for ch in 0..c {
        for y in 0..crop.height {
            for x in 0..crop.width {
                patch.set(ch, y, x, img.get(ch, crop.y + y, crop.x + x));
            }
        }
    }
    resize_bilinear(&patch, h, w)
}

fn hflip(img: &Image) -> Image {
    let (c, h, w) = img.shape();
    let mut out = Image::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, img.get(ch, y, w - 1 - x));
            }
        }
    }
    out
}

/// Applies crop-and-resize, flip, colour jitter and grayscale in that order.
/// Output keeps the input shape and lies in `[0, 1]`.
pub fn apply_nonshift(x: &Image, spec: &NonShiftSpec) -> Result<Image> {
    let (_, h, w) = x.shape();
    let mut out = match spec.crop {
        Some(c) => {
            if c.height == 0 || c.width == 0 || c.y + c.height > h || c.x + c.width > w {
                return Err(validation(format!("crop {c:?} outside a {h}×{w} image")));
            }
            crop_resize(x, c)
        }
        None => x.clone(),
    };
    if spec.hflip {
        out = hflip(&out);
    }
    if let Some(j) = &spec.jitter {
        out = jitter(&out, j);
    }
    if spec.grayscale {
        out = grayscale(&out);
    }
    Ok(out.clamp_unit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identity_spec_is_exact() {
        let img = noise(3, 9, 7, 1);
        assert_eq!(apply_nonshift(&img, &NonShiftSpec::identity()).unwrap(), img);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = NonShiftConfig::identity().sample(9, 7, &mut rng);
        assert_eq!(apply_nonshift(&img, &spec).unwrap(), img);
    }

    #[test]
    fn grayscale_on_gray_rgb_is_stable() {
        let g = noise(1, 6, 6, 2);
        let mut rgb = Image::zeros(3, 6, 6);
        for c in 0..3 {
            rgb.plane_mut(c).copy_from_slice(g.data());
        }
        let spec = NonShiftSpec {
            grayscale: true,
            ..NonShiftSpec::identity()
        };
        assert!(apply_nonshift(&rgb, &spec).unwrap().max_abs_diff(&rgb) < 1e-6);
    }

    #[test]
    fn materialized_spec_is_deterministic() {
        let img = noise(3, 16, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = NonShiftConfig {
            jitter_p: 1.0,
            ..Default::default()
        };
        for _ in 0..20 {
            let spec = cfg.sample(16, 16, &mut rng);
            let a = apply_nonshift(&img, &spec).unwrap();
            let b = apply_nonshift(&img, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), img.shape());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crops_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = NonShiftConfig::default();
        for (h, w) in [(32, 32), (8, 20), (3, 3)] {
            for _ in 0..200 {
                let c = cfg.sample(h, w, &mut rng).crop.expect("partial crop scale");
                assert!(c.height >= 1 && c.width >= 1);
                assert!(c.y + c.height <= h && c.x + c.width <= w);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for (r, g, b) in [(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = noise(1, 4, 5, 6);
        assert_eq!(hflip(&hflip(&img)), img);
    }
}
