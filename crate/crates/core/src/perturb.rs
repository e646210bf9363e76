//! Strong perturbations for the student's view of unlabeled images.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{CutMixMask, Rect};
use crate::tensor::{Mask, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Maximum absolute hue rotation, as a fraction of the hue circle.
    pub hue: f64,
    pub blur_sigma: [f64; 2],
    pub cutmix_probability: f64,
    pub cutmix_area: [f64; 2],
    /// Height / width of the pasted rectangle.
    pub cutmix_aspect: [f64; 2],
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            brightness: [0.6, 1.4],
            contrast: [0.6, 1.4],
            saturation: [0.6, 1.4],
            hue: 0.1,
            blur_sigma: [0.1, 2.0],
            cutmix_probability: 0.5,
            cutmix_area: [0.25, 0.75],
            cutmix_aspect: [0.5, 2.0],
        }
    }
}

impl PerturbConfig {
    /// Jitter and blur collapsed to the identity.
    pub fn identity() -> Self {
        PerturbConfig {
            brightness: [1.0, 1.0],
            contrast: [1.0, 1.0],
            saturation: [1.0, 1.0],
            hue: 0.0,
            blur_sigma: [0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2], lo: f64| {
            if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} range {r:?} is invalid")))
            }
        };
        ordered("brightness", self.brightness, 0.0)?;
        ordered("contrast", self.contrast, 0.0)?;
        ordered("saturation", self.saturation, 0.0)?;
        ordered("blur_sigma", self.blur_sigma, 0.0)?;
        ordered("cutmix_area", self.cutmix_area, 0.0)?;
        ordered("cutmix_aspect", self.cutmix_aspect, f64::MIN_POSITIVE)?;
        if self.cutmix_area[1] > 1.0 {
            return Err(Error::Config("cutmix_area above 1".into()));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("hue {} not in [0, 0.5]", self.hue)));
        }
        if !(0.0..=1.0).contains(&self.cutmix_probability) {
            return Err(Error::Config(format!(
                "cutmix_probability {} not in [0, 1]",
                self.cutmix_probability
            )));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// One concrete draw of color-jitter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub order: [JitterOp; 4],
}

impl JitterParams {
    pub fn identity() -> Self {
        JitterParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [
                JitterOp::Brightness,
                JitterOp::Contrast,
                JitterOp::Saturation,
                JitterOp::Hue,
            ],
        }
    }

    pub fn sample<R: Rng + ?Sized>(config: &PerturbConfig, rng: &mut R) -> Self {
        let mut order = Self::identity().order;
        order.shuffle(rng);
        JitterParams {
            brightness: draw(rng, config.brightness),
            contrast: draw(rng, config.contrast),
            saturation: draw(rng, config.saturation),
            hue: draw(rng, [-config.hue, config.hue]),
            order,
        }
    }
}

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Applies jitter to a 3×H×W image in `[0,1]`; clamps after every step.
pub fn apply_color_jitter(image: &Tensor, p: &JitterParams) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("color jitter needs 3 channels, got {c}")));
    }
    let n = h * w;
    let mut px = image.data().to_vec();
    let clamp = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    for op in p.order {
        match op {
            JitterOp::Brightness => {
                px.iter_mut().for_each(|x| *x *= p.brightness);
            }
            JitterOp::Contrast => {
                let mean = (0..n)
                    .map(|i| luminance(px[i], px[n + i], px[2 * n + i]))
                    .sum::<f64>()
                    / n as f64;
                let k = p.contrast;
                px.iter_mut().for_each(|x| *x = *x * k + mean * (1.0 - k));
            }
            JitterOp::Saturation => {
                let k = p.saturation;
                for i in 0..n {
                    let gray = luminance(px[i], px[n + i], px[2 * n + i]);
                    for ch in 0..3 {
                        let x = &mut px[ch * n + i];
                        *x = *x * k + gray * (1.0 - k);
                    }
                }
            }
            JitterOp::Hue => {
                if p.hue == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let (hh, s, v) = rgb_to_hsv(px[i], px[n + i], px[2 * n + i]);
                    let (r, g, b) = hsv_to_rgb((hh + p.hue).rem_euclid(1.0), s, v);
                    px[i] = r;
                    px[n + i] = g;
                    px[2 * n + i] = b;
                }
            }
        }
        clamp(&mut px);
    }
    Tensor::new(vec![3, h, w], px)
}

pub fn color_jitter<R: Rng + ?Sized>(
    image: &Tensor,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<Tensor> {
    apply_color_jitter(image, &JitterParams::sample(config, rng))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Symmetric (edge-repeating) reflection of `i` into `0..n`.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / total).collect()
}

/// Separable Gaussian blur of a C×H×W image; `sigma == 0` is the identity.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * row[reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        kv * tmp[(ch * h + reflect(y as isize + j as isize - r, h)) * w + x]
                    })
                    .sum();
                out[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Color jitter followed by a blur with a sampled sigma.
pub fn color_distort<R: Rng + ?Sized>(
    image: &Tensor,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let jittered = color_jitter(image, config, rng)?;
    gaussian_blur(&jittered, draw(rng, config.blur_sigma))
}

/// Rectangle with area fraction `area` of the map and aspect `h / w`,
/// clamped so that it is nonempty and never covers the whole map.
pub fn cutmix_rect_size(height: usize, width: usize, area: f64, aspect: f64) -> (usize, usize) {
    let pixels = area * (height * width) as f64;
    let rh = ((pixels * aspect).sqrt().round() as usize).clamp(1, height);
    let mut rw = ((pixels / rh as f64).round() as usize).clamp(1, width);
    if rh == height && rw == width {
        rw -= 1;
    }
    (rh, rw)
}

pub fn sample_cutmix_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<CutMixMask> {
    if height < 2 || width < 2 {
        return Err(Error::Shape(format!("cutmix needs at least 2x2, got {height}x{width}")));
    }
    let area = draw(rng, config.cutmix_area);
    let aspect = draw(rng, config.cutmix_aspect);
    let (rh, rw) = cutmix_rect_size(height, width, area, aspect);
    let top = rng.gen_range(0..=height - rh);
    let left = rng.gen_range(0..=width - rw);
    CutMixMask::from_rect(
        height,
        width,
        Rect {
            top,
            left,
            height: rh,
            width: rw,
        },
    )
}

/// `u_a ⊙ M + u_b ⊙ (1 - M)`, channel-wise.
pub fn cutmix_images(a: &Tensor, b: &Tensor, mask: &Mask) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.dims3()?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::Shape("mask size differs from images".into()));
    }
    let mut out = b.clone();
    for ch in 0..c {
        for (i, &m) in mask.data().iter().enumerate() {
            if m {
                out.data_mut()[ch * h * w + i] = a.data()[ch * h * w + i];
            }
        }
    }
    Ok(out)
}
