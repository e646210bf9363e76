//! Seeded synthetic scenes: sky, a receding ground plane and box/disk
//! primitives painted back to front. Appearance carries depth cues through
//! haze and depth-dependent texture; the domain id changes shapes, colors,
//! camera response and sensor noise so that a held-out domain exists.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::perturb::gaussian_blur;
use crate::rng::{derive_seed, rng_for, Rng as SeededRng};
use crate::tensor::{DepthMap, DepthSample, Mask, Tensor};
use rand::SeedableRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub primitives: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Fraction of rows above the horizon (sky).
    pub sky_fraction: f64,
    /// Sensor noise amplitude before the domain multiplier.
    pub texture_noise: f64,
    /// Fraction of non-sky pixels randomly marked invalid.
    pub invalid_fraction: f64,
    pub domain: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            primitives: 6,
            depth_min: 1.0,
            depth_max: 20.0,
            sky_fraction: 0.25,
            texture_noise: 0.03,
            invalid_fraction: 0.0,
            domain: 0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_max > self.depth_min && self.depth_min > 0.0) {
            return Err(Error::Config(format!(
                "need depth_max > depth_min > 0, got [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("scenes must be at least 4x4".into()));
        }
        if !(0.0..0.9).contains(&self.sky_fraction) {
            return Err(Error::Config("sky_fraction must lie in [0, 0.9)".into()));
        }
        if !(0.0..0.5).contains(&self.invalid_fraction) || self.texture_noise < 0.0 {
            return Err(Error::Config("invalid noise or invalid_fraction".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Box,
    Disk,
}

/// Appearance parameters of a domain.
#[derive(Clone, Copy, Debug)]
struct Style {
    shape: Shape,
    haze: [f64; 3],
    /// Albedo channel range.
    albedo: [f64; 2],
    noise_mult: f64,
    texture_amp: f64,
    /// Stripe orientation in radians.
    stripe_angle: f64,
    camera: CameraRange,
}

/// Per-image camera response ranges: exposure gain, contrast about mid
/// gray, white-balance gains and lens blur sigma.
#[derive(Clone, Copy, Debug)]
struct CameraRange {
    gain: [f64; 2],
    contrast: [f64; 2],
    white_balance: [[f64; 2]; 3],
    blur: [f64; 2],
}

impl CameraRange {
    const NEUTRAL: CameraRange = CameraRange {
        gain: [1.0, 1.0],
        contrast: [1.0, 1.0],
        white_balance: [[1.0, 1.0]; 3],
        blur: [0.0, 0.0],
    };
}

struct Camera {
    gain: f64,
    contrast: f64,
    white_balance: [f64; 3],
    blur: f64,
}

fn span<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

impl CameraRange {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Camera {
        Camera {
            gain: span(rng, self.gain),
            contrast: span(rng, self.contrast),
            white_balance: [
                span(rng, self.white_balance[0]),
                span(rng, self.white_balance[1]),
                span(rng, self.white_balance[2]),
            ],
            blur: span(rng, self.blur),
        }
    }
}

fn style(domain: u32) -> Style {
    match domain {
        0 => Style {
            shape: Shape::Box,
            haze: [0.72, 0.80, 0.92],
            albedo: [0.05, 0.55],
            noise_mult: 1.0,
            texture_amp: 0.25,
            stripe_angle: 0.0,
            camera: CameraRange::NEUTRAL,
        },
        1 => Style {
            shape: Shape::Disk,
            haze: [0.92, 0.82, 0.66],
            albedo: [0.10, 0.70],
            noise_mult: 2.5,
            texture_amp: 0.18,
            stripe_angle: std::f64::consts::FRAC_PI_4,
            camera: CameraRange {
                gain: [1.0, 1.0],
                contrast: [1.0, 1.0],
                white_balance: [[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]],
                blur: [0.3, 0.7],
            },
        },
        d => {
            let mut rng = rng_for(u64::from(d), "domain-style", 0);
            Style {
                shape: if d % 2 == 0 { Shape::Box } else { Shape::Disk },
                haze: [
                    rng.gen_range(0.6..0.95),
                    rng.gen_range(0.6..0.95),
                    rng.gen_range(0.6..0.95),
                ],
                albedo: [rng.gen_range(0.0..0.15), rng.gen_range(0.45..0.75)],
                noise_mult: rng.gen_range(0.5..3.0),
                texture_amp: rng.gen_range(0.1..0.3),
                stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
                camera: CameraRange {
                    gain: [rng.gen_range(0.6..1.0), 1.0],
                    contrast: [rng.gen_range(0.6..1.0), 1.0],
                    white_balance: [[0.85, 1.15]; 3],
                    blur: [0.0, rng.gen_range(0.0..1.5)],
                },
            }
        }
    }
}

/// One painted region.
#[derive(Clone, Copy, Debug)]
pub struct Primitive {
    pub depth: f64,
    /// Center row/column and half-extents in pixels.
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub disk: bool,
}

impl Primitive {
    fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        if self.disk {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }
}

/// Paints primitives far to near over `depth`; returns, per pixel, the
/// index of the primitive that owns it (if any).
pub fn paint_primitives(depth: &mut [f64], width: usize, prims: &[Primitive]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..prims.len()).collect();
    order.sort_by(|&a, &b| prims[b].depth.total_cmp(&prims[a].depth).then(a.cmp(&b)));
    let mut owner = vec![None; depth.len()];
    for k in order {
        for (i, d) in depth.iter_mut().enumerate() {
            if prims[k].covers(i / width, i % width) {
                *d = prims[k].depth;
                owner[i] = Some(k);
            }
        }
    }
    owner
}

fn random_albedo<R: Rng + ?Sized>(rng: &mut R, s: &Style) -> [f64; 3] {
    [
        rng.gen_range(s.albedo[0]..s.albedo[1]),
        rng.gen_range(s.albedo[0]..s.albedo[1]),
        rng.gen_range(s.albedo[0]..s.albedo[1]),
    ]
}

/// One labeled scene. Outputs are rounded to `f32` precision so that PFM
/// storage is lossless.
pub fn generate_sample<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<DepthSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let st = style(spec.domain);
    let (tmin, tmax) = (spec.depth_min, spec.depth_max);

    let horizon = if spec.sky_fraction == 0.0 {
        0
    } else {
        let jitter = (h / 16).max(1) as i64;
        let base = (spec.sky_fraction * h as f64).round() as i64;
        (base + rng.gen_range(-jitter..=jitter)).clamp(1, h as i64 - 2) as usize
    };
    let ground_rows = (h - horizon) as f64;
    let ground_depth = |y: usize| -> f64 {
        (tmin * ground_rows / (y - horizon + 1) as f64).clamp(tmin, 0.9 * tmax)
    };

    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            depth[y * w + x] = if y < horizon { tmax } else { ground_depth(y) };
        }
    }

    let mut prims = Vec::with_capacity(spec.primitives);
    for _ in 0..spec.primitives {
        let t = rng.gen_range(tmin * 1.5..tmax * 0.6);
        // Base sits on the ground row with the same depth.
        let base = horizon as f64 - 1.0 + tmin * ground_rows / t;
        let size = (0.9 * h as f64 * tmin / t).max(2.0);
        let ry = size * rng.gen_range(0.35..0.8);
        let rx = size * rng.gen_range(0.25..0.7);
        prims.push(Primitive {
            depth: t,
            cy: base.min(h as f64) - ry,
            cx: rng.gen_range(0.0..w as f64),
            ry,
            rx,
            disk: st.shape == Shape::Disk,
        });
    }
    let owner = paint_primitives(&mut depth, w, &prims);

    let ground_albedo = random_albedo(rng, &st);
    let prim_albedo: Vec<[f64; 3]> = prims.iter().map(|_| random_albedo(rng, &st)).collect();
    let phase: Vec<f64> = (0..=prims.len())
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let tau = tmax / 3.0;
    let noise = spec.texture_noise * st.noise_mult;
    let (ca, sa) = (st.stripe_angle.cos(), st.stripe_angle.sin());

    let mut radiance = vec![0.0; 3 * h * w];
    let mut sky = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = depth[i];
            let rgb: [f64; 3] = if y < horizon && owner[i].is_none() {
                sky[i] = true;
                let lift = 0.08 * (1.0 - y as f64 / horizon.max(1) as f64);
                [st.haze[0] + lift, st.haze[1] + lift, st.haze[2] + lift]
            } else {
                let (albedo, ph) = match owner[i] {
                    Some(k) => (prim_albedo[k], phase[k]),
                    None => (ground_albedo, phase[prims.len()]),
                };
                let fog = 1.0 - (-t / tau).exp();
                // Farther surfaces show finer stripes.
                let freq = (0.04 * t / tmin).min(0.45);
                let u = (x as f64 * ca + y as f64 * sa) * freq;
                let stripe = st.texture_amp * (std::f64::consts::TAU * u + ph).sin();
                let mut c = [0.0; 3];
                for ch in 0..3 {
                    let surf = albedo[ch] * (1.0 + stripe);
                    c[ch] = surf * (1.0 - fog) + st.haze[ch] * fog;
                }
                c
            };
            for ch in 0..3 {
                radiance[ch * h * w + i] = rgb[ch];
            }
        }
    }

    let cam = st.camera.sample(rng);
    for ch in 0..3 {
        let k = cam.gain * cam.white_balance[ch];
        for v in &mut radiance[ch * h * w..(ch + 1) * h * w] {
            *v = ((*v * k - 0.5) * cam.contrast + 0.5).clamp(0.0, 1.0);
        }
    }
    let mut image = Tensor::new(vec![3, h, w], radiance)?;
    if cam.blur > 0.0 {
        image = gaussian_blur(&image, cam.blur)?;
    }
    let mut image = image.into_data();
    for v in image.iter_mut() {
        let n = if noise > 0.0 {
            rng.gen_range(-noise..noise)
        } else {
            0.0
        };
        *v = ((*v + n).clamp(0.0, 1.0) as f32) as f64;
    }

    let mut valid = vec![true; h * w];
    if spec.invalid_fraction > 0.0 {
        for i in 0..h * w {
            if !sky[i] && rng.gen::<f64>() < spec.invalid_fraction {
                valid[i] = false;
                depth[i] = 0.0;
            }
        }
    }
    for d in depth.iter_mut() {
        *d = (*d as f32) as f64;
    }

    let depth = DepthMap::new(Tensor::new(vec![h, w], depth)?, Mask::new(h, w, valid)?)?;
    let sky = Mask::new(h, w, sky)?;
    let sky = (sky.count() > 0).then_some(sky);
    DepthSample::new(Tensor::new(vec![3, h, w], image)?, depth, sky)
}

/// Sizes and seeds of the generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene template; its `domain` and `seed` are overridden per split.
    pub scene: SceneSpec,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Test images per held-out domain.
    pub n_test: usize,
    pub train_domain: u32,
    pub test_domains: Vec<u32>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            n_labeled: 200,
            n_unlabeled: 400,
            n_test: 100,
            train_domain: 0,
            test_domains: vec![1],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub id: usize,
    pub seed: u64,
    pub sample: DepthSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledItem {
    pub id: usize,
    pub seed: u64,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSplit {
    pub domain: u32,
    pub items: Vec<LabeledItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
    pub test: Vec<TestSplit>,
}

/// Seed of item `index` in a split; test seeds also depend on the domain.
pub fn item_seed(master: u64, split: Split, domain: u32, index: usize) -> u64 {
    let stream = match split {
        Split::Labeled => "labeled".to_string(),
        Split::Unlabeled => "unlabeled".to_string(),
        Split::Test => format!("test-{domain}"),
    };
    derive_seed(master, &stream, index as u64)
}

fn sample_at(config: &DataConfig, domain: u32, seed: u64) -> Result<DepthSample> {
    let spec = SceneSpec {
        domain,
        seed,
        ..config.scene.clone()
    };
    generate_sample(&spec, &mut SeededRng::seed_from_u64(seed))
}

pub fn generate_datasets(config: &DataConfig, exec: Exec) -> Result<Datasets> {
    config.scene.validate()?;
    let mut seen = HashSet::new();
    let mut claim = |s: u64| -> Result<u64> {
        if seen.insert(s) {
            Ok(s)
        } else {
            Err(Error::Config(format!("seed collision on {s}")))
        }
    };
    let labeled_seeds: Vec<u64> = (0..config.n_labeled)
        .map(|i| claim(item_seed(config.seed, Split::Labeled, 0, i)))
        .collect::<Result<_>>()?;
    let unlabeled_seeds: Vec<u64> = (0..config.n_unlabeled)
        .map(|i| claim(item_seed(config.seed, Split::Unlabeled, 0, i)))
        .collect::<Result<_>>()?;
    let mut test_seeds = Vec::new();
    for &d in &config.test_domains {
        let seeds: Vec<u64> = (0..config.n_test)
            .map(|i| claim(item_seed(config.seed, Split::Test, d, i)))
            .collect::<Result<_>>()?;
        test_seeds.push((d, seeds));
    }

    let train = config.train_domain;
    let labeled = exec
        .map_range(labeled_seeds.len(), |i| {
            let seed = labeled_seeds[i];
            sample_at(config, train, seed).map(|sample| LabeledItem { id: i, seed, sample })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = exec
        .map_range(unlabeled_seeds.len(), |i| {
            let seed = unlabeled_seeds[i];
            sample_at(config, train, seed).map(|s| UnlabeledItem {
                id: i,
                seed,
                image: s.image,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut test = Vec::new();
    for (domain, seeds) in test_seeds {
        let items = exec
            .map_range(seeds.len(), |i| {
                let seed = seeds[i];
                sample_at(config, domain, seed).map(|sample| LabeledItem { id: i, seed, sample })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        test.push(TestSplit { domain, items });
    }
    Ok(Datasets {
        labeled,
        unlabeled,
        test,
    })
}

/// Mean absolute finite-difference gradient of the luminance.
pub fn mean_gradient_magnitude(image: &Tensor) -> Result<f64> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape("expected RGB".into()));
    }
    let d = image.data();
    let lum = |i: usize| 0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i];
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                acc += (lum(i + 1) - lum(i)).abs();
                n += 1;
            }
            if y + 1 < h {
                acc += (lum(i + w) - lum(i)).abs();
                n += 1;
            }
        }
    }
    Ok(acc / n as f64)
}
