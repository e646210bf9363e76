//! Relative-depth evaluation: per-image scale/shift alignment in disparity
//! space, inversion to depth, and the standard metric suite.

use serde::{Deserialize, Serialize};

use crate::autodiff::median;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward, ParamSet};
use crate::synth::LabeledItem;
use crate::tensor::{DepthMap, Mask, Tensor};

/// Floor applied to aligned disparity before inverting to depth.
pub const DISPARITY_CLAMP: f64 = 1e-6;

/// `aligned = scale * pred + shift`, in disparity space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
    /// The least-squares system was singular and a median-ratio fit was used.
    pub degenerate: bool,
}

impl Alignment {
    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.shift
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMethod {
    #[default]
    LeastSquares,
    /// Match median and mean absolute deviation of prediction to target.
    MedianMad,
}

fn picked(t: &Tensor, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| t.data()[i]).collect()
}

fn check(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<Vec<usize>> {
    if pred.numel() != gt.numel() || pred.numel() != valid.len() {
        return Err(Error::Shape(format!(
            "pred {:?}, gt {:?}, mask {}x{}",
            pred.shape(),
            gt.shape(),
            valid.height(),
            valid.width()
        )));
    }
    let idx = valid.indices();
    if idx.is_empty() {
        return Err(Error::Domain("no valid pixels".into()));
    }
    Ok(idx)
}

fn median_ratio(p: &[f64], g: &[f64]) -> Alignment {
    let (mp, mg) = (median(p).unwrap_or(0.0), median(g).unwrap_or(0.0));
    if mp != 0.0 {
        Alignment {
            scale: mg / mp,
            shift: 0.0,
            degenerate: true,
        }
    } else {
        Alignment {
            scale: 1.0,
            shift: mg,
            degenerate: true,
        }
    }
}

/// Closed-form `argmin_{s,t} Σ (s p_i + t - g_i)²` over valid pixels.
pub fn align_least_squares(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<Alignment> {
    let idx = check(pred, gt, valid)?;
    let (p, g) = (picked(pred, &idx), picked(gt, &idx));
    let n = p.len() as f64;
    let pm = p.iter().sum::<f64>() / n;
    let gm = g.iter().sum::<f64>() / n;
    let (mut spp, mut spg) = (0.0, 0.0);
    for (pi, gi) in p.iter().zip(&g) {
        spp += (pi - pm) * (pi - pm);
        spg += (pi - pm) * (gi - gm);
    }
    let floor = f64::EPSILON * n * pm.abs().max(1.0).powi(2);
    if p.len() < 2 || spp <= floor {
        return Ok(median_ratio(&p, &g));
    }
    let scale = spg / spp;
    Ok(Alignment {
        scale,
        shift: gm - scale * pm,
        degenerate: false,
    })
}

pub fn align_median_mad(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<Alignment> {
    let idx = check(pred, gt, valid)?;
    let (p, g) = (picked(pred, &idx), picked(gt, &idx));
    let (tp, tg) = (median(&p).unwrap_or(0.0), median(&g).unwrap_or(0.0));
    let mad = |v: &[f64], t: f64| v.iter().map(|x| (x - t).abs()).sum::<f64>() / v.len() as f64;
    let (sp, sg) = (mad(&p, tp), mad(&g, tg));
    if sp < crate::losses::DEGENERATE_EPS {
        return Ok(median_ratio(&p, &g));
    }
    let scale = sg / sp;
    Ok(Alignment {
        scale,
        shift: tg - scale * tp,
        degenerate: false,
    })
}

pub fn align(method: AlignMethod, pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<Alignment> {
    match method {
        AlignMethod::LeastSquares => align_least_squares(pred, gt, valid),
        AlignMethod::MedianMad => align_median_mad(pred, gt, valid),
    }
}

/// Metrics of one image, computed in depth space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub absrel: f64,
    #[serde(rename = "d1")]
    pub delta1: f64,
    #[serde(rename = "d2")]
    pub delta2: f64,
    #[serde(rename = "d3")]
    pub delta3: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub n_pixels: usize,
}

/// Metrics between predicted and ground-truth depth over valid pixels.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<ImageMetrics> {
    let idx = check(pred, gt, valid)?;
    let n = idx.len() as f64;
    let mut m = ImageMetrics {
        absrel: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        log10: 0.0,
        n_pixels: idx.len(),
    };
    let (t1, t2, t3) = (1.25, 1.25f64.powi(2), 1.25f64.powi(3));
    for &i in &idx {
        let (p, g) = (pred.data()[i], gt.data()[i]);
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Domain(format!("nonpositive depth at pixel {i}")));
        }
        m.absrel += (p - g).abs() / g;
        let ratio = (p / g).max(g / p);
        m.delta1 += f64::from(u8::from(ratio < t1));
        m.delta2 += f64::from(u8::from(ratio < t2));
        m.delta3 += f64::from(u8::from(ratio < t3));
        m.rmse += (p - g) * (p - g);
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        m.log10 += (p.log10() - g.log10()).abs();
    }
    m.absrel /= n;
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.log10 /= n;
    Ok(m)
}

/// Aligns a predicted disparity to `1/gt`, inverts it to depth and scores it.
pub fn compute_metrics(
    pred_disparity: &Tensor,
    gt: &DepthMap,
    valid: &Mask,
    method: AlignMethod,
) -> Result<(ImageMetrics, Alignment)> {
    let eval_mask = valid.and(&gt.valid)?;
    let gt_disp = gt.values.map(|t| if t > 0.0 { 1.0 / t } else { 0.0 });
    let a = align(method, pred_disparity, &gt_disp, &eval_mask)?;
    let pred_depth = pred_disparity.map(|p| 1.0 / a.apply(p).max(DISPARITY_CLAMP));
    Ok((depth_metrics(&pred_depth, &gt.values, &eval_mask)?, a))
}

/// Dataset-level metrics: per-image values averaged with equal weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub absrel: f64,
    #[serde(rename = "d1")]
    pub delta1: f64,
    #[serde(rename = "d2")]
    pub delta2: f64,
    #[serde(rename = "d3")]
    pub delta3: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub n_pixels: usize,
    pub n_images: usize,
    pub alignments: Vec<Alignment>,
}

impl MetricReport {
    pub const CSV_COLUMNS: [&'static str; 7] =
        ["absrel", "d1", "d2", "d3", "rmse", "rmse_log", "log10"];

    /// Reduces in slice order so the result does not depend on scheduling.
    pub fn aggregate(images: &[(ImageMetrics, Alignment)]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Domain("no images to aggregate".into()));
        }
        let n = images.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(|(m, _)| f(m)).sum::<f64>() / n;
        Ok(MetricReport {
            absrel: mean(|m| m.absrel),
            delta1: mean(|m| m.delta1),
            delta2: mean(|m| m.delta2),
            delta3: mean(|m| m.delta3),
            rmse: mean(|m| m.rmse),
            rmse_log: mean(|m| m.rmse_log),
            log10: mean(|m| m.log10),
            n_pixels: images.iter().map(|(m, _)| m.n_pixels).sum(),
            n_images: images.len(),
            alignments: images.iter().map(|(_, a)| *a).collect(),
        })
    }

    pub fn csv_values(&self) -> [f64; 7] {
        [
            self.absrel,
            self.delta1,
            self.delta2,
            self.delta3,
            self.rmse,
            self.rmse_log,
            self.log10,
        ]
    }
}

/// Evaluation mask: valid, non-sky pixels.
pub fn eval_mask(item: &LabeledItem) -> Result<Mask> {
    match &item.sample.sky {
        Some(sky) => item.sample.depth.valid.and(&sky.not()),
        None => Ok(item.sample.depth.valid.clone()),
    }
}

/// Scores any disparity predictor over a test set.
pub fn evaluate_with<F>(items: &[LabeledItem], method: AlignMethod, exec: Exec, predict: F) -> Result<MetricReport>
where
    F: Fn(&LabeledItem) -> Result<Tensor> + Sync + Send,
{
    let per_image = exec
        .map(items, |item| {
            let pred = predict(item)?;
            compute_metrics(&pred, &item.sample.depth, &eval_mask(item)?, method)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    MetricReport::aggregate(&per_image)
}

pub fn evaluate_checkpoint(
    params: &ParamSet,
    items: &[LabeledItem],
    method: AlignMethod,
    exec: Exec,
) -> Result<MetricReport> {
    evaluate_with(items, method, exec, |item| {
        forward(params, &item.sample.image).map(|(d, _)| d)
    })
}
