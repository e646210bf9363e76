//! Finite-difference checks of every training loss, alone and composed
//! with the model, at randomly drawn inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, gradcheck_coords, median, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    affine_invariant_term, cutmix_unlabeled_term, feature_alignment_term, overall_loss_term, CutMixMask, Rect,
    ToleranceMargin,
};
use crate::model::{forward, forward_on, param_group, FrozenEncoder, ModelConfig, ParamGroup, ParamSet};
use crate::rng::{rng_for, Rng as DfRng};
use crate::tensor::{Mask, Tensor};

pub const EPS: f64 = 1e-5;
pub const THRESHOLD: f64 = 1e-6;
pub const POINTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub name: String,
    pub points: usize,
    /// Worst `|analytic - numeric| / max(1, |numeric|)` over points and
    /// coordinates.
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

fn result(name: &str, errors: &[f64]) -> GradcheckResult {
    let max_error = errors.iter().fold(0.0f64, |a, &b| a.max(b));
    GradcheckResult {
        name: name.to_string(),
        points: errors.len(),
        max_error,
        threshold: THRESHOLD,
        passed: max_error.is_finite() && max_error < THRESHOLD,
    }
}

fn uniform(rng: &mut DfRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Points closer than this (in normalized units) to a kink of the
/// affine-invariant loss are redrawn: a central difference straddling a
/// median switch or a zero of `|p - g|` measures a one-sided slope.
pub const MIN_KINK_DISTANCE: f64 = 1e-3;
const MAX_DRAWS: usize = 1000;

/// Distance of `pred` from the nearest nondifferentiable point of the
/// affine-invariant loss against `target` over `pixels`.
fn kink_distance(pred: &[f64], target: &[f64], pixels: &[usize]) -> f64 {
    let x: Vec<f64> = pixels.iter().map(|&i| pred[i]).collect();
    let g: Vec<f64> = pixels.iter().map(|&i| target[i]).collect();
    let stats = |v: &[f64]| {
        let t = median(v).unwrap_or(0.0);
        let s = v.iter().map(|a| (a - t).abs()).sum::<f64>() / v.len() as f64;
        (t, s)
    };
    let (t, s) = stats(&x);
    let (tg, sg) = stats(&g);
    if s <= 0.0 || sg <= 0.0 {
        return 0.0;
    }
    // Only swaps next to the median change which samples it picks.
    let mut sorted = x.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let lo = mid.saturating_sub(2);
    let hi = (mid + 2).min(sorted.len() - 1);
    let gap = sorted[lo..=hi]
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let residual = x
        .iter()
        .zip(&g)
        .map(|(a, b)| ((a - t) / s - (b - tg) / sg).abs())
        .fold(f64::INFINITY, f64::min);
    (gap / s).min(residual)
}

fn all_pixels(n: usize) -> Vec<usize> {
    (0..n).collect()
}

const H: usize = 8;
const W: usize = 8;

fn random_rect(rng: &mut DfRng) -> Rect {
    let height = rng.gen_range(2..H - 1);
    let width = rng.gen_range(2..W - 1);
    Rect {
        top: rng.gen_range(0..=H - height),
        left: rng.gen_range(0..=W - width),
        height,
        width,
    }
}

/// Redraws until the sample is at least [`MIN_KINK_DISTANCE`] from a kink.
fn draw_generic<T>(mut draw: impl FnMut() -> (T, f64)) -> Result<T> {
    for _ in 0..MAX_DRAWS {
        let (v, d) = draw();
        if d >= MIN_KINK_DISTANCE {
            return Ok(v);
        }
    }
    Err(Error::Domain("no generic gradcheck point found".into()))
}

fn check_labeled(seed: u64) -> Result<GradcheckResult> {
    let mut errs = Vec::with_capacity(POINTS);
    for p in 0..POINTS {
        let mut rng = rng_for(seed, "gc-labeled", p as u64);
        let (pred, target, valid) = draw_generic(|| {
            let pred = uniform(&mut rng, &[H, W], 0.0, 1.0);
            let target = uniform(&mut rng, &[H, W], 0.0, 1.0);
            let valid = Mask::from_fn(H, W, |_, _| rng.gen_bool(0.8));
            let d = kink_distance(pred.data(), target.data(), &valid.indices());
            ((pred, target, valid), d)
        })?;
        errs.push(gradcheck(
            |tape, x| affine_invariant_term(tape, x, &target, &valid),
            &pred,
            EPS,
        )?);
    }
    Ok(result("labeled_affine_invariant", &errs))
}

fn check_cutmix(seed: u64, full: bool) -> Result<GradcheckResult> {
    let mut errs = Vec::with_capacity(POINTS);
    for p in 0..POINTS {
        let mut rng = rng_for(seed, "gc-cutmix", p as u64);
        let rect = if full {
            Rect {
                top: 0,
                left: 0,
                height: H,
                width: W,
            }
        } else {
            random_rect(&mut rng)
        };
        let mask = CutMixMask::from_rect(H, W, rect)?;
        let inside = mask.mask.indices();
        let outside = mask.mask.not().indices();
        let (student, a, b) = draw_generic(|| {
            let student = uniform(&mut rng, &[H, W], 0.0, 1.0);
            let a = uniform(&mut rng, &[H, W], 0.0, 1.0);
            let b = uniform(&mut rng, &[H, W], 0.0, 1.0);
            let mut d = kink_distance(student.data(), a.data(), &inside);
            if !outside.is_empty() {
                d = d.min(kink_distance(student.data(), b.data(), &outside));
            }
            ((student, a, b), d)
        })?;
        errs.push(gradcheck(
            |tape, x| Ok(cutmix_unlabeled_term(tape, x, &a, &b, &mask)?.loss),
            &student,
            EPS,
        )?);
    }
    Ok(result(if full { "unlabeled_full_mask" } else { "unlabeled_cutmix" }, &errs))
}

fn check_feat(seed: u64) -> Result<GradcheckResult> {
    let margin = ToleranceMargin::default();
    let mut errs = Vec::with_capacity(POINTS);
    for p in 0..POINTS {
        let mut rng = rng_for(seed, "gc-feat", p as u64);
        let features = uniform(&mut rng, &[6, 5], -1.0, 1.0);
        // Half the rows sit close to the student's so both sides of the
        // margin are exercised.
        let mut frozen = uniform(&mut rng, &[6, 5], -1.0, 1.0);
        for r in 0..3 {
            for c in 0..5 {
                frozen.data_mut()[r * 5 + c] = features.data()[r * 5 + c] + rng.gen_range(-0.05..0.05);
            }
        }
        errs.push(gradcheck(
            |tape, x| {
                let f = tape.constant(frozen.clone());
                feature_alignment_term(tape, x, f, margin)
            },
            &features,
            EPS,
        )?);
    }
    Ok(result("feature_alignment", &errs))
}

/// Mean of the labeled loss on the model's disparity and the feature loss
/// on its features, differentiated with respect to one parameter group.
fn check_model(seed: u64, group: ParamGroup) -> Result<GradcheckResult> {
    let cfg = ModelConfig {
        patch: 8,
        feature_dim: 8,
    };
    let (h, w) = (16, 16);
    let frozen = FrozenEncoder::new(&cfg, seed ^ 0x5EED);
    let mut errs = Vec::new();
    for p in 0..POINTS {
        let mut rng = rng_for(seed, "gc-model", p as u64);
        let (params, image, target) = draw_generic(|| {
            let params = ParamSet::init(&cfg, rng.gen(), "gc-model");
            let image = uniform(&mut rng, &[3, h, w], 0.0, 1.0);
            let target = uniform(&mut rng, &[h, w], 0.0, 1.0);
            let d = match forward(&params, &image) {
                Ok((disp, _)) => kink_distance(disp.data(), target.data(), &all_pixels(h * w)),
                Err(_) => 0.0,
            };
            ((params, image, target), d)
        })?;
        let valid = Mask::full(h, w, true);
        let frozen_feats = frozen.forward(&image)?;
        for (k, (name, x)) in params.entries().iter().enumerate() {
            if param_group(name) != group {
                continue;
            }
            let coords: Vec<usize> = (0..6).map(|_| rng.gen_range(0..x.numel())).collect();
            let build = |tape: &mut Tape, leaf: Var| {
                let mut vars = params.to_tape(tape, false);
                vars[k] = leaf;
                let out = forward_on(tape, &vars, &image)?;
                let l = affine_invariant_term(tape, out.disparity, &target, &valid)?;
                let fr = tape.constant(frozen_feats.clone());
                let f = feature_alignment_term(tape, out.features, fr, ToleranceMargin::default())?;
                overall_loss_term(tape, &[l, f])
            };
            errs.push(gradcheck_coords(build, x, EPS, &coords)?);
        }
    }
    let name = match group {
        ParamGroup::Encoder => "model_encoder",
        ParamGroup::Decoder => "model_decoder",
    };
    let mut r = result(name, &errs);
    r.points = POINTS;
    Ok(r)
}

/// Runs every check. All inputs derive from `seed`.
pub fn run_gradcheck_suite(seed: u64) -> Result<Vec<GradcheckResult>> {
    Ok(vec![
        check_labeled(seed)?,
        check_cutmix(seed, false)?,
        check_cutmix(seed, true)?,
        check_feat(seed)?,
        check_model(seed, ParamGroup::Encoder)?,
        check_model(seed, ParamGroup::Decoder)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let results = run_gradcheck_suite(3).unwrap();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.max_error);
            assert_eq!(r.points, POINTS);
        }
    }
}
