//! Training losses: affine-invariant regression, its CutMix variant for
//! pseudo-labeled images, and margin-gated feature alignment.
//!
//! Each loss has a tape form (`*_term`) used inside training graphs and a
//! standalone form returning a [`LossResult`] with the gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{median, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

/// Mean-absolute-deviation floor below which a map cannot be normalized.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Gradient with respect to the first (trainable) argument.
    pub grad: Tensor,
}

/// Zero-median, unit-MAD version of a map over its valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNormalized {
    /// Normalized values; invalid pixels hold 0.
    pub values: Tensor,
    /// Translation (median).
    pub t: f64,
    /// Scale (mean absolute deviation from the median).
    pub s: f64,
}

pub fn normalize_affine(d: &Tensor, valid: &Mask) -> Result<AffineNormalized> {
    if d.numel() != valid.len() {
        return Err(Error::Shape(format!(
            "map {:?} vs mask {}x{}",
            d.shape(),
            valid.height(),
            valid.width()
        )));
    }
    let idx = valid.indices();
    if idx.len() < 2 {
        return Err(Error::Degenerate(format!("{} valid pixels", idx.len())));
    }
    let picked: Vec<f64> = idx.iter().map(|&i| d.data()[i]).collect();
    let t = median(&picked).unwrap_or_default();
    let s = picked.iter().map(|x| (x - t).abs()).sum::<f64>() / picked.len() as f64;
    if s < DEGENERATE_EPS {
        return Err(Error::Degenerate(format!("scale {s:e}")));
    }
    let mut values = Tensor::zeros(d.shape());
    for &i in &idx {
        values.data_mut()[i] = (d.data()[i] - t) / s;
    }
    Ok(AffineNormalized { values, t, s })
}

/// Tape version of the normalization for a 1-D vector of selected pixels.
pub fn normalize_affine_var(tape: &mut Tape, v: Var) -> Result<Var> {
    if tape.value(v).numel() < 2 {
        return Err(Error::Degenerate("fewer than 2 pixels".into()));
    }
    let t = tape.median_even_avg(v)?;
    let centered = tape.sub(v, t)?;
    let dev = tape.abs(centered);
    let s = tape.mean(dev)?;
    if tape.item(s) < DEGENERATE_EPS {
        return Err(Error::Degenerate(format!("scale {:e}", tape.item(s))));
    }
    tape.div(centered, s)
}

/// Mean over `pixels` of `|p̂ - ĝ|`, with prediction and target normalized
/// independently over those same pixels. `pred` is any node with one
/// element per pixel.
pub fn affine_invariant_on(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pixels: &[usize],
) -> Result<Var> {
    if tape.value(pred).numel() != target.numel() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.value(pred).shape(),
            target.shape()
        )));
    }
    let p = tape.gather(pred, pixels, &[pixels.len()])?;
    let g = tape.constant(Tensor::from_vec(
        pixels.iter().map(|&i| target.data()[i]).collect(),
    ));
    // Target first: its degeneracy is a property of the sample, not the model.
    let g_hat = normalize_affine_var(tape, g)?;
    let p_hat = normalize_affine_var(tape, p)?;
    let diff = tape.sub(p_hat, g_hat)?;
    let a = tape.abs(diff);
    tape.mean(a)
}

pub fn affine_invariant_term(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    valid: &Mask,
) -> Result<Var> {
    affine_invariant_on(tape, pred, target, &valid.indices())
}

pub fn affine_invariant_loss(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<LossResult> {
    standalone(pred, |tape, p| affine_invariant_term(tape, p, gt, valid))
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Binary CutMix mask `M`: true exactly inside `rect`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CutMixMask {
    pub mask: Mask,
    pub rect: Rect,
}

impl CutMixMask {
    /// The rectangle must be nonempty and inside the map. A rectangle
    /// covering the whole map is accepted and yields a single-region loss.
    pub fn from_rect(height: usize, width: usize, rect: Rect) -> Result<Self> {
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > height
            || rect.left + rect.width > width
        {
            return Err(Error::Shape(format!(
                "rectangle {rect:?} does not fit {height}x{width}"
            )));
        }
        let mask = Mask::from_fn(height, width, |y, x| {
            (rect.top..rect.top + rect.height).contains(&y)
                && (rect.left..rect.left + rect.width).contains(&x)
        });
        Ok(CutMixMask { mask, rect })
    }

    pub fn area(&self) -> usize {
        self.rect.height * self.rect.width
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CutMixTerm {
    pub loss: Var,
    /// A region was degenerate and the plain loss against the composed
    /// target was used instead.
    pub fell_back: bool,
}

/// Area-weighted sum of the affine-invariant losses inside `M` (against
/// `teacher_a`) and inside `1 - M` (against `teacher_b`). Each region is
/// normalized with its own statistics.
pub fn cutmix_unlabeled_term(
    tape: &mut Tape,
    student: Var,
    teacher_a: &Tensor,
    teacher_b: &Tensor,
    mask: &CutMixMask,
) -> Result<CutMixTerm> {
    let hw = mask.mask.len();
    if teacher_a.numel() != hw || teacher_b.numel() != hw || tape.value(student).numel() != hw {
        return Err(Error::Shape("cutmix maps must share the mask size".into()));
    }
    let inside = mask.mask.indices();
    let outside = mask.mask.not().indices();

    let regional = |tape: &mut Tape| -> Result<Var> {
        let mut parts = Vec::with_capacity(2);
        for (pixels, target) in [(&inside, teacher_a), (&outside, teacher_b)] {
            if pixels.is_empty() {
                continue;
            }
            let l = affine_invariant_on(tape, student, target, pixels)?;
            parts.push(tape.scale(l, pixels.len() as f64 / hw as f64));
        }
        match parts.as_slice() {
            [one] => Ok(*one),
            [a, b] => tape.add(*a, *b),
            _ => unreachable!("mask has at least one pixel"),
        }
    };
    match regional(tape) {
        Ok(loss) => Ok(CutMixTerm {
            loss,
            fell_back: false,
        }),
        Err(e) if e.is_degenerate() => {
            let composed = compose_targets(teacher_a, teacher_b, &mask.mask);
            let all: Vec<usize> = (0..hw).collect();
            let loss = affine_invariant_on(tape, student, &composed, &all)?;
            Ok(CutMixTerm {
                loss,
                fell_back: true,
            })
        }
        Err(e) => Err(e),
    }
}

/// `a ⊙ M + b ⊙ (1 - M)` for single-channel maps.
pub fn compose_targets(a: &Tensor, b: &Tensor, mask: &Mask) -> Tensor {
    let mut out = b.clone();
    for (i, &m) in mask.data().iter().enumerate() {
        if m {
            out.data_mut()[i] = a.data()[i];
        }
    }
    out
}

pub fn cutmix_unlabeled_loss(
    student: &Tensor,
    teacher_a: &Tensor,
    teacher_b: &Tensor,
    mask: &CutMixMask,
) -> Result<LossResult> {
    standalone(student, |tape, s| {
        Ok(cutmix_unlabeled_term(tape, s, teacher_a, teacher_b, mask)?.loss)
    })
}

/// Cosine-similarity threshold above which a location stops contributing to
/// the feature-alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ToleranceMargin(f64);

impl ToleranceMargin {
    pub const DEFAULT: f64 = 0.85;

    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(ToleranceMargin(alpha))
        } else {
            Err(Error::Config(format!("tolerance margin {alpha} not in (0, 1]")))
        }
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

impl Default for ToleranceMargin {
    fn default() -> Self {
        ToleranceMargin(Self::DEFAULT)
    }
}

impl TryFrom<f64> for ToleranceMargin {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ToleranceMargin> for f64 {
    fn from(m: ToleranceMargin) -> f64 {
        m.0
    }
}

/// `(1/G) Σ_i [cos_i ≤ α] (1 - cos_i)` over `G` feature rows. Rows whose
/// cosine exceeds `α` contribute 0 but still count in the denominator.
/// `frozen` is detached; no gradient reaches it.
pub fn feature_alignment_term(
    tape: &mut Tape,
    features: Var,
    frozen: Var,
    margin: ToleranceMargin,
) -> Result<Var> {
    let frozen = tape.detach(frozen);
    let cos = tape.cosine_rows(features, frozen)?;
    let g = tape.value(cos).numel();
    let gate = tape
        .value(cos)
        .map(|c| if c > margin.alpha() { 0.0 } else { 1.0 });
    let one_minus = {
        let n = tape.neg(cos);
        tape.add_scalar(n, 1.0)
    };
    let gate = tape.constant(gate);
    let kept = tape.mul(one_minus, gate)?;
    let total = tape.sum(kept);
    Ok(tape.scale(total, 1.0 / g as f64))
}

pub fn feature_alignment_loss(
    features: &Tensor,
    frozen: &Tensor,
    margin: ToleranceMargin,
) -> Result<LossResult> {
    standalone(features, |tape, f| {
        let fr = tape.constant(frozen.clone());
        feature_alignment_term(tape, f, fr, margin)
    })
}

/// Arithmetic mean of the present terms.
pub fn overall_loss(terms: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = terms.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn overall_loss_term(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let first = *terms
        .first()
        .ok_or_else(|| Error::Domain("no loss terms".into()))?;
    let mut acc = first;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

fn standalone(
    x: &Tensor,
    build: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<LossResult> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = build(&mut tape, leaf)?;
    let value = tape.item(out);
    let mut grads = tape.backward(out)?;
    let grad = grads.take(leaf).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok(LossResult { value, grad })
}
