//! Dense tensors, boolean masks and the depth/disparity map types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degenerate disparity range threshold for min-max normalization.
pub const DISPARITY_RANGE_EPS: f64 = 1e-12;

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected 2-D tensor, got {s:?}"))),
        }
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::Shape(format!("expected 3-D tensor, got {s:?}"))),
        }
    }

    /// Plain matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Rounds every element to `f32` precision.
    pub fn round_f32(&self) -> Tensor {
        self.map(|x| x as f32 as f64)
    }
}

/// `out += a[m,k] * b[k,n]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Boolean H×W mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Flat indices of true entries, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| {
            self.get(y, self.width - 1 - x)
        })
    }

    /// 1.0 for true, 0.0 for false, shaped H×W.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&b| f64::from(u8::from(b))).collect(),
        }
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Depth (distance) map with its valid mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub values: Tensor,
    pub valid: Mask,
}

impl DepthMap {
    pub fn new(values: Tensor, valid: Mask) -> Result<Self> {
        let (h, w) = values.dims2()?;
        if (h, w) != (valid.height(), valid.width()) {
            return Err(Error::Shape("depth values and valid mask differ".into()));
        }
        for (&v, &ok) in values.data().iter().zip(valid.data()) {
            if ok && !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("valid depth must be positive, got {v}")));
            }
        }
        Ok(DepthMap { values, valid })
    }

    pub fn height(&self) -> usize {
        self.valid.height()
    }

    pub fn width(&self) -> usize {
        self.valid.width()
    }
}

/// Normalized disparity in `[0, 1]` on valid pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityMap {
    pub values: Tensor,
    pub valid: Mask,
}

/// Labeled training unit: RGB image in `[0,1]`, depth, optional sky mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSample {
    pub image: Tensor,
    pub depth: DepthMap,
    pub sky: Option<Mask>,
}

impl DepthSample {
    pub fn new(image: Tensor, depth: DepthMap, sky: Option<Mask>) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || (h, w) != (depth.height(), depth.width()) {
            return Err(Error::Shape(format!(
                "image {:?} does not match depth {}x{}",
                image.shape(),
                depth.height(),
                depth.width()
            )));
        }
        if let Some(sky) = &sky {
            if (sky.height(), sky.width()) != (h, w) {
                return Err(Error::Shape("sky mask size differs from image".into()));
            }
            if sky.data().iter().zip(depth.valid.data()).any(|(&s, &v)| s && !v) {
                return Err(Error::Domain("sky pixels must be marked valid".into()));
            }
        }
        Ok(DepthSample { image, depth, sky })
    }

    /// Training target: normalized disparity with sky forced to 0.
    pub fn disparity(&self) -> Result<DisparityMap> {
        depth_to_disparity(&self.depth, self.sky.as_ref())
    }
}

/// Where a pseudo-label came from. Targets are always produced from the
/// clean image; the flag is carried so consumers can assert it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_hash: String,
    pub clean_input: bool,
}

/// Unlabeled image plus the teacher's disparity prediction on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub image: Tensor,
    pub pseudo_disparity: DisparityMap,
    pub provenance: Provenance,
}

/// `d = 1/t` on valid non-sky pixels, min-max normalized to `[0,1]`; sky
/// pixels are set to 0 after normalization. A flat range maps to 0.5.
pub fn depth_to_disparity(depth: &DepthMap, sky: Option<&Mask>) -> Result<DisparityMap> {
    let (h, w) = depth.values.dims2()?;
    if let Some(sky) = sky {
        if (sky.height(), sky.width()) != (h, w) {
            return Err(Error::Shape("sky mask size differs from depth".into()));
        }
    }
    let is_sky = |i: usize| sky.is_some_and(|s| s.data()[i]);
    let t = depth.values.data();
    let valid = depth.valid.data();

    let mut raw = vec![0.0; h * w];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut any_valid = false;
    for i in 0..h * w {
        if !valid[i] {
            continue;
        }
        any_valid = true;
        if t[i] <= 0.0 || !t[i].is_finite() {
            return Err(Error::Domain(format!(
                "valid depth must be positive, got {} at pixel {i}",
                t[i]
            )));
        }
        if is_sky(i) {
            continue;
        }
        raw[i] = 1.0 / t[i];
        lo = lo.min(raw[i]);
        hi = hi.max(raw[i]);
    }
    if !any_valid {
        return Err(Error::Domain("depth map has no valid pixels".into()));
    }

    let range = hi - lo;
    let mut out = vec![0.0; h * w];
    for i in 0..h * w {
        if !valid[i] || is_sky(i) {
            continue;
        }
        out[i] = if range < DISPARITY_RANGE_EPS {
            0.5
        } else {
            (raw[i] - lo) / range
        };
    }
    Ok(DisparityMap {
        values: Tensor::new(vec![h, w], out)?,
        valid: depth.valid.clone(),
    })
}

/// Statistics over the mask-true entries of a tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedStats {
    pub count: usize,
    /// `None` when `count == 0`.
    pub summary: Option<Summary>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn masked_stats(values: &Tensor, mask: &Mask) -> Result<MaskedStats> {
    if values.numel() != mask.len() {
        return Err(Error::Shape(format!(
            "values {:?} vs mask {}x{}",
            values.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let picked: Vec<f64> = values
        .data()
        .iter()
        .zip(mask.data())
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect();
    if picked.is_empty() {
        return Ok(MaskedStats {
            count: 0,
            summary: None,
        });
    }
    let min = picked.iter().copied().fold(f64::INFINITY, f64::min);
    let max = picked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = picked.iter().sum::<f64>() / picked.len() as f64;
    Ok(MaskedStats {
        count: picked.len(),
        summary: Some(Summary { min, max, mean }),
    })
}

/// Mirrors a C×H×W or H×W tensor along its last axis.
pub fn flip_tensor_horizontal(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w.max(1)) {
        row.reverse();
    }
    Tensor {
        shape: t.shape().to_vec(),
        data,
    }
}

pub fn horizontal_flip(sample: &DepthSample) -> DepthSample {
    DepthSample {
        image: flip_tensor_horizontal(&sample.image),
        depth: DepthMap {
            values: flip_tensor_horizontal(&sample.depth.values),
            valid: sample.depth.valid.flip_horizontal(),
        },
        sky: sample.sky.as_ref().map(Mask::flip_horizontal),
    }
}
