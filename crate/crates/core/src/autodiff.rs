//! Minimal eager reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are only
//! appended, so node indices already form a topological order and the
//! backward pass is a single reverse sweep. Tapes are built per step (or per
//! sample) and dropped afterwards.
//!
//! Binary elementwise ops accept equal shapes, a single-element operand on
//! either side, or a `[1, C]` / `[C]` row broadcast onto an `[R, C]` lhs.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
    RhsRow,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(Binary, Var, Var, Bcast),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    /// Selected input positions and their weights.
    Median(Var, Vec<(usize, f64)>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    L2NormalizeRows(Var),
    CosineRows(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not depend on
/// any leaf.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn bcast_kind(op: &str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.numel() == 1 {
        Ok(Bcast::RhsScalar)
    } else if a.numel() == 1 {
        Ok(Bcast::LhsScalar)
    } else {
        match (a.shape(), b.shape()) {
            ([_, c], [1, c2]) | ([_, c], [c2]) if c == c2 => Ok(Bcast::RhsRow),
            _ => Err(shape_err(op, a.shape(), b.shape())),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Convenience for single-element nodes.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the value of `v` into a new constant; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = format!("{kind:?}").to_lowercase();
        let (av, bv) = (self.value(a), self.value(b));
        let bc = bcast_kind(&name, av, bv)?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Min => x.min(y),
            Binary::Max => x.max(y),
        };
        if matches!(kind, Binary::Div) && bv.data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let value = match bc {
            Bcast::Same => av.zip_map(bv, f)?,
            Bcast::RhsScalar => {
                let y = bv.item();
                av.map(|x| f(x, y))
            }
            Bcast::LhsScalar => {
                let x = av.item();
                bv.map(|y| f(x, y))
            }
            Bcast::RhsRow => {
                let c = bv.numel();
                let mut out = av.clone();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = f(*o, bv.data()[i % c]);
                }
                out
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(x.sum() / x.numel() as f64);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    /// Median over all elements. Even counts average the two middle order
    /// statistics and split the gradient between them.
    pub fn median_even_avg(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        if x.is_empty() {
            return Err(Error::Shape("median of empty tensor".into()));
        }
        let picks = median_picks(x);
        let value = picks.iter().map(|&(i, w)| w * x[i]).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(value), Op::Median(a, picks), rg))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail: Vec<usize> = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.ndim() == 0 || v.shape()[1..] != tail[..] {
                return Err(shape_err("concat", self.value(*first).shape(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let rows = *v.shape().first().unwrap_or(&0);
        if start > end || end > rows {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of {rows} rows"
            )));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, v.data()[start * inner..end * inner].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, start * inner), rg))
    }

    /// Picks flat elements of `a`; the result has shape `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of {}",
                v.numel()
            )));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, indices.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2()?;
        let mut out = v.data().to_vec();
        for row in 0..r {
            let x = &mut out[row * c..(row + 1) * c];
            let n = norm(x);
            if n == 0.0 {
                return Err(Error::Domain(format!("zero-norm row {row}")));
            }
            x.iter_mut().for_each(|e| *e /= n);
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2NormalizeRows(a), rg))
    }

    /// Row-wise cosine similarity of two `[R, C]` tensors, shape `[R]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("cosine_rows", av.shape(), bv.shape()));
        }
        let (r, c) = av.dims2()?;
        let mut out = Vec::with_capacity(r);
        for row in 0..r {
            let x = &av.data()[row * c..(row + 1) * c];
            let y = &bv.data()[row * c..(row + 1) * c];
            let (nx, ny) = (norm(x), norm(y));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::Domain(format!("zero-norm feature row {row}")));
            }
            out.push(dot(x, y) / (nx * ny));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(out), Op::CosineRows(a, b), rg))
    }

    /// Gradients of a single-element `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(kind, a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let out = &node.value;
                let n = g.numel();
                let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let x = match bc {
                        Bcast::LhsScalar => av.data()[0],
                        _ => av.data()[i],
                    };
                    let y = match bc {
                        Bcast::Same | Bcast::LhsScalar => bv.data()[i],
                        Bcast::RhsScalar => bv.data()[0],
                        Bcast::RhsRow => bv.data()[i % bv.numel()],
                    };
                    let gi = g.data()[i];
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (y, x),
                        Binary::Div => (1.0 / y, -out.data()[i] / y),
                        Binary::Min => {
                            if x <= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        Binary::Max => {
                            if x >= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    ga[i] = gi * da;
                    gb[i] = gi * db;
                }
                let reduce = |full: Vec<f64>, target: &Tensor| -> Tensor {
                    if full.len() == target.numel() {
                        return Tensor::new(target.shape().to_vec(), full).unwrap();
                    }
                    let m = target.numel();
                    let mut acc = vec![0.0; m];
                    for (i, v) in full.into_iter().enumerate() {
                        acc[i % m] += v;
                    }
                    Tensor::new(target.shape().to_vec(), acc).unwrap()
                };
                if self.rg(*a) {
                    accumulate(grads, *a, reduce(ga, av));
                }
                if self.rg(*b) {
                    accumulate(grads, *b, reduce(gb, bv));
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bt = bv.transpose2()?;
                    let mut out = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut out, m, n, k);
                    accumulate(grads, *a, Tensor::new(vec![m, k], out)?);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose2()?;
                    let mut out = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut out, k, m, n);
                    accumulate(grads, *b, Tensor::new(vec![k, n], out)?);
                }
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s))?;
                accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(val(*a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })?;
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let av = val(*a);
                accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::Mean(a) => {
                let av = val(*a);
                accumulate(
                    grads,
                    *a,
                    Tensor::full(av.shape(), g.item() / av.numel() as f64),
                );
            }
            Op::Median(a, picks) => {
                let mut d = Tensor::zeros(val(*a).shape());
                for &(i, w) in picks {
                    d.data_mut()[i] += w * g.item();
                }
                accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.numel();
                    if self.rg(p) {
                        let d = Tensor::new(
                            pv.shape().to_vec(),
                            g.data()[offset..offset + n].to_vec(),
                        )?;
                        accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::Slice(a, offset) => {
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[*offset..*offset + g.numel()].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::Gather(a, indices) => {
                let mut d = Tensor::zeros(val(*a).shape());
                for (&i, &gi) in indices.iter().zip(g.data()) {
                    d.data_mut()[i] += gi;
                }
                accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(val(*a).shape())?;
                accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows(a) => {
                let av = val(*a);
                let (r, c) = av.dims2()?;
                let y = node.value.data();
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let n = norm(&av.data()[s.clone()]);
                    let yg = dot(&y[s.clone()], &g.data()[s.clone()]);
                    for j in s {
                        d[j] = (g.data()[j] - y[j] * yg) / n;
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![r, c], d)?);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (r, c) = av.dims2()?;
                let (mut da, mut db) = (vec![0.0; r * c], vec![0.0; r * c]);
                for row in 0..r {
                    let s = row * c..(row + 1) * c;
                    let x = &av.data()[s.clone()];
                    let y = &bv.data()[s.clone()];
                    let (nx, ny) = (norm(x), norm(y));
                    let cos = node.value.data()[row];
                    let gi = g.data()[row];
                    for j in 0..c {
                        da[row * c + j] = gi * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        db[row * c + j] = gi * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new(vec![r, c], da)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::new(vec![r, c], db)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Positions and weights defining the median; ties broken by index so the
/// choice is deterministic.
fn median_picks(x: &[f64]) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    let n = x.len();
    if n % 2 == 1 {
        vec![(order[n / 2], 1.0)]
    } else {
        vec![(order[n / 2 - 1], 0.5), (order[n / 2], 0.5)]
    }
}

/// Plain (non-tape) median with the same even-count rule.
pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    Some(median_picks(x).iter().map(|&(i, w)| w * x[i]).sum())
}

/// Central finite-difference check of a scalar function's tape gradient.
///
/// `f` builds the function on a fresh tape from a leaf holding `x` and
/// returns the scalar output. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(f, x, eps, &coords)
}

/// [`gradcheck`] restricted to the given flat coordinates of `x`.
pub fn gradcheck_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |xp: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let l = t.leaf(xp);
        let r = f(&mut t, l)?;
        Ok(t.item(r))
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
