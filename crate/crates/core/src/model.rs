//! Patch-MLP depth regressor, the frozen stand-in encoder, and AdamW.
//!
//! Encoder: patchify → linear(3P² → C) → relu → linear(C → C), giving a
//! feature grid of `(H/P)·(W/P)` rows. Decoder: per-patch linear(C → P²) →
//! sigmoid, reassembled into an H×W disparity map in `(0, 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::checkpoint;
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 8,
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.feature_dim == 0 {
            return Err(Error::Config("patch and feature_dim must be positive".into()));
        }
        Ok(())
    }

    fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    fn shapes(&self, with_decoder: bool) -> Vec<(&'static str, Vec<usize>)> {
        let (d, c, p2) = (self.patch_dim(), self.feature_dim, self.patch * self.patch);
        let mut s = vec![
            ("enc.w1", vec![d, c]),
            ("enc.b1", vec![1, c]),
            ("enc.w2", vec![c, c]),
            ("enc.b2", vec![1, c]),
        ];
        if with_decoder {
            s.push(("dec.w", vec![c, p2]));
            s.push(("dec.b", vec![1, p2]));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("dec.") {
        ParamGroup::Decoder
    } else {
        ParamGroup::Encoder
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    fn init_with(config: &ModelConfig, seed: u64, stream: &str, with_decoder: bool) -> Self {
        let mut rng = rng_for(seed, stream, 0);
        let shapes = config.shapes(with_decoder);
        let mut entries = Vec::with_capacity(shapes.len());
        let mut fan_in = 1;
        for (name, shape) in shapes {
            if name.contains(".w") {
                fan_in = shape[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
            entries.push((name.to_string(), t));
        }
        ParamSet { entries }
    }

    /// Fresh depth-model parameters. Each `stream` label gives an
    /// independent draw, which is how the student is re-initialized.
    pub fn init(config: &ModelConfig, seed: u64, stream: &str) -> Self {
        Self::init_with(config, seed, stream, true)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(checkpoint::encode(self)))
    }

    /// Puts every tensor on the tape, as leaves or constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Infers the model shape from parameter shapes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let w1 = self
            .get("enc.w1")
            .ok_or_else(|| Error::Format("missing enc.w1".into()))?;
        let (d, c) = w1.dims2()?;
        let patch = ((d / 3) as f64).sqrt().round() as usize;
        let cfg = ModelConfig {
            patch,
            feature_dim: c,
        };
        let expect = cfg.shapes(self.get("dec.w").is_some());
        if 3 * patch * patch != d || expect.len() != self.entries.len() {
            return Err(Error::Format("parameter set has unexpected layout".into()));
        }
        for ((name, shape), (n, t)) in expect.iter().zip(&self.entries) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {n} has shape {:?}, expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(cfg)
    }
}

/// `[G, 3P²]` matrix of flattened patches (channel, row, column order).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || h % patch != 0 || w % patch != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "image {:?} not divisible into {patch}x{patch} patches",
            image.shape()
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let d = 3 * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * d);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..3 {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let base = (ch * h + y) * w + px * patch;
                    out.extend_from_slice(&src[base..base + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, d], out)
}

/// For every pixel in row-major order, its flat index in the decoder's
/// `[G, P²]` output.
pub fn pixel_order(height: usize, width: usize, patch: usize) -> Vec<usize> {
    let gw = width / patch;
    let p2 = patch * patch;
    let mut idx = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let g = (y / patch) * gw + x / patch;
            idx.push(g * p2 + (y % patch) * patch + x % patch);
        }
    }
    idx
}

fn encode_on(tape: &mut Tape, vars: &[Var], image: &Tensor, patch: usize) -> Result<Var> {
    let x = tape.constant(patchify(image, patch)?);
    let h = tape.matmul(x, vars[0])?;
    let h = tape.add(h, vars[1])?;
    let h = tape.relu(h);
    let f = tape.matmul(h, vars[2])?;
    tape.add(f, vars[3])
}

/// Outputs of a forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[H, W]` disparity.
    pub disparity: Var,
    /// `[G, C]` encoder feature grid.
    pub features: Var,
}

/// Depth-model forward pass; `vars` come from [`ParamSet::to_tape`].
pub fn forward_on(tape: &mut Tape, vars: &[Var], image: &Tensor) -> Result<ForwardVars> {
    let (_, h, w) = image.dims3()?;
    let c = tape.value(vars[0]).shape()[1];
    let patch = (((tape.value(vars[0]).shape()[0]) / 3) as f64).sqrt().round() as usize;
    debug_assert_eq!(tape.value(vars[2]).shape(), &[c, c]);
    let features = encode_on(tape, vars, image, patch)?;
    let o = tape.matmul(features, vars[4])?;
    let o = tape.add(o, vars[5])?;
    let o = tape.sigmoid(o);
    let disparity = tape.gather(o, &pixel_order(h, w, patch), &[h, w])?;
    Ok(ForwardVars {
        disparity,
        features,
    })
}

/// Inference: `(disparity [H, W], features [G, C])`.
pub fn forward(params: &ParamSet, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let cfg = params.model_config()?;
    let (_, h, w) = image.dims3()?;
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch {}",
            cfg.patch
        )));
    }
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, false);
    let out = forward_on(&mut tape, &vars, image)?;
    Ok((
        tape.value(out.disparity).clone(),
        tape.value(out.features).clone(),
    ))
}

/// Randomly initialized encoder whose parameters never change.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    params: ParamSet,
    patch: usize,
}

impl FrozenEncoder {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        FrozenEncoder {
            params: ParamSet::init_with(config, seed, "frozen-encoder", false),
            patch: config.patch,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// `[G, C]` features; computed outside any training tape.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.to_tape(&mut tape, false);
        let f = encode_on(&mut tape, &vars, image, self.patch)?;
        Ok(tape.value(f).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Encoder base learning rate.
    pub lr: f64,
    /// Decoder learning rate = `lr * decoder_lr_mult`.
    pub decoder_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            decoder_lr_mult: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linearly decaying learning rate, `lr(step) = lr0 * (1 - step / total)`.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub base: f64,
    pub decoder_mult: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize, group: ParamGroup) -> f64 {
        let frac = if self.total_steps == 0 {
            0.0
        } else {
            1.0 - step.min(self.total_steps) as f64 / self.total_steps as f64
        };
        let lr = self.base * frac;
        match group {
            ParamGroup::Encoder => lr,
            ParamGroup::Decoder => lr * self.decoder_mult,
        }
    }
}

/// AdamW with decoupled weight decay and per-parameter learning rates.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &OptimizerConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::Shape("one gradient and lr per parameter".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.tensors_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let lr = lrs[k];
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * self.weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_coords;
    use crate::losses::affine_invariant_term;
    use crate::tensor::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            patch: 4,
            feature_dim: 6,
        }
    }

    #[test]
    fn zero_model_outputs_half() {
        let p = ParamSet::init(&small(), 1, "m");
        let zeroed = ParamSet::new(
            p.entries()
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        );
        let (d, f) = forward(&zeroed, &Tensor::zeros(&[3, 8, 8])).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.5));
        assert_eq!(f.shape(), &[4, 6]);
    }

    #[test]
    fn output_in_open_unit_interval() {
        let p = ParamSet::init(&small(), 2, "m");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(&[3, 8, 12], |_| rng.gen());
        let (d, _) = forward(&p, &img).unwrap();
        assert_eq!(d.shape(), &[8, 12]);
        assert!(d.data().iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(forward(&p, &Tensor::zeros(&[3, 6, 8])).is_err());
    }

    #[test]
    fn patchify_and_pixel_order_agree() {
        // Disparity pixel (y, x) must come from the patch containing it.
        let img = Tensor::from_fn(&[3, 4, 6], |i| i as f64);
        let x = patchify(&img, 2).unwrap();
        assert_eq!(x.shape(), &[6, 12]);
        // patch (0,1), channel 0, row 1, col 0 → pixel (1, 2)
        assert_eq!(x.data()[12 + 2], img.data()[6 + 2]);
        let order = pixel_order(4, 6, 2);
        assert_eq!(order[6 + 2], 4 + 2);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn init_streams_differ_and_repeat() {
        let cfg = ModelConfig::default();
        let a = ParamSet::init(&cfg, 5, "teacher");
        let b = ParamSet::init(&cfg, 5, "student");
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a, ParamSet::init(&cfg, 5, "teacher"));
        assert_eq!(a.model_config().unwrap(), cfg);
        let w1 = a.get("enc.w1").unwrap();
        let bound = 1.0 / (3.0f64 * 64.0).sqrt();
        assert!(w1.data().iter().all(|x| x.abs() < bound));
    }

    #[test]
    fn frozen_encoder_is_deterministic() {
        let enc = FrozenEncoder::new(&small(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::from_fn(&[3, 8, 8], |_| rng.gen());
        assert_eq!(enc.forward(&img).unwrap(), enc.forward(&img).unwrap());
        assert_eq!(enc.params().len(), 4);
    }

    #[test]
    fn adamw_cases() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut p = ParamSet::new(vec![("w".into(), Tensor::scalar(1.0))]);
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &[Tensor::scalar(0.0)], &[0.1]).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.0);

        let mut p = ParamSet::new(vec![("w".into(), Tensor::scalar(1.0))]);
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &[Tensor::scalar(1.0)], &[0.1]).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-8);

        let cfg = OptimizerConfig {
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut p = ParamSet::new(vec![("w".into(), Tensor::scalar(2.0))]);
        let mut opt = AdamW::new(&p, &cfg);
        opt.step(&mut p, &[Tensor::scalar(0.0)], &[0.1]).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn schedule_ratio_and_decay() {
        let s = LinearSchedule {
            base: 1e-3,
            decoder_mult: 10.0,
            total_steps: 7,
        };
        for step in 0..7 {
            let e = s.lr(step, ParamGroup::Encoder);
            let d = s.lr(step, ParamGroup::Decoder);
            assert!(e > 0.0);
            assert!((d / e - 10.0).abs() < 1e-12);
            assert!((e - 1e-3 * (1.0 - step as f64 / 7.0)).abs() < 1e-18);
        }
        assert_eq!(s.lr(7, ParamGroup::Encoder), 0.0);
        assert_eq!(param_group("dec.w"), ParamGroup::Decoder);
        assert_eq!(param_group("enc.b2"), ParamGroup::Encoder);
    }

    #[test]
    fn loss_through_model_gradcheck() {
        let cfg = ModelConfig {
            patch: 8,
            feature_dim: 8,
        };
        let params = ParamSet::init(&cfg, 21, "gc");
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.gen());
        let target = Tensor::from_fn(&[16, 16], |_| rng.gen());
        let valid = Mask::full(16, 16, true);
        for k in 0..params.len() {
            let x = params.entries()[k].1.clone();
            let coords: Vec<usize> = (0..x.numel()).step_by(7).take(12).collect();
            let err = gradcheck_coords(
                |tape, leaf| {
                    let mut vars = params.to_tape(tape, false);
                    vars[k] = leaf;
                    let out = forward_on(tape, &vars, &img)?;
                    affine_invariant_term(tape, out.disparity, &target, &valid)
                },
                &x,
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-6, "{}: {err}", params.entries()[k].0);
        }
    }
}
