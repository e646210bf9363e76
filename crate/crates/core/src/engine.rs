//! Two-stage self-training: fit a teacher on labeled scenes, pseudo-label
//! the unlabeled set with clean forward passes, then train a freshly
//! initialized student on labeled and strongly perturbed pseudo-labeled
//! images with optional feature alignment to a frozen encoder.
//!
//! Within a step, per-sample forward/backward passes run on the [`Exec`]
//! and their gradients are summed in batch order, so results do not depend
//! on the thread count.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_checkpoint, AlignMethod, MetricReport};
use crate::exec::Exec;
use crate::losses::{
    affine_invariant_term, cutmix_unlabeled_term, feature_alignment_term, normalize_affine,
    CutMixMask, ToleranceMargin,
};
use crate::model::{
    forward, forward_on, param_group, AdamW, FrozenEncoder, LinearSchedule, ModelConfig,
    OptimizerConfig, ParamSet,
};
use crate::perturb::{color_distort, cutmix_images, sample_cutmix_mask, PerturbConfig};
use crate::rng::rng_for;
use crate::synth::{Datasets, LabeledItem, UnlabeledItem};
use crate::tensor::{flip_tensor_horizontal, DisparityMap, Mask, Provenance, PseudoSample, Tensor};

/// Which images receive the feature-alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatTarget {
    #[default]
    Unlabeled,
    Labeled,
    Both,
}

impl FeatTarget {
    fn unlabeled(self) -> bool {
        matches!(self, FeatTarget::Unlabeled | FeatTarget::Both)
    }

    fn labeled(self) -> bool {
        matches!(self, FeatTarget::Labeled | FeatTarget::Both)
    }
}

/// Image the frozen encoder sees for an unlabeled item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenInput {
    /// The same perturbed image the student sees.
    #[default]
    Perturbed,
    /// The image before color distortion (CutMix geometry still applied).
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub teacher_epochs: usize,
    pub teacher_batch_size: usize,
    /// Passes over the unlabeled set during joint training.
    pub unlabeled_sweeps: usize,
    /// Labeled : unlabeled items per joint batch.
    pub ratio: [usize; 2],
    /// Labeled items per joint batch; unlabeled items follow from `ratio`.
    pub labeled_per_batch: usize,
    pub optimizer: OptimizerConfig,
    pub perturb: PerturbConfig,
    pub alpha: ToleranceMargin,
    pub enable_unlabeled: bool,
    pub enable_strong_perturb: bool,
    pub enable_feat_align: bool,
    pub feat_target: FeatTarget,
    pub frozen_input: FrozenInput,
    pub model: ModelConfig,
    pub frozen_seed: u64,
    pub align: AlignMethod,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            teacher_epochs: 20,
            teacher_batch_size: 4,
            unlabeled_sweeps: 1,
            ratio: [1, 2],
            labeled_per_batch: 1,
            optimizer: OptimizerConfig::default(),
            perturb: PerturbConfig::default(),
            alpha: ToleranceMargin::default(),
            enable_unlabeled: true,
            enable_strong_perturb: true,
            enable_feat_align: true,
            feat_target: FeatTarget::Unlabeled,
            frozen_input: FrozenInput::Perturbed,
            model: ModelConfig::default(),
            frozen_seed: 0x0D15_EA5E,
            align: AlignMethod::LeastSquares,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let [rl, ru] = self.ratio;
        if rl == 0 || ru == 0 {
            return Err(Error::Config("ratio parts must be positive".into()));
        }
        if self.labeled_per_batch == 0 || !(self.labeled_per_batch * ru).is_multiple_of(rl) {
            return Err(Error::Config(format!(
                "labeled_per_batch {} does not give a whole unlabeled share at ratio {rl}:{ru}",
                self.labeled_per_batch
            )));
        }
        if self.teacher_batch_size == 0 {
            return Err(Error::Config("teacher_batch_size must be positive".into()));
        }
        self.perturb.validate()?;
        self.model.validate()
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.labeled_per_batch * self.ratio[1] / self.ratio[0]
    }

    fn schedule(&self, total_steps: usize) -> LinearSchedule {
        LinearSchedule {
            base: self.optimizer.lr,
            decoder_mult: self.optimizer.decoder_lr_mult,
            total_steps,
        }
    }
}

/// Supervision attached to one image in a batch.
enum Target {
    Plain { target: Tensor, valid: Mask },
    CutMix { a: Tensor, b: Tensor, mask: CutMixMask },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Labeled,
    Unlabeled,
}

struct Job {
    kind: Kind,
    image: Tensor,
    target: Target,
    /// Input for the frozen encoder when this item gets feature alignment.
    frozen_image: Option<Tensor>,
}

#[derive(Default)]
struct JobOutcome {
    main: Option<(f64, Vec<Tensor>)>,
    feat: Option<(f64, Vec<Tensor>)>,
    degenerate: bool,
    fell_back: bool,
}

fn grads_of(tape: &Tape, root: Var, vars: &[Var], params: &ParamSet) -> Result<Vec<Tensor>> {
    let mut g = tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(params.entries())
        .map(|(&v, (_, p))| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

fn run_job(params: &ParamSet, frozen: &FrozenEncoder, alpha: ToleranceMargin, job: &Job) -> Result<JobOutcome> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let out = forward_on(&mut tape, &vars, &job.image)?;
    let mut outcome = JobOutcome::default();

    let main = match &job.target {
        Target::Plain { target, valid } => affine_invariant_term(&mut tape, out.disparity, target, valid),
        Target::CutMix { a, b, mask } => cutmix_unlabeled_term(&mut tape, out.disparity, a, b, mask).map(|t| {
            outcome.fell_back = t.fell_back;
            t.loss
        }),
    };
    match main {
        Ok(root) => outcome.main = Some((tape.item(root), grads_of(&tape, root, &vars, params)?)),
        Err(e) if e.is_degenerate() => outcome.degenerate = true,
        Err(e) => return Err(e),
    }

    if let Some(img) = &job.frozen_image {
        let f_frozen = tape.constant(frozen.forward(img)?);
        let root = feature_alignment_term(&mut tape, out.features, f_frozen, alpha)?;
        outcome.feat = Some((tape.item(root), grads_of(&tape, root, &vars, params)?));
    }
    Ok(outcome)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub labeled: Option<f64>,
    pub unlabeled: Option<f64>,
    pub feat: Option<f64>,
    pub overall: Option<f64>,
}

/// Batch reduction: each term is averaged over the items carrying it, the
/// overall loss is the mean of the terms present. Summation runs in job
/// order.
fn reduce(jobs: &[Job], outcomes: &[JobOutcome], params: &ParamSet) -> (StepLosses, Option<Vec<Tensor>>) {
    let mut terms: [(f64, usize, Vec<Tensor>); 3] = std::array::from_fn(|_| (0.0, 0, params.zeros_like()));
    let mut add = |slot: usize, (v, g): &(f64, Vec<Tensor>)| {
        let t = &mut terms[slot];
        t.0 += v;
        t.1 += 1;
        for (acc, gi) in t.2.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    };
    for (job, o) in jobs.iter().zip(outcomes) {
        if let Some(m) = &o.main {
            add(if job.kind == Kind::Labeled { 0 } else { 1 }, m);
        }
        if let Some(f) = &o.feat {
            add(2, f);
        }
    }
    let mean = |t: &(f64, usize, Vec<Tensor>)| (t.1 > 0).then(|| t.0 / t.1 as f64);
    let losses = StepLosses {
        labeled: mean(&terms[0]),
        unlabeled: mean(&terms[1]),
        feat: mean(&terms[2]),
        overall: None,
    };
    let present: Vec<&(f64, usize, Vec<Tensor>)> = terms.iter().filter(|t| t.1 > 0).collect();
    if present.is_empty() {
        return (losses, None);
    }
    let k = present.len() as f64;
    let mut total = params.zeros_like();
    for t in &present {
        let w = 1.0 / (k * t.1 as f64);
        for (acc, g) in total.iter_mut().zip(&t.2) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += w * b;
            }
        }
    }
    let overall = present.iter().map(|t| t.0 / t.1 as f64).sum::<f64>() / k;
    (
        StepLosses {
            overall: Some(overall),
            ..losses
        },
        Some(total),
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub steps: usize,
    /// Optimizer updates actually applied.
    pub updates: usize,
    pub skipped_degenerate: usize,
    pub cutmix_items: usize,
    pub plain_unlabeled_items: usize,
    pub cutmix_fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub params: ParamSet,
    /// Teacher: mean loss per epoch. Student: overall loss per step.
    pub loss_curve: Vec<f64>,
    pub stats: StageStats,
}

struct Stepper<'a> {
    params: ParamSet,
    opt: AdamW,
    schedule: LinearSchedule,
    frozen: &'a FrozenEncoder,
    alpha: ToleranceMargin,
    exec: Exec,
    stats: StageStats,
}

impl Stepper<'_> {
    fn step(&mut self, jobs: &[Job]) -> Result<StepLosses> {
        let outcomes = self
            .exec
            .map(jobs, |job| run_job(&self.params, self.frozen, self.alpha, job))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for (job, o) in jobs.iter().zip(&outcomes) {
            self.stats.skipped_degenerate += usize::from(o.degenerate);
            self.stats.cutmix_fallbacks += usize::from(o.fell_back);
            if job.kind == Kind::Unlabeled {
                match job.target {
                    Target::CutMix { .. } => self.stats.cutmix_items += 1,
                    Target::Plain { .. } => self.stats.plain_unlabeled_items += 1,
                }
            }
        }
        let (losses, grads) = reduce(jobs, &outcomes, &self.params);
        if let Some(grads) = grads {
            let lrs: Vec<f64> = self
                .params
                .entries()
                .iter()
                .map(|(n, _)| self.schedule.lr(self.stats.steps, param_group(n)))
                .collect();
            self.opt.step(&mut self.params, &grads, &lrs)?;
            self.stats.updates += 1;
        }
        self.stats.steps += 1;
        Ok(losses)
    }
}

/// Disparity targets of a labeled set; fails only if every sample is
/// degenerate.
fn labeled_targets(labeled: &[LabeledItem]) -> Result<Vec<DisparityMap>> {
    let targets = labeled
        .iter()
        .map(|x| x.sample.disparity())
        .collect::<Result<Vec<_>>>()?;
    if targets
        .iter()
        .all(|t| normalize_affine(&t.values, &t.valid).is_err())
    {
        return Err(Error::Degenerate("every labeled sample is degenerate".into()));
    }
    Ok(targets)
}

fn labeled_job(item: &LabeledItem, target: &DisparityMap, flip: bool, with_feat: bool) -> Job {
    let (image, t, valid) = if flip {
        (
            flip_tensor_horizontal(&item.sample.image),
            flip_tensor_horizontal(&target.values),
            target.valid.flip_horizontal(),
        )
    } else {
        (item.sample.image.clone(), target.values.clone(), target.valid.clone())
    };
    Job {
        kind: Kind::Labeled,
        frozen_image: with_feat.then(|| image.clone()),
        image,
        target: Target::Plain { target: t, valid },
    }
}

/// Minimizes the labeled loss over shuffled, randomly flipped mini-batches.
pub fn train_teacher(labeled: &[LabeledItem], cfg: &RunConfig, exec: Exec) -> Result<StageOutput> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Domain("teacher needs labeled samples".into()));
    }
    let targets = labeled_targets(labeled)?;
    let params = ParamSet::init(&cfg.model, cfg.seed, "teacher-init");
    let bs = cfg.teacher_batch_size;
    let per_epoch = labeled.len().div_ceil(bs);
    // Only used for its type; the teacher never computes feature alignment.
    let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
    let mut st = Stepper {
        opt: AdamW::new(&params, &cfg.optimizer),
        params,
        schedule: cfg.schedule(per_epoch * cfg.teacher_epochs),
        frozen: &frozen,
        alpha: cfg.alpha,
        exec,
        stats: StageStats::default(),
    };
    let mut curve = Vec::with_capacity(cfg.teacher_epochs);
    for epoch in 0..cfg.teacher_epochs {
        let mut rng = rng_for(cfg.seed, "teacher-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| rng.gen_bool(0.5)).collect();
        let (mut sum, mut n) = (0.0, 0usize);
        for (chunk, flip) in order.chunks(bs).zip(flips.chunks(bs)) {
            let jobs: Vec<Job> = chunk
                .iter()
                .zip(flip)
                .map(|(&i, &f)| labeled_job(&labeled[i], &targets[i], f, false))
                .collect();
            if let Some(l) = st.step(&jobs)?.labeled {
                sum += l;
                n += 1;
            }
        }
        curve.push(if n > 0 { sum / n as f64 } else { f64::NAN });
    }
    Ok(StageOutput {
        params: st.params,
        loss_curve: curve,
        stats: st.stats,
    })
}

/// One clean teacher forward pass per unlabeled image.
pub fn pseudo_label(teacher: &ParamSet, unlabeled: &[UnlabeledItem], exec: Exec) -> Result<Vec<PseudoSample>> {
    let teacher_hash = teacher.hash();
    exec.map(unlabeled, |item| {
        let (disp, _) = forward(teacher, &item.image)?;
        let (h, w) = disp.dims2()?;
        Ok(PseudoSample {
            image: item.image.clone(),
            pseudo_disparity: DisparityMap {
                values: disp,
                valid: Mask::full(h, w, true),
            },
            provenance: Provenance {
                teacher_hash: teacher_hash.clone(),
                clean_input: true,
            },
        })
    })
    .into_iter()
    .collect()
}

fn unlabeled_job(
    pseudo: &[PseudoSample],
    batch: &[usize],
    j: usize,
    cfg: &RunConfig,
    seed_index: u64,
    with_feat: bool,
) -> Result<Job> {
    let a = &pseudo[batch[j]];
    let frozen_of = |perturbed: &Tensor, clean: Tensor| match cfg.frozen_input {
        FrozenInput::Perturbed => perturbed.clone(),
        FrozenInput::Clean => clean,
    };
    if !cfg.enable_strong_perturb {
        return Ok(Job {
            kind: Kind::Unlabeled,
            frozen_image: with_feat.then(|| a.image.clone()),
            image: a.image.clone(),
            target: Target::Plain {
                target: a.pseudo_disparity.values.clone(),
                valid: a.pseudo_disparity.valid.clone(),
            },
        });
    }
    let mut rng = rng_for(cfg.seed, "student-unlabeled", seed_index);
    let pa = color_distort(&a.image, &cfg.perturb, &mut rng)?;
    let fire = batch.len() >= 2 && rng.gen_bool(cfg.perturb.cutmix_probability);
    if !fire {
        return Ok(Job {
            kind: Kind::Unlabeled,
            frozen_image: with_feat.then(|| frozen_of(&pa, a.image.clone())),
            image: pa,
            target: Target::Plain {
                target: a.pseudo_disparity.values.clone(),
                valid: a.pseudo_disparity.valid.clone(),
            },
        });
    }
    let partner = (j + 1 + rng.gen_range(0..batch.len() - 1)) % batch.len();
    let b = &pseudo[batch[partner]];
    let pb = color_distort(&b.image, &cfg.perturb, &mut rng)?;
    let (_, h, w) = pa.dims3()?;
    let mask = sample_cutmix_mask(h, w, &cfg.perturb, &mut rng)?;
    let mixed = cutmix_images(&pa, &pb, &mask.mask)?;
    let frozen_image = if with_feat {
        Some(match cfg.frozen_input {
            FrozenInput::Perturbed => mixed.clone(),
            FrozenInput::Clean => cutmix_images(&a.image, &b.image, &mask.mask)?,
        })
    } else {
        None
    };
    Ok(Job {
        kind: Kind::Unlabeled,
        image: mixed,
        frozen_image,
        target: Target::CutMix {
            a: a.pseudo_disparity.values.clone(),
            b: b.pseudo_disparity.values.clone(),
            mask,
        },
    })
}

/// Joint training of a re-initialized student on `labeled ∪ pseudo`.
///
/// The step count is fixed by the unlabeled sweep, `ceil(N_u / r_u)` per
/// sweep, whether or not unlabeled items are enabled; labeled items are
/// drawn with replacement. The last batch of a sweep wraps around so every
/// batch holds exactly `r_l` labeled and `r_u` unlabeled items.
pub fn train_student(
    labeled: &[LabeledItem],
    pseudo: &[PseudoSample],
    frozen: &FrozenEncoder,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<StageOutput> {
    cfg.validate()?;
    if labeled.is_empty() || pseudo.is_empty() {
        return Err(Error::Domain("student needs labeled and pseudo-labeled samples".into()));
    }
    if let Some(bad) = pseudo.iter().position(|p| !p.provenance.clean_input) {
        return Err(Error::Domain(format!(
            "pseudo-label {bad} was not computed from a clean image"
        )));
    }
    let targets = labeled_targets(labeled)?;
    let (rl, ru) = (cfg.labeled_per_batch, cfg.unlabeled_per_batch());
    let per_sweep = pseudo.len().div_ceil(ru);
    let total = per_sweep * cfg.unlabeled_sweeps;
    let feat_on = |kind: Kind| {
        cfg.enable_feat_align
            && match kind {
                Kind::Labeled => cfg.feat_target.labeled(),
                Kind::Unlabeled => cfg.feat_target.unlabeled(),
            }
    };

    let params = ParamSet::init(&cfg.model, cfg.seed, "student-init");
    let mut st = Stepper {
        opt: AdamW::new(&params, &cfg.optimizer),
        params,
        schedule: cfg.schedule(total),
        frozen,
        alpha: cfg.alpha,
        exec,
        stats: StageStats::default(),
    };
    let mut curve = Vec::with_capacity(total);
    for sweep in 0..cfg.unlabeled_sweeps {
        let mut order: Vec<usize> = (0..pseudo.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "student-sweep", sweep as u64));
        for k in 0..per_sweep {
            let step = (sweep * per_sweep + k) as u64;
            let mut rng = rng_for(cfg.seed, "student-labeled", step);
            let mut jobs: Vec<Job> = (0..rl)
                .map(|_| {
                    let i = rng.gen_range(0..labeled.len());
                    let flip = rng.gen_bool(0.5);
                    labeled_job(&labeled[i], &targets[i], flip, feat_on(Kind::Labeled))
                })
                .collect();
            if cfg.enable_unlabeled {
                let batch: Vec<usize> = (0..ru).map(|j| order[(k * ru + j) % order.len()]).collect();
                let unl = exec
                    .map_range(ru, |j| {
                        unlabeled_job(pseudo, &batch, j, cfg, step * ru as u64 + j as u64, feat_on(Kind::Unlabeled))
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                jobs.extend(unl);
            }
            let losses = st.step(&jobs)?;
            curve.push(losses.overall.unwrap_or(f64::NAN));
        }
    }
    Ok(StageOutput {
        params: st.params,
        loss_curve: curve,
        stats: st.stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub checkpoint_hash: String,
    pub loss_curve: Vec<f64>,
    pub stats: StageStats,
}

impl StageReport {
    pub fn new(name: &str, out: &StageOutput) -> Self {
        StageReport {
            name: name.to_string(),
            checkpoint_hash: out.params.hash(),
            loss_curve: out.loss_curve.clone(),
            stats: out.stats.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: u32,
    pub metrics: MetricReport,
}

/// Everything a run produced. Wall-clock time is kept out of the
/// serialized form so reports compare byte-for-byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub stages: Vec<StageReport>,
    pub metrics: Vec<DomainMetrics>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub fn evaluate_domains(params: &ParamSet, data: &Datasets, cfg: &RunConfig, exec: Exec) -> Result<Vec<DomainMetrics>> {
    data.test
        .iter()
        .map(|split| {
            Ok(DomainMetrics {
                domain: split.domain,
                metrics: evaluate_checkpoint(params, &split.items, cfg.align, exec)?,
            })
        })
        .collect()
}

pub struct PipelineOutput {
    pub teacher: StageOutput,
    pub pseudo: Vec<PseudoSample>,
    pub student: StageOutput,
    pub report: RunReport,
}

/// Teacher → pseudo-labels → student → evaluation of the student.
pub fn run_pipeline(data: &Datasets, cfg: &RunConfig, exec: Exec) -> Result<PipelineOutput> {
    let start = Instant::now();
    let teacher = train_teacher(&data.labeled, cfg, exec)?;
    let pseudo = pseudo_label(&teacher.params, &data.unlabeled, exec)?;
    let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
    let student = train_student(&data.labeled, &pseudo, &frozen, cfg, exec)?;
    let metrics = evaluate_domains(&student.params, data, cfg, exec)?;
    let report = RunReport {
        config: cfg.clone(),
        stages: vec![StageReport::new("teacher", &teacher), StageReport::new("student", &student)],
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(PipelineOutput {
        teacher,
        pseudo,
        student,
        report,
    })
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub group: String,
    pub label: String,
    pub enable_unlabeled: bool,
    pub enable_strong_perturb: bool,
    pub enable_feat_align: bool,
    pub feat_target: FeatTarget,
    pub alpha: f64,
}

impl AblationSpec {
    fn new(group: &str, label: &str, flags: (bool, bool, bool), target: FeatTarget, alpha: f64) -> Self {
        AblationSpec {
            group: group.into(),
            label: label.into(),
            enable_unlabeled: flags.0,
            enable_strong_perturb: flags.1,
            enable_feat_align: flags.2,
            feat_target: target,
            alpha,
        }
    }

    /// Loss-term ablation: labeled only, + pseudo-labels, + strong
    /// perturbation, + feature alignment.
    pub fn core(alpha: f64) -> Vec<Self> {
        let u = FeatTarget::Unlabeled;
        vec![
            Self::new("core", "L_l", (false, false, false), u, alpha),
            Self::new("core", "L_l+L_u", (true, false, false), u, alpha),
            Self::new("core", "L_l+L_u+S", (true, true, false), u, alpha),
            Self::new("core", "L_l+L_u+S+L_feat", (true, true, true), u, alpha),
        ]
    }

    pub fn margins() -> Vec<Self> {
        [1.0, 0.85, 0.70]
            .iter()
            .map(|&a| Self::new("margin", &format!("alpha={a:.2}"), (true, true, true), FeatTarget::Unlabeled, a))
            .collect()
    }

    pub fn feat_targets(alpha: f64) -> Vec<Self> {
        vec![
            Self::new("feat_target", "none", (true, true, false), FeatTarget::Unlabeled, alpha),
            Self::new("feat_target", "U", (true, true, true), FeatTarget::Unlabeled, alpha),
            Self::new("feat_target", "L", (true, true, true), FeatTarget::Labeled, alpha),
        ]
    }

    pub fn full_grid(alpha: f64) -> Vec<Self> {
        let mut v = Self::core(alpha);
        v.extend(Self::margins());
        v.extend(Self::feat_targets(alpha));
        v
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        Ok(RunConfig {
            enable_unlabeled: self.enable_unlabeled,
            enable_strong_perturb: self.enable_strong_perturb,
            enable_feat_align: self.enable_feat_align,
            feat_target: self.feat_target,
            alpha: ToleranceMargin::new(self.alpha)?,
            ..base.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    /// Per-image metrics averaged over all test domains.
    pub metrics: MetricReport,
    pub student_hash: String,
}

/// Trains one teacher, pseudo-labels once, then trains a student per spec.
/// Specs that resolve to the same configuration share a student.
pub fn run_ablation(data: &Datasets, base: &RunConfig, specs: &[AblationSpec], exec: Exec) -> Result<Vec<AblationRow>> {
    let teacher = train_teacher(&data.labeled, base, exec)?;
    let pseudo = pseudo_label(&teacher.params, &data.unlabeled, exec)?;
    let frozen = FrozenEncoder::new(&base.model, base.frozen_seed);
    let mut cache: HashMap<String, (MetricReport, String)> = HashMap::new();
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let cfg = spec.apply(base)?;
        let key = serde_json::to_string(&cfg).map_err(|e| Error::Format(e.to_string()))?;
        let (metrics, student_hash) = match cache.get(&key) {
            Some(hit) => hit.clone(),
            None => {
                let student = train_student(&data.labeled, &pseudo, &frozen, &cfg, exec)?;
                let per_domain = evaluate_domains(&student.params, data, &cfg, exec)?;
                let merged = merge_domains(&per_domain)?;
                let v = (merged, student.params.hash());
                cache.insert(key, v.clone());
                v
            }
        };
        rows.push(AblationRow {
            spec: spec.clone(),
            metrics,
            student_hash,
        });
    }
    Ok(rows)
}

pub fn run_ablation_grid(data: &Datasets, base: &RunConfig, exec: Exec) -> Result<Vec<AblationRow>> {
    run_ablation(data, base, &AblationSpec::full_grid(base.alpha.alpha()), exec)
}

fn merge_domains(per_domain: &[DomainMetrics]) -> Result<MetricReport> {
    let first = per_domain
        .first()
        .ok_or_else(|| Error::Domain("no test domains".into()))?;
    if per_domain.len() == 1 {
        return Ok(first.metrics.clone());
    }
    let n = per_domain.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| per_domain.iter().map(|d| f(&d.metrics)).sum::<f64>() / n;
    Ok(MetricReport {
        absrel: mean(|m| m.absrel),
        delta1: mean(|m| m.delta1),
        delta2: mean(|m| m.delta2),
        delta3: mean(|m| m.delta3),
        rmse: mean(|m| m.rmse),
        rmse_log: mean(|m| m.rmse_log),
        log10: mean(|m| m.log10),
        n_pixels: per_domain.iter().map(|d| d.metrics.n_pixels).sum(),
        n_images: per_domain.iter().map(|d| d.metrics.n_images).sum(),
        alignments: per_domain.iter().flat_map(|d| d.metrics.alignments.clone()).collect(),
    })
}

/// CSV with one row per ablation configuration.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "group,label,enable_unlabeled,enable_strong_perturb,enable_feat_align,feat_target,alpha,",
    );
    out.push_str(&MetricReport::CSV_COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        let s = &r.spec;
        let target = match s.feat_target {
            FeatTarget::Unlabeled => "unlabeled",
            FeatTarget::Labeled => "labeled",
            FeatTarget::Both => "both",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            s.group, s.label, s.enable_unlabeled, s.enable_strong_perturb, s.enable_feat_align, target, s.alpha
        ));
        for v in r.metrics.csv_values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_datasets, DataConfig, SceneSpec};

    fn tiny_data() -> Datasets {
        let cfg = DataConfig {
            scene: SceneSpec {
                height: 16,
                width: 16,
                primitives: 3,
                ..SceneSpec::default()
            },
            n_labeled: 8,
            n_unlabeled: 12,
            n_test: 4,
            ..DataConfig::default()
        };
        generate_datasets(&cfg, Exec::default()).unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            teacher_epochs: 2,
            teacher_batch_size: 4,
            model: ModelConfig {
                patch: 8,
                feature_dim: 8,
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = tiny_data();
        let cfg = RunConfig {
            teacher_epochs: 0,
            ..tiny_cfg()
        };
        let out = train_teacher(&data.labeled, &cfg, Exec::default()).unwrap();
        assert_eq!(out.params, ParamSet::init(&cfg.model, cfg.seed, "teacher-init"));
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn teacher_errors() {
        assert!(train_teacher(&[], &tiny_cfg(), Exec::default()).is_err());
        // Flat scenes: no primitives, no sky, constant ground cannot happen,
        // so force a degenerate target by hand.
        let mut data = tiny_data();
        for item in &mut data.labeled {
            item.sample.sky = None;
            let (h, w) = item.sample.depth.values.dims2().unwrap();
            item.sample.depth.values = Tensor::full(&[h, w], 3.0);
        }
        let e = train_teacher(&data.labeled, &tiny_cfg(), Exec::default()).unwrap_err();
        assert!(e.is_degenerate());
    }

    #[test]
    fn batches_hold_the_ratio() {
        let data = tiny_data();
        let cfg = RunConfig {
            labeled_per_batch: 2,
            ..tiny_cfg()
        };
        let teacher = train_teacher(&data.labeled, &cfg, Exec::default()).unwrap();
        let pseudo = pseudo_label(&teacher.params, &data.unlabeled, Exec::default()).unwrap();
        let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
        let out = train_student(&data.labeled, &pseudo, &frozen, &cfg, Exec::default()).unwrap();
        // 12 unlabeled, 4 per batch.
        assert_eq!(out.stats.steps, 3);
        assert_eq!(out.stats.cutmix_items + out.stats.plain_unlabeled_items, 12);
    }

    #[test]
    fn cutmix_never_fires_at_probability_zero() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.perturb.cutmix_probability = 0.0;
        let teacher = train_teacher(&data.labeled, &cfg, Exec::default()).unwrap();
        let pseudo = pseudo_label(&teacher.params, &data.unlabeled, Exec::default()).unwrap();
        let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
        let out = train_student(&data.labeled, &pseudo, &frozen, &cfg, Exec::default()).unwrap();
        assert_eq!(out.stats.cutmix_items, 0);
        assert_eq!(out.stats.plain_unlabeled_items, 12);

        cfg.perturb.cutmix_probability = 1.0;
        let out = train_student(&data.labeled, &pseudo, &frozen, &cfg, Exec::default()).unwrap();
        assert_eq!(out.stats.cutmix_items, 12);
    }

    #[test]
    fn dirty_pseudo_labels_are_rejected() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let teacher = ParamSet::init(&cfg.model, 1, "t");
        let mut pseudo = pseudo_label(&teacher, &data.unlabeled, Exec::default()).unwrap();
        pseudo[3].provenance.clean_input = false;
        let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
        assert!(train_student(&data.labeled, &pseudo, &frozen, &cfg, Exec::default()).is_err());
    }

    #[test]
    fn student_starts_from_fresh_parameters() {
        let cfg = tiny_cfg();
        let t = ParamSet::init(&cfg.model, cfg.seed, "teacher-init");
        let s = ParamSet::init(&cfg.model, cfg.seed, "student-init");
        assert_ne!(t.hash(), s.hash());
    }

    #[test]
    fn ablation_rows_and_csv() {
        let data = tiny_data();
        let cfg = RunConfig {
            teacher_epochs: 1,
            ..tiny_cfg()
        };
        let rows = run_ablation_grid(&data, &cfg, Exec::default()).unwrap();
        assert_eq!(rows.len(), 10);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 11);
        assert!(csv.starts_with("group,label,"));
        assert!(csv.lines().next().unwrap().ends_with("absrel,d1,d2,d3,rmse,rmse_log,log10"));
        // alpha 0.85 margin row, full core row and U row share one config.
        assert_eq!(rows[3].student_hash, rows[5].student_hash);
        assert_eq!(rows[5].student_hash, rows[8].student_hash);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig {
            ratio: [0, 2],
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            ratio: [2, 3],
            labeled_per_batch: 1,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let ok = RunConfig {
            ratio: [2, 3],
            labeled_per_batch: 2,
            ..RunConfig::default()
        };
        assert_eq!(ok.unlabeled_per_batch(), 3);
    }
}
