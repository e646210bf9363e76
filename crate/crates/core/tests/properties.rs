use proptest::prelude::*;

use depthforge::engine::{pseudo_label, train_student, train_teacher, RunConfig};
use depthforge::eval::{align_least_squares, compute_metrics, depth_metrics, AlignMethod};
use depthforge::io::checkpoint;
use depthforge::io::pfm::{decode, encode, Endian, Pfm};
use depthforge::losses::{affine_invariant_loss, feature_alignment_loss, ToleranceMargin};
use depthforge::model::{FrozenEncoder, ModelConfig, ParamSet};
use depthforge::synth::{generate_datasets, mean_gradient_magnitude, DataConfig, SceneSpec};
use depthforge::{DepthMap, Exec, Mask, Tensor};

fn map(v: Vec<f64>, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w], v).unwrap()
}

/// Scalar-loop reference for the affine-invariant loss.
fn loss_oracle(p: &[f64], g: &[f64]) -> f64 {
    fn norm(v: &[f64]) -> Vec<f64> {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let t = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let mut mad = 0.0;
        for x in v {
            mad += (x - t).abs();
        }
        mad /= n as f64;
        v.iter().map(|x| (x - t) / mad).collect()
    }
    let (a, b) = (norm(p), norm(g));
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]).abs();
    }
    acc / a.len() as f64
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_oracle_and_is_affine_invariant(
        p in values(12), g in values(12), a in 0.1f64..10.0, b in -5.0f64..5.0,
    ) {
        let all = Mask::full(3, 4, true);
        let (pt, gt) = (map(p.clone(), 3, 4), map(g.clone(), 3, 4));
        let l = affine_invariant_loss(&pt, &gt, &all).unwrap().value;
        prop_assert!((l - loss_oracle(&p, &g)).abs() < 1e-12);
        let moved = pt.map(|x| a * x + b);
        let l2 = affine_invariant_loss(&moved, &gt, &all).unwrap().value;
        prop_assert!((l - l2).abs() < 1e-9);
        let sym = affine_invariant_loss(&gt, &pt, &all).unwrap().value;
        prop_assert!((l - sym).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_is_monotone_in_margin(f in values(24), fr in values(24)) {
        let (f, fr) = (map(f, 4, 6), map(fr, 4, 6));
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.5, 0.7, 0.85, 1.0] {
            let l = feature_alignment_loss(&f, &fr, ToleranceMargin::new(alpha).unwrap()).unwrap().value;
            prop_assert!(l >= last - 1e-15);
            last = l;
        }
    }

    #[test]
    fn metrics_ignore_affine_maps_of_the_prediction(
        gt in prop::collection::vec(1.0f64..20.0, 16),
        pred in prop::collection::vec(0.05f64..1.0, 16),
        a in 0.2f64..5.0, b in 0.0f64..1.0,
    ) {
        let gt = DepthMap::new(map(gt, 4, 4), Mask::full(4, 4, true)).unwrap();
        let all = Mask::full(4, 4, true);
        let p = map(pred, 4, 4);
        let (m1, _) = compute_metrics(&p, &gt, &all, AlignMethod::LeastSquares).unwrap();
        let (m2, _) = compute_metrics(&p.map(|x| a * x + b), &gt, &all, AlignMethod::LeastSquares).unwrap();
        for (x, y) in [(m1.absrel, m2.absrel), (m1.rmse, m2.rmse), (m1.rmse_log, m2.rmse_log), (m1.log10, m2.log10)] {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        prop_assert!(m1.delta1 <= m1.delta2 && m1.delta2 <= m1.delta3);
    }

    #[test]
    fn ratio_metrics_ignore_common_depth_scale(
        gt in prop::collection::vec(1.0f64..20.0, 16),
        pred in prop::collection::vec(1.0f64..20.0, 16),
        k in 0.1f64..10.0,
    ) {
        let all = Mask::full(4, 4, true);
        let m1 = depth_metrics(&map(pred.clone(), 4, 4), &map(gt.clone(), 4, 4), &all).unwrap();
        let m2 = depth_metrics(&map(pred, 4, 4).map(|x| k * x), &map(gt, 4, 4).map(|x| k * x), &all).unwrap();
        prop_assert!((m1.absrel - m2.absrel).abs() < 1e-12);
        prop_assert!((m1.rmse_log - m2.rmse_log).abs() < 1e-9);
        prop_assert!((m1.log10 - m2.log10).abs() < 1e-12);
    }

    #[test]
    fn alignment_recovers_scale_and_shift(
        gt in prop::collection::vec(0.05f64..1.0, 16), a in 0.1f64..10.0, b in -2.0f64..2.0,
    ) {
        let g = map(gt, 4, 4);
        let p = g.map(|x| (x - b) / a);
        let al = align_least_squares(&p, &g, &Mask::full(4, 4, true)).unwrap();
        prop_assert!((al.scale - a).abs() < 1e-9 * a.max(1.0));
        prop_assert!((al.shift - b).abs() < 1e-9);
    }

    #[test]
    fn pfm_round_trip(v in prop::collection::vec(-1e6f64..1e6, 15), big in any::<bool>()) {
        let t = map(v, 3, 5);
        let endian = if big { Endian::Big } else { Endian::Little };
        let back = decode(&encode(&Pfm::from_map(&t).unwrap(), endian)).unwrap().to_tensor();
        prop_assert_eq!(back, t.round_f32());
    }
}

#[test]
fn checkpoint_round_trip_through_file() {
    let p = ParamSet::init(&ModelConfig::default(), 5, "rt");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &p).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), p);
}

#[test]
fn held_out_domain_has_different_texture_statistics() {
    let cfg = DataConfig {
        n_labeled: 30,
        n_unlabeled: 0,
        n_test: 30,
        ..DataConfig::default()
    };
    let data = generate_datasets(&cfg, Exec::default()).unwrap();
    let mean = |imgs: Vec<&Tensor>| {
        imgs.iter().map(|i| mean_gradient_magnitude(i).unwrap()).sum::<f64>() / imgs.len() as f64
    };
    let train = mean(data.labeled.iter().map(|x| &x.sample.image).collect());
    let test = mean(data.test[0].items.iter().map(|x| &x.sample.image).collect());
    assert!((train - test).abs() / train > 0.1, "train {train} test {test}");
}

fn tiny() -> (depthforge::synth::Datasets, RunConfig) {
    let data = generate_datasets(
        &DataConfig {
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
        },
        Exec::Sequential,
    )
    .unwrap();
    let cfg = RunConfig {
        teacher_epochs: 2,
        labeled_per_batch: 2,
        model: ModelConfig {
            patch: 8,
            feature_dim: 8,
        },
        ..RunConfig::default()
    };
    (data, cfg)
}

#[test]
fn training_is_independent_of_executor() {
    let (data, cfg) = tiny();
    let run = |exec: Exec| {
        let t = train_teacher(&data.labeled, &cfg, exec).unwrap();
        let p = pseudo_label(&t.params, &data.unlabeled, exec).unwrap();
        let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
        let s = train_student(&data.labeled, &p, &frozen, &cfg, exec).unwrap();
        (t.params.hash(), s.params.hash(), s.loss_curve)
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn frozen_encoder_is_untouched_by_training() {
    let (data, cfg) = tiny();
    let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
    let before = frozen.params().hash();
    let t = train_teacher(&data.labeled, &cfg, Exec::default()).unwrap();
    let p = pseudo_label(&t.params, &data.unlabeled, Exec::default()).unwrap();
    train_student(&data.labeled, &p, &frozen, &cfg, Exec::default()).unwrap();
    assert_eq!(frozen.params().hash(), before);
}

#[test]
fn flags_off_trains_on_labeled_data_only() {
    let (data, cfg) = tiny();
    let cfg = RunConfig {
        enable_unlabeled: false,
        enable_strong_perturb: false,
        enable_feat_align: false,
        ..cfg
    };
    let t = train_teacher(&data.labeled, &cfg, Exec::default()).unwrap();
    let p = pseudo_label(&t.params, &data.unlabeled, Exec::default()).unwrap();
    let frozen = FrozenEncoder::new(&cfg.model, cfg.frozen_seed);
    let s = train_student(&data.labeled, &p, &frozen, &cfg, Exec::default()).unwrap();
    assert_eq!(s.stats.cutmix_items + s.stats.plain_unlabeled_items, 0);
    // Pseudo-label values play no role: replacing them leaves the student unchanged.
    let mut other = p.clone();
    for q in &mut other {
        q.pseudo_disparity.values = q.pseudo_disparity.values.map(|x| 1.0 - x);
    }
    let s2 = train_student(&data.labeled, &other, &frozen, &cfg, Exec::default()).unwrap();
    assert_eq!(s.params, s2.params);
}

#[test]
fn teacher_loss_decreases() {
    let (data, cfg) = tiny();
    let cfg = RunConfig {
        teacher_epochs: 6,
        ..cfg
    };
    let t = train_teacher(&data.labeled, &cfg, Exec::default()).unwrap();
    assert!(t.loss_curve.last().unwrap() < t.loss_curve.first().unwrap());
}
