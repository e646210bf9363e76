//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances are
//! pinned as constants next to each check.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use depthforge::autodiff::Tape;
use depthforge::engine::{ablation_csv, run_ablation, AblationSpec};
use depthforge::eval::{align_least_squares, compute_metrics, depth_metrics, AlignMethod};
use depthforge::io::pfm::{decode, encode, Endian, Pfm};
use depthforge::io::ConfigFile;
use depthforge::losses::{
    affine_invariant_loss, cutmix_unlabeled_loss, feature_alignment_loss, feature_alignment_term, CutMixMask, Rect,
    ToleranceMargin,
};
use depthforge::rng::{rng_for, Rng as SeededRng};
use depthforge::synth::generate_datasets;
use depthforge::{DepthMap, Exec, Mask, Tensor};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn loss_invariance() -> Check {
    const AFFINE_TOL: f64 = 1e-9;
    const EXACT_TOL: f64 = 1e-12;
    const BUDGET: Duration = Duration::from_secs(5);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = rng_for(1, "accept-loss", i);
        let (h, w) = (8, 8);
        let p = uniform(&mut rng, &[h, w], 0.0, 1.0);
        let g = uniform(&mut rng, &[h, w], 0.0, 1.0);
        let valid = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.9));
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(-5.0..5.0);
        let l = |x: &Tensor, y: &Tensor| affine_invariant_loss(x, y, &valid).map(|r| r.value).map_err(|e| e.to_string());
        let base = l(&p, &g)?;
        let moved = l(&p.map(|x| a * x + b), &g)?;
        worst = worst.max((base - moved).abs());
        ensure((base - moved).abs() < AFFINE_TOL, format!("pair {i}: |ΔL| = {:e}", (base - moved).abs()))?;
        ensure(l(&p, &p)?.abs() < EXACT_TOL, format!("pair {i}: L(p,p) != 0"))?;
        ensure((base - l(&g, &p)?).abs() < EXACT_TOL, format!("pair {i}: asymmetric"))?;
    }
    let t = start.elapsed();
    ensure(t < BUDGET, format!("took {t:?}"))?;
    Ok(format!("100 pairs, max |ΔL| {worst:.1e} < 1e-9, {:.2}s", t.as_secs_f64()))
}

fn gradient_suite() -> Check {
    const BUDGET: Duration = Duration::from_secs(60);
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_depthforge"))
        .args(["gradcheck", "--config"])
        .arg(configs().join("default.json"))
        .output()
        .map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.code() == Some(0), format!("exit {:?}: {stdout}", out.status.code()))?;
    let lines: Vec<&str> = stdout.lines().collect();
    ensure(lines.len() == 6 && lines.iter().all(|l| l.starts_with("PASS")), stdout.to_string())?;
    ensure(t < BUDGET, format!("took {t:?}"))?;
    Ok(format!("6 checks x 10 points, eps 1e-5, threshold 1e-6, {:.2}s", t.as_secs_f64()))
}

fn cutmix_algebra() -> Check {
    const TOL: f64 = 1e-12;
    let mut rng = rng_for(3, "accept-cutmix", 0);
    let (h, w) = (6, 6);
    let s = uniform(&mut rng, &[h, w], 0.0, 1.0);
    let a = uniform(&mut rng, &[h, w], 0.0, 1.0);
    let b = uniform(&mut rng, &[h, w], 0.0, 1.0);
    let full = CutMixMask::from_rect(h, w, Rect { top: 0, left: 0, height: h, width: w }).map_err(|e| e.to_string())?;
    let lu = cutmix_unlabeled_loss(&s, &a, &b, &full).map_err(|e| e.to_string())?.value;
    let plain = affine_invariant_loss(&s, &a, &Mask::full(h, w, true)).map_err(|e| e.to_string())?.value;
    ensure((lu - plain).abs() < TOL, format!("full mask {lu} vs plain {plain}"))?;

    for i in 0..100 {
        let mut rng = rng_for(3, "accept-partition", i);
        let (hh, ww) = (rng.gen_range(2..40), rng.gen_range(2..40));
        let rh = rng.gen_range(1..=hh);
        let rw = rng.gen_range(1..=ww);
        let rect = Rect { top: rng.gen_range(0..=hh - rh), left: rng.gen_range(0..=ww - rw), height: rh, width: rw };
        let m = CutMixMask::from_rect(hh, ww, rect).map_err(|e| e.to_string())?;
        let inside = m.mask.count() as f64;
        let outside = m.mask.not().count() as f64;
        let hw = (hh * ww) as f64;
        ensure(inside / hw + outside / hw == 1.0 && (inside + outside) / hw == 1.0, "weights do not partition")?;
    }

    // Top row inside M, bottom row outside. Two-pixel regions normalize to
    // ±1, so each region's loss is 0 when the orderings agree and 2 when
    // they disagree: 0.5 * 0 + 0.5 * 2 = 1.
    let m2 = CutMixMask::from_rect(2, 2, Rect { top: 0, left: 0, height: 1, width: 2 }).map_err(|e| e.to_string())?;
    let t = |v: [f64; 4]| Tensor::new(vec![2, 2], v.to_vec()).unwrap();
    let l = cutmix_unlabeled_loss(&t([1.0, 2.0, 4.0, 3.0]), &t([0.1, 0.9, 7.0, 7.0]), &t([5.0, 5.0, 0.2, 0.8]), &m2)
        .map_err(|e| e.to_string())?
        .value;
    ensure((l - 1.0).abs() < TOL, format!("2x2 oracle: {l} vs 1"))?;
    Ok("full-mask == plain, partition exact over 100 masks, 2x2 oracle = 1".into())
}

fn feature_semantics() -> Check {
    let mut rng = rng_for(4, "accept-feat", 0);
    let f = uniform(&mut rng, &[16, 8], -1.0, 1.0);
    let m = |a: f64| ToleranceMargin::new(a).unwrap();
    let self_loss = feature_alignment_loss(&f, &f, m(0.85)).map_err(|e| e.to_string())?.value;
    ensure(self_loss == 0.0, format!("self alignment {self_loss}"))?;
    let e1 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let e2 = Tensor::new(vec![2, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap();
    let orth = feature_alignment_loss(&e1, &e2, m(0.85)).map_err(|e| e.to_string())?.value;
    ensure(orth == 1.0, format!("orthogonal rows {orth}"))?;

    let fr = uniform(&mut rng, &[16, 8], -1.0, 1.0);
    let near = f.zip_map(&fr, |x, y| x + y).unwrap();
    let sweep: Vec<f64> = [0.5, 0.7, 0.85, 1.0]
        .iter()
        .map(|&a| feature_alignment_loss(&near, &f, m(a)).unwrap().value)
        .collect();
    ensure(sweep.windows(2).all(|w| w[0] <= w[1]), format!("not monotone: {sweep:?}"))?;

    let mut tape = Tape::new();
    let fv = tape.leaf(near.clone());
    let frv = tape.leaf(f.clone());
    let root = feature_alignment_term(&mut tape, fv, frv, m(0.85)).map_err(|e| e.to_string())?;
    let grads = tape.backward(root).map_err(|e| e.to_string())?;
    let into_frozen = grads.get(frv).map_or(0.0, |g| g.data().iter().map(|x| x.abs()).sum());
    ensure(into_frozen == 0.0, "gradient reached the frozen features")?;
    Ok(format!("self 0, orthogonal 1, losses over alpha {sweep:.4?}, frozen grad 0"))
}

/// Scalar-loop reference for the depth metrics.
fn metric_oracle(p: &[f64], g: &[f64]) -> [f64; 7] {
    let n = p.len() as f64;
    let mut out = [0.0; 7];
    for i in 0..p.len() {
        let r = if p[i] / g[i] > g[i] / p[i] { p[i] / g[i] } else { g[i] / p[i] };
        out[0] += (p[i] - g[i]).abs() / g[i];
        if r < 1.25 {
            out[1] += 1.0;
        }
        if r < 1.25 * 1.25 {
            out[2] += 1.0;
        }
        if r < 1.25 * 1.25 * 1.25 {
            out[3] += 1.0;
        }
        out[4] += (p[i] - g[i]) * (p[i] - g[i]);
        out[5] += (p[i].ln() - g[i].ln()) * (p[i].ln() - g[i].ln());
        out[6] += (p[i].log10() - g[i].log10()).abs();
    }
    [out[0] / n, out[1] / n, out[2] / n, out[3] / n, (out[4] / n).sqrt(), (out[5] / n).sqrt(), out[6] / n]
}

fn metric_oracle_equivalence() -> Check {
    const TOL: f64 = 1e-12;
    let all = Mask::full(4, 4, true);
    for i in 0..50 {
        let mut rng = rng_for(5, "accept-metrics", i);
        let p = uniform(&mut rng, &[4, 4], 0.5, 20.0);
        let g = uniform(&mut rng, &[4, 4], 0.5, 20.0);
        let m = depth_metrics(&p, &g, &all).map_err(|e| e.to_string())?;
        let got = [m.absrel, m.delta1, m.delta2, m.delta3, m.rmse, m.rmse_log, m.log10];
        let want = metric_oracle(p.data(), g.data());
        for k in 0..7 {
            ensure((got[k] - want[k]).abs() < TOL, format!("pair {i} metric {k}: {} vs {}", got[k], want[k]))?;
        }
        ensure(m.delta1 <= m.delta2 && m.delta2 <= m.delta3, "delta ordering")?;
    }
    let row = |v: &[f64]| Tensor::new(vec![1, 3], v.to_vec()).unwrap();
    let m = depth_metrics(&row(&[1.0, 2.0, 4.0]), &row(&[1.0, 2.0, 3.0]), &Mask::full(1, 3, true))
        .map_err(|e| e.to_string())?;
    ensure(m.absrel == 1.0 / 9.0 && m.delta1 == 2.0 / 3.0, format!("worked example {} {}", m.absrel, m.delta1))?;
    Ok("50 random 4x4 pairs match to 1e-12, worked example AbsRel 1/9, d1 2/3".into())
}

fn alignment_recovery() -> Check {
    const TOL: f64 = 1e-9;
    let all = Mask::full(8, 8, true);
    for i in 0..50 {
        let mut rng = rng_for(6, "accept-align", i);
        let depth = uniform(&mut rng, &[8, 8], 1.0, 20.0);
        let gt_disp = depth.map(|t| 1.0 / t);
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(-1.0..1.0);
        let pred = gt_disp.map(|x| (x - b) / a);
        let al = align_least_squares(&pred, &gt_disp, &all).map_err(|e| e.to_string())?;
        ensure((al.scale - a).abs() < TOL && (al.shift - b).abs() < TOL, format!("case {i}: {al:?} vs ({a}, {b})"))?;
        let gt = DepthMap::new(depth, all.clone()).map_err(|e| e.to_string())?;
        let (m, _) = compute_metrics(&pred, &gt, &all, AlignMethod::LeastSquares).map_err(|e| e.to_string())?;
        ensure(m.absrel < TOL, format!("case {i}: AbsRel {}", m.absrel))?;
    }
    Ok("50 cases recover (a, b) to 1e-9, aligned AbsRel < 1e-9".into())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn pipeline_direction() -> Check {
    const BUDGET: Duration = Duration::from_secs(600);
    const SEEDS: u64 = 5;
    let start = Instant::now();
    let base = ConfigFile::load(&configs().join("directional.json")).map_err(|e| e.to_string())?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for seed in 0..SEEDS {
        let cfg = base.clone().with_seed(seed);
        let data = generate_datasets(&cfg.data, Exec::default()).map_err(|e| e.to_string())?;
        let rows = run_ablation(&data, &cfg.run, &AblationSpec::core(cfg.run.alpha.alpha()), Exec::default())
            .map_err(|e| e.to_string())?;
        for (c, r) in cols.iter_mut().zip(&rows) {
            c.push(r.metrics.absrel);
        }
    }
    let t = start.elapsed();
    let [baseline, s_off, s_on, full]: [f64; 4] = std::array::from_fn(|i| median(cols[i].clone()));
    let summary = format!(
        "median AbsRel: L_l {baseline:.4}, +L_u {s_off:.4}, +S {s_on:.4}, +L_feat {full:.4}, {:.0}s",
        t.as_secs_f64()
    );
    ensure(full < baseline, format!("full !< baseline; {summary}"))?;
    ensure(s_on <= s_off, format!("S on !<= S off; {summary}"))?;
    ensure(t < BUDGET, format!("over budget; {summary}"))?;
    Ok(summary)
}

fn margin_grid() -> Check {
    let cfg = ConfigFile::load(&configs().join("small.json")).map_err(|e| e.to_string())?;
    let data = generate_datasets(&cfg.data, Exec::default()).map_err(|e| e.to_string())?;
    let rows = run_ablation(&data, &cfg.run, &AblationSpec::margins(), Exec::default()).map_err(|e| e.to_string())?;
    let csv = ablation_csv(&rows);
    let body: Vec<&str> = csv.lines().skip(1).collect();
    ensure(body.len() == 3, format!("expected 3 rows, got {}", body.len()))?;
    for (line, alpha) in body.iter().zip([1.0, 0.85, 0.70]) {
        let col: Option<f64> = line.split(',').nth(6).and_then(|c| c.parse().ok());
        ensure(col == Some(alpha), format!("row {line}: expected alpha {alpha}"))?;
    }
    Ok("alpha {1.00, 0.85, 0.70}: 3 CSV rows".into())
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_depthforge"))
        .args(args)
        .env("DEPTHFORGE_THREADS", "2")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn five_stages(root: &Path, config: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = config.to_string_lossy().into_owned();
    let common = ["--config", c.as_str(), "--seed", "7"];
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        head.iter().chain(common.iter()).chain(tail.iter()).map(|s| s.to_string()).collect()
    };
    let stages = [
        with(&["gen-data"], &["--out", &p("data")]),
        with(&["train-teacher"], &["--data", &p("data"), "--out", &p("teacher")]),
        with(
            &["pseudo-label"],
            &["--data", &p("data"), "--teacher", &p("teacher/model.ckpt"), "--out", &p("pseudo")],
        ),
        with(&["train-student"], &["--data", &p("data"), "--pseudo", &p("pseudo"), "--out", &p("student")]),
        with(&["eval"], &["--data", &p("data"), "--checkpoint", &p("student/model.ckpt"), "--out", &p("eval")]),
    ];
    for s in &stages {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        run_cli(&args)?;
    }
    Ok(())
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let config = configs().join("small.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    five_stages(a.path(), &config)?;
    five_stages(b.path(), &config)?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    ensure(fa == fb, "different file sets")?;
    for f in &fa {
        let same = std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap();
        ensure(same, format!("{} differs", f.display()))?;
    }
    for needed in ["teacher/model.ckpt", "student/model.ckpt", "student/report.json", "pseudo/manifest.json"] {
        ensure(fa.contains(&PathBuf::from(needed)), format!("missing {needed}"))?;
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

fn pfm_round_trip() -> Check {
    for i in 0..1000 {
        let mut rng = rng_for(10, "accept-pfm", i);
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let t = uniform(&mut rng, &[h, w], -1e3, 1e3);
        let endian = if i % 2 == 0 { Endian::Little } else { Endian::Big };
        let back = decode(&encode(&Pfm::from_map(&t).unwrap(), endian)).map_err(|e| e.to_string())?.to_tensor();
        let exact = back
            .data()
            .iter()
            .zip(t.data())
            .all(|(x, y)| x.to_bits() == ((*y as f32) as f64).to_bits());
        ensure(exact && back.shape() == t.shape(), format!("map {i} changed"))?;
    }
    let one = Tensor::new(vec![1, 1], vec![0.25]).unwrap();
    let bytes = encode(&Pfm::from_map(&one).unwrap(), Endian::Little);
    ensure(bytes == b"Pf\n1 1\n-1.0\n\x00\x00\x80\x3e", format!("fixture bytes {bytes:?}"))?;
    Ok("1000 maps bit-exact at f32, 1x1 fixture matches".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("loss invariance", loss_invariance),
        ("gradient suite", gradient_suite),
        ("cutmix algebra", cutmix_algebra),
        ("feature alignment", feature_semantics),
        ("metric oracle", metric_oracle_equivalence),
        ("alignment recovery", alignment_recovery),
        ("pipeline direction", pipeline_direction),
        ("margin grid", margin_grid),
        ("determinism", determinism),
        ("pfm round trip", pfm_round_trip),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
