//! Acceptance run: one PASS/FAIL line per gating criterion, plus the
//! non-gating numbers each one reports. Exits non-zero if any fails.
//!
//! The training criteria share one synthetic train/test split and reuse
//! trained models whose configs coincide (the 4-view baseline is the same
//! model on the views, alignment and smoothness axes).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvmesh::alignment::broadcast_views;
use mvmesh::autodiff::Graph;
use mvmesh::decoder::build_body_queries;
use mvmesh::fusion::tokenize;
use mvmesh::geometry::{procrustes_align, project, rotate_points, Rotation, WeakPerspectiveIntrinsics};
use mvmesh::losses::{loss_align, loss_joint, loss_smooth, loss_vertex, mpjpe, pa_mpjpe, JointPrediction, SmoothTerms};
use mvmesh::mesh::MeshTemplate;
use mvmesh::model::{AlignmentMode, Batch};
use mvmesh::nn::Mode;
use mvmesh::synthetic::{default_rig, generate, GenConfig, MultiViewSample};
use mvmesh::tensor::Matrix;
use mvmesh::train::{
    ablation_settings, evaluate, gradcheck, predict, AblationAxis, EvalOptions, EvalReport, GradcheckOptions, TrainConfig,
    Trainer,
};

/// Shared split for the trend, alignment and smoothness criteria.
const TRAIN_SAMPLES: usize = 512;
const TEST_SAMPLES: usize = 128;
const DATA_SEED: u64 = 2024;
/// Training budget of each model on that split. Small batches give more
/// updates per epoch at the same cost; the decay settles the last epochs.
const EPOCHS: usize = 40;
const LR: f64 = 5e-4;
const BATCH: usize = 2;
const DECAY_EVERY: usize = 30;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

type Check = Box<dyn FnOnce(&mut Shared) -> Outcome>;

fn main() {
    let checks: Vec<(&str, Check)> = vec![
        ("loss_correctness", Box::new(|_| loss_correctness())),
        ("gradient_suite", Box::new(|_| gradient_suite())),
        ("geometry_suite", Box::new(|_| geometry_suite())),
        ("cross_view_consistency", Box::new(|_| cross_view_consistency())),
        ("shape_contracts", Box::new(|_| shape_contracts())),
        ("permutation_equivariance", Box::new(|_| permutation_equivariance())),
        ("overfit_smoke", Box::new(|_| overfit_smoke())),
        ("view_count_trend", Box::new(view_count_trend)),
        ("alignment_direction", Box::new(alignment_direction)),
        ("smooth_loss_behaviour", Box::new(smooth_loss_behaviour)),
        ("determinism", Box::new(|_| determinism())),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared)));
        let secs = start.elapsed().as_secs_f64();
        let Outcome { passed, detail } = result.unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !passed {
            failed += 1;
        }
        println!("{} {name} ({secs:.1}s): {detail}", if passed { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(t: Duration, limit_s: f64) -> bool {
    t.as_secs_f64() < limit_s
}

fn rand_m(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn l1_oracle(p: &Matrix, q: &Matrix) -> f64 {
    let mut s = 0.0;
    for r in 0..p.rows() {
        for c in 0..p.cols() {
            s += (p[(r, c)] - q[(r, c)]).abs();
        }
    }
    s / p.rows() as f64
}

fn smooth_oracle(v: &Matrix, gt: &Matrix, t: &MeshTemplate) -> f64 {
    let sub = |m: &Matrix, a: usize, b: usize| [m[(a, 0)] - m[(b, 0)], m[(a, 1)] - m[(b, 1)], m[(a, 2)] - m[(b, 2)]];
    let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let mut normal = 0.0;
    for f in &t.faces {
        let (u, w) = (sub(gt, f[1], f[0]), sub(gt, f[2], f[0]));
        let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
        let len = dot(n, n).sqrt();
        let n = [n[0] / len, n[1] / len, n[2] / len];
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            normal += dot(sub(v, a, b), n).powi(2);
        }
    }
    let mut edge = 0.0;
    for e in &t.edges {
        let (p, q) = (sub(v, e[0], e[1]), sub(gt, e[0], e[1]));
        edge += (dot(p, p).sqrt() - dot(q, q).sqrt()).powi(2);
    }
    let mut lap = 0.0;
    for (i, nb) in t.neighborhoods.iter().enumerate() {
        for c in 0..3 {
            let d = |k: usize| v[(k, c)] - gt[(k, c)];
            let mean = nb.iter().map(|&j| d(j)).sum::<f64>() / nb.len() as f64;
            lap += (d(i) - mean).powi(2);
        }
    }
    normal + edge + lap
}

fn loss_correctness() -> Outcome {
    let start = Instant::now();
    let template = MeshTemplate::default();
    let terms = SmoothTerms::new(&template);
    let (k, m) = (template.num_joints(), template.num_vertices());
    let m1 = template.sub1_idx.len();
    let m2 = template.sub2_idx.len();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut worst_zero) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let lambda = [0, 1, 2, 3].map(|_| rng.gen_range(0.1..2.0));
        let eta = [0, 1, 2].map(|_| rng.gen_range(0.1..2.0));
        let gt3 = rand_m(&mut rng, k, 3, 1.0);
        let gt2 = rand_m(&mut rng, k, 2, 1.0);
        let preds: Vec<Matrix> = (0..4).map(|i| rand_m(&mut rng, k, if i % 2 == 0 { 2 } else { 3 }, 1.0)).collect();
        let gt_v: Vec<Matrix> = [m, m1, m2].iter().map(|&r| rand_m(&mut rng, r, 3, 1.0)).collect();
        let pv: Vec<Matrix> = [m, m1, m2].iter().map(|&r| rand_m(&mut rng, r, 3, 1.0)).collect();
        let n = rng.gen_range(1..=4);
        let al_pred: Vec<(Matrix, Matrix)> = (0..n).map(|_| (rand_m(&mut rng, k, 2, 1.0), rand_m(&mut rng, k, 3, 1.0))).collect();
        let al_gt2: Vec<Matrix> = (0..n).map(|_| rand_m(&mut rng, k, 2, 1.0)).collect();
        let al_gt3: Vec<Matrix> = (0..n).map(|_| rand_m(&mut rng, k, 3, 1.0)).collect();
        let gt_mesh = template.v_tpose.zip_map(&rand_m(&mut rng, m, 3, 0.01), |a, b| a + b);
        let v_mesh = gt_mesh.zip_map(&rand_m(&mut rng, m, 3, 0.02), |a, b| a + b);

        // Each term against its loop oracle, then at ground truth.
        let eval = |g: &mut Graph, jp: [&Matrix; 4], vp: [&Matrix; 3], ap: &[(Matrix, Matrix)], v: &Matrix| {
            let c: Vec<_> = jp.iter().map(|x| g.constant((*x).clone())).collect();
            let jpred = JointPrediction { direct2d: c[0], direct3d: c[1], regressed2d: c[2], regressed3d: c[3] };
            let lj = loss_joint(g, &jpred, &gt3, &gt2, &lambda).unwrap();
            let vv = vp.map(|x| g.constant(x.clone()));
            let lv = loss_vertex(g, vv, [&gt_v[0], &gt_v[1], &gt_v[2]], &eta).unwrap();
            let per_view: Vec<_> = ap.iter().map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone()))).collect();
            let la = loss_align(g, &per_view, &al_gt2, &al_gt3, true).unwrap();
            let la3 = loss_align(g, &per_view, &al_gt2, &al_gt3, false).unwrap();
            let vs = g.constant(v.clone());
            let ls = loss_smooth(g, vs, &gt_mesh, &terms).unwrap();
            [lj, lv, la, la3, ls].map(|x| g.scalar(x))
        };
        let mut g = Graph::new();
        let got = eval(&mut g, [&preds[0], &preds[1], &preds[2], &preds[3]], [&pv[0], &pv[1], &pv[2]], &al_pred, &v_mesh);
        let gts = [&gt2, &gt3, &gt2, &gt3];
        let oj: f64 = (0..4).map(|i| lambda[i] * l1_oracle(&preds[i], gts[i])).sum();
        let ov: f64 = (0..3).map(|i| eta[i] * l1_oracle(&pv[i], &gt_v[i])).sum();
        let (mut oa3, mut oa2) = (0.0, 0.0);
        for i in 0..n {
            oa3 += l1_oracle(&al_pred[i].1, &al_gt3[i]) / n as f64;
            oa2 += l1_oracle(&al_pred[i].0, &al_gt2[i]) / n as f64;
        }
        let os = smooth_oracle(&v_mesh, &gt_mesh, &template);
        for (a, o) in got.iter().zip([oj, ov, oa3 + oa2, oa3, os]) {
            worst = worst.max((a - o).abs() / o.abs().max(1.0));
        }

        let mut g = Graph::new();
        let at_gt: Vec<(Matrix, Matrix)> = (0..n).map(|i| (al_gt2[i].clone(), al_gt3[i].clone())).collect();
        let zero = eval(&mut g, [&gt2, &gt3, &gt2, &gt3], [&gt_v[0], &gt_v[1], &gt_v[2]], &at_gt, &gt_mesh);
        worst_zero = worst_zero.max(zero.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    }
    let t = start.elapsed();
    outcome(
        // Zero at ground truth up to f64 rounding: the normal term squares edge·normal dots.
        worst < 1e-6 && worst_zero <= 1e-15 && within(t, 10.0),
        format!(
            "100 instances, max oracle deviation {worst:.2e} (< 1e-6), max value at ground truth {worst_zero:.1e} (<= 1e-15)"
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = gradcheck(&TrainConfig::default(), GradcheckOptions::default()).expect("gradcheck runs");
    let t = start.elapsed();
    let mut detail = String::new();
    for term in &report.terms {
        let _ = write!(detail, "{} {:.2e}/{:.0e}; ", term.term, term.worst(), term.tolerance);
    }
    let _ = write!(detail, "{:.1}s of 60s", t.as_secs_f64());
    outcome(report.passed() && within(t, 60.0), detail)
}

fn geometry_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut lin = 0.0f64;
    let mut resid = 0.0f64;
    let mut pa_violations = 0;
    for _ in 0..1000 {
        let r = Rotation::from_axis_angle([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let k = WeakPerspectiveIntrinsics::new(rng.gen_range(0.2..3.0), [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .unwrap();
        let (x, y) = (rand_m(&mut rng, 14, 3, 1.0), rand_m(&mut rng, 14, 3, 1.0));
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        // Π(aX + bY) − t = a(ΠX − t) + b(ΠY − t).
        let t = k.translation();
        let centred = |p: Matrix| Matrix::from_fn(p.rows(), 2, |i, c| p[(i, c)] - t[c]);
        let lhs = centred(project(&k, &r, &x.zip_map(&y, |p, q| a * p + b * q)));
        let (px, py) = (centred(project(&k, &r, &x)), centred(project(&k, &r, &y)));
        lin = lin.max(lhs.max_abs_diff(&px.zip_map(&py, |p, q| a * p + b * q)));

        let s = rng.gen_range(0.3..3.0);
        let tr = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let moved = Matrix::from_fn(14, 3, |i, c| s * rotate_points(&r, &x)[(i, c)] + tr[c]);
        let sim = procrustes_align(&x, &moved).unwrap();
        resid = resid.max(sim.aligned.max_abs_diff(&moved));
        resid = resid.max((sim.scale - s).abs());

        let (p, q) = (rand_m(&mut rng, 14, 3, 1.0), rand_m(&mut rng, 14, 3, 1.0));
        if pa_mpjpe(&p, &q).unwrap() > mpjpe(&p, &q) + 1e-12 {
            pa_violations += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        lin < 1e-12 && resid < 1e-7 && pa_violations == 0 && within(t, 10.0),
        format!(
            "projection affinity error {lin:.1e}, Procrustes residual {resid:.1e} (< 1e-7), PA > MPJPE in {pa_violations} of 1000 pairs"
        ),
    )
}

fn cross_view_consistency() -> Outcome {
    let start = Instant::now();
    let rig = default_rig(4, 112).unwrap();
    let template = MeshTemplate::default();
    let data = generate(1000, 13, &rig, &template, &GenConfig::default()).unwrap();
    let (mut gt3, mut gt2, mut inter) = (0.0f64, 0.0f64, 0.0f64);
    let intrinsics: Vec<WeakPerspectiveIntrinsics> = rig.views().iter().map(|v| v.intrinsics).collect();
    for (i, s) in data.samples.iter().enumerate() {
        let (e3, e2) = mvmesh::synthetic::cross_view_error(s, &rig);
        gt3 = gt3.max(e3);
        gt2 = gt2.max(e2);
        // The broadcast of the master ground truth must reproduce every
        // view's ground truth, and its own relations must hold.
        let ip = broadcast_views(&s.joints3d[rig.master()], &intrinsics, &rig).unwrap();
        inter = inter.max(ip.consistency_error(&rig));
        for v in 0..rig.len() {
            inter = inter.max(ip.per_view[v].0.max_abs_diff(&s.joints2d[v]));
            inter = inter.max(ip.per_view[v].1.max_abs_diff(&s.joints3d[v]));
        }
        assert_eq!(s.n_views(), 4, "sample {i}");
    }
    let t = start.elapsed();
    outcome(
        gt3 < 1e-5 && gt2 < 1e-5 && inter < 1e-5 && within(t, 30.0),
        format!("1000 samples: ground truth 3D {gt3:.1e}, 2D {gt2:.1e} px, broadcast {inter:.1e} (all < 1e-5)"),
    )
}

fn small_split(n: usize, seed: u64) -> Vec<MultiViewSample> {
    let rig = default_rig(4, 112).unwrap();
    generate(n, seed, &rig, &MeshTemplate::default(), &GenConfig::default()).unwrap().samples
}

fn shape_contracts() -> Outcome {
    let config = TrainConfig::default();
    let trainer = Trainer::new(config.clone()).unwrap();
    let (model, store) = (&trainer.model, &trainer.store);
    let k = model.n_joints();
    let m2 = model.template.sub2_idx.len();
    let samples = small_split(1, 14);
    let mut lines = Vec::new();
    let mut ok = true;
    for n in 1..=4 {
        let rig = mvmesh::train::model_rig(&config, n).unwrap();
        let cut = mvmesh::train::first_views(&[&samples[0]], n);
        let batch = Batch::new(&[&cut[0]], &rig).unwrap();
        let mut g = Graph::new();
        let images = g.constant(batch.images.clone());
        let grid = model.backbone.forward(&mut g, store, images, n).unwrap();
        let fp = model.fusion.as_ref().unwrap();
        let tokens = tokenize(&mut g, store, &fp.wx, &fp.embeddings, grid, &batch.view_ids, fp.dims.cells).unwrap();
        let z = mvmesh::fusion::fuse(&mut g, store, fp, grid, &batch.view_ids, 1, &mut Mode::Eval).unwrap();
        let q = build_body_queries(&mut g, store, &model.decoder, z, &model.template, n, batch.master, 1, None).unwrap();
        let got = (g.shape(tokens).0, g.shape(z).0, g.shape(q).0);
        let want = (49 * n, k * n, k + m2);
        ok &= got == want && g.shape(z).1 == config.d;
        lines.push(format!("N={n}: tokens {} z {} q_body {}", got.0, got.1, got.2));
    }
    ok &= k == 14;
    outcome(ok, format!("{} (K={k}, M_sub2={m2})", lines.join(", ")))
}

fn permutation_equivariance() -> Outcome {
    let config = TrainConfig::default();
    let trainer = Trainer::new(config.clone()).unwrap();
    let rig = mvmesh::train::model_rig(&config, 4).unwrap();
    let samples = small_split(3, 15);
    let refs: Vec<&MultiViewSample> = samples.iter().collect();
    let base = predict(&trainer.model, &trainer.store, &refs, &rig).unwrap();
    let mut worst = 0.0f64;
    for order in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1], [0, 3, 1, 2]] {
        let prig = rig.permuted(&order).unwrap();
        let perm: Vec<MultiViewSample> = samples.iter().map(|s| s.select_views(&order)).collect();
        let prefs: Vec<&MultiViewSample> = perm.iter().collect();
        let out = predict(&trainer.model, &trainer.store, &prefs, &prig).unwrap();
        for (a, b) in base.iter().zip(&out) {
            worst = worst.max(a.joints.max_abs_diff(&b.joints)).max(a.vertices.max_abs_diff(&b.vertices));
        }
    }
    outcome(worst < 1e-5, format!("max master-view change over 4 permutations {worst:.1e} (< 1e-5)"))
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let config = TrainConfig { lr: 1e-3, batch_size: 8, epochs: 2000, ..TrainConfig::default() };
    let data = small_split(8, 16);
    let mut t = Trainer::new(config.clone()).unwrap();
    let opts = EvalOptions { n_views: 4, all_views: false };
    let initial = evaluate(&t.model, &t.store, &config, &data, opts).unwrap().mean.mpjpe;
    let mut last = initial;
    while t.step < 2000 {
        t.run_epoch(&data).unwrap();
        if t.step.is_multiple_of(50) {
            last = evaluate(&t.model, &t.store, &config, &data, opts).unwrap().mean.mpjpe;
            if last < 0.2 * initial {
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        last < 0.2 * initial && secs < 600.0,
        format!(
            "MPJPE {initial:.1} -> {last:.1} mm ({:.1}% of initial, < 20%) after {} steps",
            100.0 * last / initial,
            t.step
        ),
    )
}

/// Models trained on the shared split, keyed by canonical config text.
#[derive(Default)]
struct Shared {
    split: Option<(Vec<MultiViewSample>, Vec<MultiViewSample>)>,
    reports: HashMap<String, EvalReport>,
}

impl Shared {
    fn base() -> TrainConfig {
        TrainConfig {
            lr: LR,
            epochs: EPOCHS,
            batch_size: BATCH,
            lr_decay_every: DECAY_EVERY,
            seed: 0,
            ..TrainConfig::default()
        }
    }

    fn report(&mut self, config: &TrainConfig) -> EvalReport {
        let key = config.to_text();
        if let Some(r) = self.reports.get(&key) {
            return r.clone();
        }
        let (train, test) = self.split.get_or_insert_with(|| {
            let all = small_split(TRAIN_SAMPLES + TEST_SAMPLES, DATA_SEED);
            let test = all[TRAIN_SAMPLES..].to_vec();
            (all[..TRAIN_SAMPLES].to_vec(), test)
        });
        let mut t = Trainer::new(config.clone()).unwrap();
        t.train(train, &mut std::io::sink(), &mut |_| Ok(())).unwrap();
        let opts = EvalOptions { n_views: config.n_views, all_views: false };
        let r = evaluate(&t.model, &t.store, config, test, opts).unwrap();
        eprintln!("  trained {key:?}: mpjpe {:.1} mpve {:.1}", r.mean.mpjpe, r.mean.mpve);
        self.reports.insert(key, r.clone());
        r
    }

    fn axis(&mut self, axis: AblationAxis) -> Vec<(String, EvalReport)> {
        ablation_settings(axis, &Self::base())
            .into_iter()
            .map(|s| (s.label, self.report(&s.config)))
            .collect()
    }
}

fn view_count_trend(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let rows = shared.axis(AblationAxis::Views);
    let mpjpe: Vec<f64> = rows.iter().map(|(_, r)| r.mean.mpjpe).collect();
    let mpve: Vec<f64> = rows.iter().map(|(_, r)| r.mean.mpve).collect();
    let (one, four) = (mpjpe[0], mpjpe[3]);
    let gain = (one - four) / one;
    let monotone = mpjpe.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    let table: Vec<String> = rows
        .iter()
        .map(|(l, r)| format!("{l}: {:.1}/{:.1}/{:.1}", r.mean.mpjpe, r.mean.pa_mpjpe, r.mean.mpve))
        .collect();
    outcome(
        gain >= 0.10 && mpve[3] < mpve[0] && secs < 3600.0,
        format!(
            "MPJPE/PA/MPVE mm {}; 1->4 MPJPE gain {:.1}% (>= 10%), MPVE {:.1} -> {:.1}; monotone: {monotone} (not gating)",
            table.join(", "),
            100.0 * gain,
            mpve[0],
            mpve[3]
        ),
    )
}

fn alignment_direction(shared: &mut Shared) -> Outcome {
    let base = Shared::base();
    let mut get = |mode: AlignmentMode| shared.report(&TrainConfig { alignment: mode, ..base.clone() }).mean;
    let off = get(AlignmentMode::Off);
    let three = get(AlignmentMode::ThreeD);
    let both = get(AlignmentMode::ThreeD2D);
    outcome(
        both.mpjpe <= off.mpjpe,
        format!(
            "test MPJPE 3d2d {:.1} <= off {:.1}; 3d-only {:.1} (not gating); MPVE off/3d/3d2d {:.1}/{:.1}/{:.1}",
            both.mpjpe, off.mpjpe, three.mpjpe, off.mpve, three.mpve, both.mpve
        ),
    )
}

fn smooth_loss_behaviour(shared: &mut Shared) -> Outcome {
    let base = Shared::base();
    let off = shared.report(&base).mean;
    let on = shared.report(&TrainConfig { smooth_loss: true, ..base.clone() }).mean;
    outcome(
        on.smooth < off.smooth,
        format!(
            "test smooth loss mu={} {:.5} < mu=0 {:.5}; MPVE {:.1} vs {:.1} (not gating)",
            base.mu, on.smooth, off.smooth, on.mpve, off.mpve
        ),
    )
}

fn determinism() -> Outcome {
    let run = || {
        let config = TrainConfig { lr: LR, epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let data = small_split(12, 17);
        let mut log = Vec::new();
        let mut t = Trainer::new(config.clone()).unwrap();
        t.train(&data[..8], &mut log, &mut |_| Ok(())).unwrap();
        let r = evaluate(&t.model, &t.store, &config, &data[8..], EvalOptions { n_views: 4, all_views: false }).unwrap();
        log.extend_from_slice(r.to_text().as_bytes());
        log
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("two train+eval runs give {} and {} byte logs, identical: {}", a.len(), b.len(), a == b))
}
