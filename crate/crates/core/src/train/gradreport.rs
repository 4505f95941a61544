//! Finite-difference audit of every loss term and of the whole network.
//!
//! Loss terms are probed with respect to their prediction inputs at random
//! points near a posed ground-truth body. The L1 terms are only piecewise
//! smooth, so points whose residuals come within [`KINK_MARGIN`] of zero are
//! redrawn; central differences straddling a kink measure the kink, not the
//! gradient.
//!
//! Each loss term gets two checks: per-entry relative error at a small step
//! ([`FINE_STEP`]) and whole-vector relative error at the nominal step
//! ([`NOMINAL_STEP`]). At the nominal step, FD truncation error dominates
//! entries that are tiny compared to the rest of the gradient, which only
//! the norm-wise measure tolerates.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{first_views, model_rig, TrainConfig, Trainer};
use crate::alignment::broadcast_views_var;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::geometry::{project, rotate_points, CameraRig, Rotation, WeakPerspectiveIntrinsics};
use crate::gradcheck::{check_inputs, check_params, FdReport};
use crate::losses::{loss_align, loss_joint, loss_smooth, loss_vertex, JointPrediction, SmoothTerms};
use crate::mesh::{regress_joints, MeshTemplate, PosedBody};
use crate::model::{relative_rotations, Batch, Targets};
use crate::nn::Mode;
use crate::synthetic::{generate_sample, pose_body, sample_pose_with, GenConfig, PoseConfig, RenderConfig};
use crate::tensor::Matrix;

pub const NOMINAL_STEP: f64 = 1e-4;
pub const FINE_STEP: f64 = 1e-6;
pub const E2E_STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const E2E_TOLERANCE: f64 = 1e-3;
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Random points per loss term.
    pub points: usize,
    /// Extra randomly chosen parameters in the end-to-end probe, on top
    /// of one per parameter tensor.
    pub extra_params: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            points: 20,
            extra_params: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: String,
    /// Per-entry check at [`FINE_STEP`] (or [`E2E_STEP`]).
    pub entrywise: FdReport,
    /// Norm-wise check at [`NOMINAL_STEP`]; absent for the end-to-end probe.
    pub normwise: Option<FdReport>,
    pub tolerance: f64,
}

impl TermCheck {
    pub fn worst(&self) -> f64 {
        let n = self.normwise.map_or(0.0, |r| r.norm_rel);
        // NaN must fail, so compare explicitly.
        if self.entrywise.max_rel.is_nan() || n.is_nan() {
            return f64::NAN;
        }
        self.entrywise.max_rel.max(n)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub terms: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(TermCheck::passed)
    }

    pub fn term(&self, name: &str) -> Option<&TermCheck> {
        self.terms.iter().find(|t| t.term == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("term\tchecked\tmax_rel_entry\tmax_rel_norm\ttolerance\tresult\n");
        for t in &self.terms {
            let norm = t.normwise.map_or("-".to_string(), |r| format!("{:.3e}", r.norm_rel));
            let checked = t.entrywise.checked + t.normwise.map_or(0, |r| r.checked);
            let _ = writeln!(
                s,
                "{}\t{}\t{:.3e}\t{}\t{:.0e}\t{}",
                t.term,
                checked,
                t.entrywise.max_rel,
                norm,
                t.tolerance,
                if t.passed() { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "overall\t{}", if self.passed() { "pass" } else { "FAIL" });
        s
    }
}

fn offset(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(0.01..0.1);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

fn perturbed(rng: &mut ChaCha8Rng, m: &Matrix) -> Matrix {
    m.map(|x| x + offset(rng))
}

fn min_abs(ms: &[Matrix]) -> f64 {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).fold(f64::INFINITY, |a, x| a.min(x.abs()))
}

fn diff(a: &Matrix, b: &Matrix) -> Matrix {
    a.zip_map(b, |x, y| x - y)
}

fn intr_row(k: &WeakPerspectiveIntrinsics) -> Matrix {
    let t = k.translation();
    Matrix::from_rows(&[[k.scale(), t[0], t[1]]])
}

fn intr_of(m: &Matrix, row: usize) -> WeakPerspectiveIntrinsics {
    WeakPerspectiveIntrinsics::new(m[(row, 0)].max(1e-6), [m[(row, 1)], m[(row, 2)]]).expect("positive scale")
}

/// Draws ground-truth bodies (master frame) from the pose prior.
struct Fixture {
    template: MeshTemplate,
    rig: CameraRig,
    rel: Vec<Rotation>,
    gt_intr: Vec<WeakPerspectiveIntrinsics>,
    rng: ChaCha8Rng,
}

impl Fixture {
    fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        let template = MeshTemplate::new(config.template())?;
        let rig = model_rig(config, config.n_views)?;
        let rel = relative_rotations(&rig);
        let gt_intr = rig.views().iter().map(|v| v.intrinsics.normalized(config.image_size, config.image_size)).collect();
        Ok(Self {
            template,
            rig,
            rel,
            gt_intr,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn body(&mut self) -> Result<PosedBody> {
        let p = sample_pose_with(&PoseConfig::default(), &mut self.rng);
        pose_body(&p, &self.template)
    }
}

fn joint_check(fx: &mut Fixture, points: usize) -> Result<TermCheck> {
    let mut fine = FdReport::default();
    let mut coarse = FdReport::default();
    let master = fx.rig.master();
    let k_gt = fx.gt_intr[master];
    let reg = fx.template.joint_regressor.clone();
    for _ in 0..points {
        let body = fx.body()?;
        let gt3 = body.joints.clone();
        let gt2 = project(&k_gt, &Rotation::IDENTITY, &gt3);
        let (j, v, kk) = loop {
            let j = perturbed(&mut fx.rng, &gt3);
            let v = perturbed(&mut fx.rng, &body.vertices);
            let kk = perturbed(&mut fx.rng, &intr_row(&k_gt));
            let k = intr_of(&kk, 0);
            let rj = regress_joints(&v, &reg)?;
            let residuals = [
                diff(&j, &gt3),
                diff(&project(&k, &Rotation::IDENTITY, &j), &gt2),
                diff(&rj, &gt3),
                diff(&project(&k, &Rotation::IDENTITY, &rj), &gt2),
            ];
            if min_abs(&residuals) >= KINK_MARGIN {
                break (j, v, kk);
            }
        };
        let f = |g: &mut Graph, x: &[Var]| {
            let r = g.constant(reg.clone());
            let rj = g.matmul(r, x[1]);
            let pred = JointPrediction {
                direct3d: x[0],
                direct2d: crate::geometry::project_var(g, x[2], &Rotation::IDENTITY, x[0]),
                regressed3d: rj,
                regressed2d: crate::geometry::project_var(g, x[2], &Rotation::IDENTITY, rj),
            };
            loss_joint(g, &pred, &gt3, &gt2, &[1.0; 4])
        };
        let inputs = [j, v, kk];
        fine = fine.merge(check_inputs(&inputs, FINE_STEP, f)?);
        coarse = coarse.merge(check_inputs(&inputs, NOMINAL_STEP, f)?);
    }
    Ok(TermCheck {
        term: "L_J".into(),
        entrywise: fine,
        normwise: Some(coarse),
        tolerance: LOSS_TOLERANCE,
    })
}

fn vertex_check(fx: &mut Fixture, points: usize) -> Result<TermCheck> {
    let mut fine = FdReport::default();
    let mut coarse = FdReport::default();
    for _ in 0..points {
        let body = fx.body()?;
        let gt = [
            body.vertices.clone(),
            body.vertices.select_rows(&fx.template.sub1_idx),
            body.vertices.select_rows(&fx.template.sub2_idx),
        ];
        let inputs: Vec<Matrix> = gt.iter().map(|m| perturbed(&mut fx.rng, m)).collect();
        let eta = [1.0, 0.7, 0.4];
        let f = |g: &mut Graph, x: &[Var]| loss_vertex(g, [x[0], x[1], x[2]], [&gt[0], &gt[1], &gt[2]], &eta);
        fine = fine.merge(check_inputs(&inputs, FINE_STEP, f)?);
        coarse = coarse.merge(check_inputs(&inputs, NOMINAL_STEP, f)?);
    }
    Ok(TermCheck {
        term: "L_V".into(),
        entrywise: fine,
        normwise: Some(coarse),
        tolerance: LOSS_TOLERANCE,
    })
}

fn align_check(fx: &mut Fixture, points: usize) -> Result<TermCheck> {
    let mut fine = FdReport::default();
    let mut coarse = FdReport::default();
    let n = fx.rig.len();
    let gt_intr = Matrix::from_rows(&fx.gt_intr.iter().map(|k| intr_row(k).into_vec()).collect::<Vec<_>>());
    for _ in 0..points {
        let body = fx.body()?;
        let gt3: Vec<Matrix> = fx.rel.iter().map(|r| rotate_points(r, &body.joints)).collect();
        let gt2: Vec<Matrix> = (0..n).map(|i| project(&fx.gt_intr[i], &Rotation::IDENTITY, &gt3[i])).collect();
        let (p, kk) = loop {
            let p = perturbed(&mut fx.rng, &body.joints);
            let kk = perturbed(&mut fx.rng, &gt_intr);
            let mut residuals = Vec::new();
            for i in 0..n {
                let r3 = rotate_points(&fx.rel[i], &p);
                residuals.push(diff(&project(&intr_of(&kk, i), &Rotation::IDENTITY, &r3), &gt2[i]));
                residuals.push(diff(&r3, &gt3[i]));
            }
            if min_abs(&residuals) >= KINK_MARGIN {
                break (p, kk);
            }
        };
        let rig = relative_rig(&fx.rig, &fx.rel);
        let f = |g: &mut Graph, x: &[Var]| {
            let per_view = broadcast_views_var(g, x[0], x[1], &rig);
            loss_align(g, &per_view, &gt2, &gt3, true)
        };
        let inputs = [p, kk];
        fine = fine.merge(check_inputs(&inputs, FINE_STEP, f)?);
        coarse = coarse.merge(check_inputs(&inputs, NOMINAL_STEP, f)?);
    }
    Ok(TermCheck {
        term: "L_Align".into(),
        entrywise: fine,
        normwise: Some(coarse),
        tolerance: LOSS_TOLERANCE,
    })
}

/// The rig with rotations taken relative to the master view.
fn relative_rig(rig: &CameraRig, rel: &[Rotation]) -> CameraRig {
    let views = rig
        .views()
        .iter()
        .zip(rel)
        .map(|(v, r)| crate::geometry::CameraView { rotation: *r, ..*v })
        .collect();
    CameraRig::new(views, rig.master()).expect("same layout as a valid rig")
}

fn smooth_check(fx: &mut Fixture, points: usize) -> Result<TermCheck> {
    let mut fine = FdReport::default();
    let mut coarse = FdReport::default();
    let terms = SmoothTerms::new(&fx.template);
    for _ in 0..points {
        let body = fx.body()?;
        let gt = body.vertices.clone();
        let rng = &mut fx.rng;
        let v = gt.map(|x| x + rng.gen_range(-0.02..0.02));
        let f = |g: &mut Graph, x: &[Var]| loss_smooth(g, x[0], &gt, &terms);
        let inputs = [v];
        fine = fine.merge(check_inputs(&inputs, FINE_STEP, f)?);
        coarse = coarse.merge(check_inputs(&inputs, NOMINAL_STEP, f)?);
    }
    Ok(TermCheck {
        term: "L_Smooth".into(),
        entrywise: fine,
        normwise: Some(coarse),
        tolerance: LOSS_TOLERANCE,
    })
}

/// Sampled parameters of a fresh model: one random entry per tensor plus
/// `extra` more, against the full training objective in eval mode.
fn end_to_end_check(config: &TrainConfig, extra: usize, seed: u64) -> Result<TermCheck> {
    let trainer = Trainer::new(config.clone())?;
    let template = &trainer.model.template;
    let full_rig = model_rig(config, config.max_views)?;
    let gen = GenConfig {
        pose: PoseConfig::default(),
        render: RenderConfig {
            height: config.image_size,
            width: config.image_size,
            ..RenderConfig::default()
        },
    };
    let sample = generate_sample(0, seed, &full_rig, template, &gen)?;
    let cut = first_views(&[&sample], config.n_views);
    let refs = [&cut[0]];
    let rig = trainer.rig();
    let batch = Batch::new(&refs, rig)?;
    let targets = Targets::new(&refs, rig, template)?;
    let weights = config.weights();
    let store = &trainer.store;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut idx: Vec<usize> = store.ids().map(|id| rng.gen_range(store.range(id))).collect();
    idx.extend((0..extra).map(|_| rng.gen_range(0..store.len())));
    let smooth = SmoothTerms::new(template);
    let report = check_params(store, &idx, E2E_STEP, |g, s| {
        let f = trainer.model.forward(g, s, &batch, &mut Mode::Eval)?;
        Ok(trainer.model.loss(g, &f, &targets, rig, &weights, config.alignment, Some(&smooth))?.0)
    })?;
    Ok(TermCheck {
        term: "end_to_end".into(),
        entrywise: report,
        normwise: None,
        tolerance: E2E_TOLERANCE,
    })
}

pub fn gradcheck(config: &TrainConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let mut fx = Fixture::new(config, opts.seed)?;
    let terms = vec![
        joint_check(&mut fx, opts.points)?,
        vertex_check(&mut fx, opts.points)?,
        align_check(&mut fx, opts.points)?,
        smooth_check(&mut fx, opts.points)?,
        end_to_end_check(config, opts.extra_params, opts.seed)?,
    ];
    Ok(GradcheckReport { terms })
}
