//! Training losses on the tape and the evaluation metrics.
//!
//! 2D quantities passed to the losses are expected in normalised image
//! units; see [`normalize_pixels`].

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::procrustes_align;
use crate::mesh::{face_normals, MeshTemplate};
use crate::tensor::Matrix;

/// Maps pixel coordinates into `[-1, 1]`: `u ↦ (u − W/2) / (W/2)`.
pub fn normalize_pixels(p: &Matrix, width: usize, height: usize) -> Matrix {
    let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
    Matrix::from_fn(p.rows(), 2, |r, c| if c == 0 { (p[(r, 0)] - hw) / hw } else { (p[(r, 1)] - hh) / hh })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    /// Direct 2D, direct 3D, regressed 2D, regressed 3D joint terms.
    pub lambda: [f64; 4],
    /// Full, sub1 and sub2 vertex terms.
    pub eta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            mu: 0.0,
            lambda: [1.0; 4],
            eta: [1.0; 3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.mu]
            .into_iter()
            .chain(self.lambda)
            .chain(self.eta);
        for w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            alpha: self.alpha * c,
            beta: self.beta * c,
            gamma: self.gamma * c,
            mu: self.mu * c,
            ..*self
        }
    }
}

fn check(g: &Graph, v: Var, gt: &Matrix, op: &'static str) -> Result<()> {
    if g.shape(v) != gt.shape() {
        return Err(Error::shape(op, format!("{:?}", gt.shape()), format!("{:?}", g.shape(v))));
    }
    Ok(())
}

/// `Σ_rows ‖pred_r − gt_r‖₁ / rows`.
fn l1_rows(g: &mut Graph, pred: Var, gt: &Matrix) -> Var {
    let t = g.constant(gt.clone());
    let d = g.sub(pred, t);
    let a = g.abs(d);
    let s = g.sum(a);
    g.scale(s, 1.0 / gt.rows().max(1) as f64)
}

/// Master-view joint predictions: direct from the decoder, and regressed
/// from the predicted full mesh; 2D via the estimated intrinsics.
#[derive(Clone, Copy, Debug)]
pub struct JointPrediction {
    pub direct3d: Var,
    pub direct2d: Var,
    pub regressed3d: Var,
    pub regressed2d: Var,
}

/// Mean over joints of the λ-weighted L1 errors of the four joint terms.
pub fn loss_joint(g: &mut Graph, pred: &JointPrediction, gt3d: &Matrix, gt2d: &Matrix, lambda: &[f64; 4]) -> Result<Var> {
    let terms = [
        (pred.direct2d, gt2d),
        (pred.direct3d, gt3d),
        (pred.regressed2d, gt2d),
        (pred.regressed3d, gt3d),
    ];
    let mut total: Option<Var> = None;
    for ((p, gt), &w) in terms.iter().zip(lambda) {
        check(g, *p, gt, "loss_joint")?;
        let l = l1_rows(g, *p, gt);
        let l = g.scale(l, w);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    Ok(total.expect("four terms"))
}

/// η-weighted per-vertex L1 at the full, sub1 and sub2 resolutions.
pub fn loss_vertex(g: &mut Graph, pred: [Var; 3], gt: [&Matrix; 3], eta: &[f64; 3]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((p, gt), &w) in pred.iter().zip(gt).zip(eta) {
        check(g, *p, gt, "loss_vertex")?;
        let l = l1_rows(g, *p, gt);
        let l = g.scale(l, w);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    Ok(total.expect("three terms"))
}

/// `Σ_views Σ_joints (‖p2d − gt2d‖₁ + ‖p3d − gt3d‖₁) / (N·K)`. With
/// `use_2d = false` the 2D term is dropped (3D-only alignment).
pub fn loss_align(
    g: &mut Graph,
    per_view: &[(Var, Var)],
    gt2d: &[Matrix],
    gt3d: &[Matrix],
    use_2d: bool,
) -> Result<Var> {
    if per_view.len() != gt2d.len() || per_view.len() != gt3d.len() || per_view.is_empty() {
        return Err(Error::shape(
            "loss_align",
            format!("{} views of ground truth", per_view.len()),
            format!("{} / {}", gt2d.len(), gt3d.len()),
        ));
    }
    let k = gt3d[0].rows();
    let mut parts = Vec::new();
    for (i, &(p2, p3)) in per_view.iter().enumerate() {
        check(g, p3, &gt3d[i], "loss_align")?;
        let t = g.constant(gt3d[i].clone());
        let d = g.sub(p3, t);
        parts.push(g.abs(d));
        if use_2d {
            check(g, p2, &gt2d[i], "loss_align")?;
            let t = g.constant(gt2d[i].clone());
            let d = g.sub(p2, t);
            parts.push(g.abs(d));
        }
    }
    let mut sum = g.sum(parts[0]);
    for &p in &parts[1..] {
        let s = g.sum(p);
        sum = g.add(sum, s);
    }
    Ok(g.scale(sum, 1.0 / (per_view.len() * k) as f64))
}

/// Topology needed by the smoothness loss, precomputed from a template.
#[derive(Clone, Debug)]
pub struct SmoothTerms {
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    /// Dense `I − D⁻¹A`.
    pub laplacian: Matrix,
}

impl SmoothTerms {
    pub fn new(template: &MeshTemplate) -> Self {
        Self {
            faces: template.faces.clone(),
            edges: template.edges.clone(),
            laplacian: template.laplacian_matrix(),
        }
    }

    /// The three undirected vertex pairs of each face, face-major.
    pub fn face_pairs(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut a = Vec::with_capacity(self.faces.len() * 3);
        let mut b = Vec::with_capacity(self.faces.len() * 3);
        let mut face = Vec::with_capacity(self.faces.len() * 3);
        for (i, f) in self.faces.iter().enumerate() {
            for (x, y) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                a.push(x);
                b.push(y);
                face.push(i);
            }
        }
        (a, b, face)
    }
}

/// Normal consistency against ground-truth face normals, edge-length
/// agreement and the Laplacian of the offsets `δ = v − v̂`, as plain sums.
pub fn loss_smooth(g: &mut Graph, v: Var, gt: &Matrix, terms: &SmoothTerms) -> Result<Var> {
    check(g, v, gt, "loss_smooth")?;
    let normals = face_normals(gt, &terms.faces)?;
    let (a, b, face) = terms.face_pairs();
    let n = g.constant(normals.select_rows(&face));
    let va = g.gather_rows(v, a);
    let vb = g.gather_rows(v, b);
    let e = g.sub(va, vb);
    let dots = g.mul(e, n);
    let dots = g.row_sum(dots);
    let sq = g.square(dots);
    let normal_term = g.sum(sq);

    let ea: Vec<usize> = terms.edges.iter().map(|e| e[0]).collect();
    let eb: Vec<usize> = terms.edges.iter().map(|e| e[1]).collect();
    let gt_len = Matrix::from_fn(terms.edges.len(), 1, |i, _| {
        let (p, q) = (gt.row(ea[i]), gt.row(eb[i]));
        p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    });
    let pa = g.gather_rows(v, ea);
    let pb = g.gather_rows(v, eb);
    let d = g.sub(pa, pb);
    let len = g.row_norm(d);
    let gl = g.constant(gt_len);
    let diff = g.sub(len, gl);
    let sq = g.square(diff);
    let edge_term = g.sum(sq);

    let gtv = g.constant(gt.clone());
    let delta = g.sub(v, gtv);
    let lap = g.constant(terms.laplacian.clone());
    let off = g.matmul(lap, delta);
    let sq = g.square(off);
    let lap_term = g.sum(sq);

    let s = g.add(normal_term, edge_term);
    Ok(g.add(s, lap_term))
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub joint: f64,
    pub vertex: f64,
    pub align: f64,
    pub smooth: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub parts: LossParts,
}

pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [("joint", parts.joint), ("vertex", parts.vertex), ("align", parts.align), ("smooth", parts.smooth)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: format!("{name} loss") });
        }
    }
    let total = w.alpha * parts.joint + w.beta * parts.vertex + w.gamma * parts.align + w.mu * parts.smooth;
    Ok(LossReport { total, parts })
}

/// Tape version of the weighted sum; terms whose weight is zero are
/// skipped (and may be `None`).
pub fn weighted_total(g: &mut Graph, terms: [(Option<Var>, f64); 4]) -> Var {
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let Some(v) = v else { continue };
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    total.unwrap_or_else(|| g.constant(Matrix::zeros(1, 1)))
}

fn mean_distance(pred: &Matrix, gt: &Matrix) -> f64 {
    assert_eq!(pred.shape(), gt.shape(), "metric shape mismatch");
    if pred.rows() == 0 {
        return 0.0;
    }
    let sum: f64 = (0..pred.rows())
        .map(|r| pred.row(r).iter().zip(gt.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum();
    sum / pred.rows() as f64
}

/// Mean per-joint position error, in the input's length unit.
pub fn mpjpe(pred: &Matrix, gt: &Matrix) -> f64 {
    mean_distance(pred, gt)
}

/// MPJPE after optimal similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &Matrix, gt: &Matrix) -> Result<f64> {
    Ok(mean_distance(&procrustes_align(pred, gt)?.aligned, gt))
}

/// Mean per-vertex error, in the input's length unit.
pub fn mpve(pred: &Matrix, gt: &Matrix) -> f64 {
    mean_distance(pred, gt)
}
