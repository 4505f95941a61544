//! Camera models, view transforms, weak-perspective projection and
//! similarity Procrustes alignment.
//!
//! Point sets are `K × 3` [`Matrix`] values, one point per row. Projected
//! points are `K × 2`.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const ORTHO_TOL: f64 = 1e-6;

/// A proper rotation (`mᵀm = I`, `det m = +1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Validates orthonormality and orientation.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let n = Matrix3::from_fn(|r, c| m[r][c]);
        let err = (n.transpose() * n - Matrix3::identity()).abs().max();
        let det = n.determinant();
        if err > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Config(format!(
                "not a rotation: orthogonality error {err:.3e}, det {det:.6}"
            )));
        }
        Ok(Self { m })
    }

    fn from_na(n: &Matrix3<f64>) -> Self {
        Self {
            m: [
                [n[(0, 0)], n[(0, 1)], n[(0, 2)]],
                [n[(1, 0)], n[(1, 1)], n[(1, 2)]],
                [n[(2, 0)], n[(2, 1)], n[(2, 2)]],
            ],
        }
    }

    fn to_na(self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    /// Rodrigues' formula for an axis-angle vector (angle = norm, radians).
    pub fn from_axis_angle(w: [f64; 3]) -> Self {
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if theta < 1e-12 {
            return Self::IDENTITY;
        }
        let k = [w[0] / theta, w[1] / theta, w[2] / theta];
        let (s, c) = theta.sin_cos();
        let v = 1.0 - c;
        Self {
            m: [
                [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
                [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
                [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
            ],
        }
    }

    pub fn about_x(a: f64) -> Self {
        Self::from_axis_angle([a, 0.0, 0.0])
    }

    pub fn about_y(a: f64) -> Self {
        Self::from_axis_angle([0.0, a, 0.0])
    }

    pub fn about_z(a: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, a])
    }

    /// World-to-camera rotation for a camera on a sphere around the origin,
    /// looking at it, with camera axes x right, y down, z forward.
    pub fn look_at_origin(azimuth: f64, elevation: f64) -> Self {
        let (sa, ca) = azimuth.sin_cos();
        let (se, ce) = elevation.sin_cos();
        let pos = Vector3::new(sa * ce, se, ca * ce);
        let z = -pos;
        let x = z.cross(&Vector3::y()).normalize();
        let y = z.cross(&x);
        Self::from_na(&Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.m)
    }

    pub fn transpose(&self) -> Self {
        Self::from_na(&self.to_na().transpose())
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::from_na(&(self.to_na() * other.to_na()))
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ]
    }
}

/// Weak-perspective intrinsics: `uv = s · xy + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakPerspectiveIntrinsics {
    s: f64,
    t: [f64; 2],
}

impl WeakPerspectiveIntrinsics {
    pub fn new(s: f64, t: [f64; 2]) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() || !t.iter().all(|x| x.is_finite()) {
            return Err(Error::Config(format!("invalid intrinsics s={s}, t={t:?}")));
        }
        Ok(Self { s, t })
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn translation(&self) -> [f64; 2] {
        self.t
    }

    /// Maps pixel intrinsics into the normalised image frame where the
    /// image spans `[-1, 1]` on both axes.
    pub fn normalized(&self, width: usize, height: usize) -> Self {
        let (hw, hh) = (width as f64 / 2.0, height as f64 / 2.0);
        debug_assert_eq!(width, height, "normalisation assumes square images");
        Self {
            s: self.s / hw,
            t: [(self.t[0] - hw) / hw, (self.t[1] - hh) / hh],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub view_id: usize,
    pub rotation: Rotation,
    pub intrinsics: WeakPerspectiveIntrinsics,
}

/// `N` cameras sharing an origin. Rotations map master-frame coordinates into
/// each view's frame, so the master view's rotation is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    views: Vec<CameraView>,
    master: usize,
}

impl CameraRig {
    pub fn new(views: Vec<CameraView>, master: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Config("camera rig needs at least one view".into()));
        }
        if master >= views.len() {
            return Err(Error::Config(format!(
                "master view {master} out of range for {} views",
                views.len()
            )));
        }
        let mut ids: Vec<usize> = views.iter().map(|v| v.view_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != views.len() || ids.iter().any(|&i| i >= views.len()) {
            return Err(Error::Config("view ids must be unique and in [0, N)".into()));
        }
        Ok(Self { views, master })
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn view(&self, i: usize) -> &CameraView {
        &self.views[i]
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn master(&self) -> usize {
        self.master
    }

    /// The first `n` views (master must be among them).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.views.len() || self.master >= n {
            return Err(Error::Config(format!(
                "cannot keep {n} of {} views with master {}",
                self.views.len(),
                self.master
            )));
        }
        Self::new(self.views[..n].to_vec(), self.master)
    }

    /// Reorders views: new position `j` holds old view `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.views.len() {
            return Err(Error::shape("CameraRig::permuted", format!("{}", self.views.len()), format!("{}", order.len())));
        }
        let views = order.iter().map(|&o| self.views[o]).collect();
        let master = order
            .iter()
            .position(|&o| o == self.master)
            .ok_or_else(|| Error::Config("permutation drops the master view".into()))?;
        Self::new(views, master)
    }
}

/// Applies `rotation` to every row of `points`.
pub fn rotate_points(rotation: &Rotation, points: &Matrix) -> Matrix {
    assert_eq!(points.cols(), 3, "rotate_points expects K x 3");
    let mut out = Matrix::zeros(points.rows(), 3);
    for k in 0..points.rows() {
        let p = points.row(k);
        out.row_mut(k).copy_from_slice(&rotation.apply([p[0], p[1], p[2]]));
    }
    out
}

/// Weak-perspective projection: row `k` is `s · (R p_k)_xy + t`.
pub fn project(intrinsics: &WeakPerspectiveIntrinsics, rotation: &Rotation, points: &Matrix) -> Matrix {
    assert_eq!(points.cols(), 3, "project expects K x 3");
    let (s, t) = (intrinsics.s, intrinsics.t);
    let mut out = Matrix::zeros(points.rows(), 2);
    for k in 0..points.rows() {
        let p = points.row(k);
        let q = rotation.apply([p[0], p[1], p[2]]);
        out[(k, 0)] = s * q[0] + t[0];
        out[(k, 1)] = s * q[1] + t[1];
    }
    out
}

/// Jacobian of one projected point w.r.t. its 3D point; identical for every
/// point because the map is affine.
pub fn project_jacobian(intrinsics: &WeakPerspectiveIntrinsics, rotation: &Rotation) -> [[f64; 3]; 2] {
    let m = rotation.m;
    let s = intrinsics.s;
    [
        [s * m[0][0], s * m[0][1], s * m[0][2]],
        [s * m[1][0], s * m[1][1], s * m[1][2]],
    ]
}

/// Rotates tape points (`K × 3`) by a fixed rotation.
pub fn rotate_var(g: &mut Graph, rotation: &Rotation, points: Var) -> Var {
    if *rotation == Rotation::IDENTITY {
        return points;
    }
    let rt = g.constant(rotation.as_matrix().transpose());
    g.matmul(points, rt)
}

/// Differentiable projection with intrinsics on the tape.
///
/// `intrinsics` is a `1 × 3` node `(s, tx, ty)`.
pub fn project_var(g: &mut Graph, intrinsics: Var, rotation: &Rotation, points: Var) -> Var {
    let rotated = rotate_var(g, rotation, points);
    let xy = g.slice_cols(rotated, 0, 2);
    let s = g.slice_cols(intrinsics, 0, 1);
    let t = g.slice_cols(intrinsics, 1, 2);
    let k = g.shape(points).0;
    let s_col = g.gather_rows(s, vec![0; k]);
    let s_rows = g.concat_cols(&[s_col, s_col]);
    let scaled = g.mul(xy, s_rows);
    g.add_row(scaled, t)
}

/// Optimal similarity transform `(s, R, t)` minimising `‖s·R·pred + t − gt‖²`.
#[derive(Clone, Debug)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: [f64; 3],
    pub aligned: Matrix,
}

fn centroid(p: &Matrix) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for k in 0..p.rows() {
        c += Vector3::new(p[(k, 0)], p[(k, 1)], p[(k, 2)]);
    }
    c / p.rows() as f64
}

/// Closed-form similarity Procrustes (Umeyama) with reflection correction.
pub fn procrustes_align(pred: &Matrix, gt: &Matrix) -> Result<Similarity> {
    if pred.shape() != gt.shape() || pred.cols() != 3 {
        return Err(Error::shape(
            "procrustes_align",
            format!("matching K x 3 ({:?})", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let k = pred.rows();
    if k < 3 {
        return Err(Error::shape("procrustes_align", "K >= 3", format!("K = {k}")));
    }
    let (mu_p, mu_g) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let (mut var_p, mut var_g) = (0.0, 0.0);
    for i in 0..k {
        let p = Vector3::new(pred[(i, 0)], pred[(i, 1)], pred[(i, 2)]) - mu_p;
        let q = Vector3::new(gt[(i, 0)], gt[(i, 1)], gt[(i, 2)]) - mu_g;
        cov += q * p.transpose();
        var_p += p.norm_squared();
        var_g += q.norm_squared();
    }
    if var_g <= f64::EPSILON * k as f64 {
        return Err(Error::DegenerateCloud);
    }
    if var_p <= f64::EPSILON * k as f64 {
        // Prediction collapsed to a point: best fit is the gt centroid.
        let t = [mu_g.x, mu_g.y, mu_g.z];
        let aligned = Matrix::from_fn(k, 3, |_, c| t[c]);
        return Ok(Similarity {
            scale: 0.0,
            rotation: Rotation::IDENTITY,
            translation: t,
            aligned,
        });
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        d.z = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = svd
        .singular_values
        .iter()
        .zip(d.iter())
        .map(|(s, d)| s * d)
        .sum::<f64>()
        / var_p;
    let t = mu_g - scale * r * mu_p;
    let rotation = Rotation::from_na(&r);
    let mut aligned = Matrix::zeros(k, 3);
    for i in 0..k {
        let q = rotation.apply([pred[(i, 0)], pred[(i, 1)], pred[(i, 2)]]);
        for c in 0..3 {
            aligned[(i, c)] = scale * q[c] + t[c];
        }
    }
    Ok(Similarity {
        scale,
        rotation,
        translation: [t.x, t.y, t.z],
        aligned,
    })
}
