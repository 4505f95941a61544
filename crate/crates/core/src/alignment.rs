//! Cross-view alignment head: master-view 3D joints and per-view
//! weak-perspective intrinsics predicted from the fused sequence, then
//! broadcast into every view with the known rig rotations.
//!
//! Intrinsics predicted here live in normalised image units (see
//! [`WeakPerspectiveIntrinsics::normalized`]).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{project, project_var, rotate_points, rotate_var, CameraRig, WeakPerspectiveIntrinsics};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Added after the softplus so predicted scales stay strictly positive.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Initial predicted scale: a body of about 1.8 m fills roughly 70% of the
/// normalised frame.
pub const INITIAL_SCALE: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct AlignmentHead {
    pub pose_hidden: Linear,
    pub pose_out: Linear,
    pub cam_hidden: Linear,
    pub cam_out: Linear,
}

fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

impl AlignmentHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        let head = Self {
            pose_hidden: Linear::new(store, "head.pose1", d, d, true, rng),
            pose_out: Linear::new(store, "head.pose2", d, 3, true, rng),
            cam_hidden: Linear::new(store, "head.cam1", d, d, true, rng),
            cam_out: Linear::new(store, "head.cam2", d, 3, true, rng),
        };
        let b = head.cam_out.b.expect("camera output has a bias");
        store.set(b, &Matrix::from_rows(&[[softplus_inverse(INITIAL_SCALE - SCALE_FLOOR), 0.0, 0.0]]));
        head
    }
}

/// Predicts `p3d` (`batch·K × 3`, master frame) from the master view's `K`
/// rows of `z`, and intrinsics (`batch·N × 3` rows of `(s, tx, ty)`) from
/// each view group's mean token.
pub fn predict_master(
    g: &mut Graph,
    store: &ParamStore,
    head: &AlignmentHead,
    z: Var,
    n_views: usize,
    master: usize,
    n_joints: usize,
    batch: usize,
) -> Result<(Var, Var)> {
    let rows = g.shape(z).0;
    if rows != batch * n_views * n_joints || master >= n_views {
        return Err(Error::shape(
            "predict_master",
            format!("{} rows with master < {n_views}", batch * n_views * n_joints),
            format!("{rows} rows, master {master}"),
        ));
    }
    let idx = (0..batch * n_joints).map(|r| ((r / n_joints) * n_views + master) * n_joints + r % n_joints).collect();
    let zm = g.gather_rows(z, idx);
    let h = head.pose_hidden.forward(g, store, zm);
    let h = g.silu(h);
    let p3d = head.pose_out.forward(g, store, h);

    let w = 1.0 / n_joints as f64;
    let pool = Matrix::from_fn(batch * n_views, rows, |gi, r| if r / n_joints == gi { w } else { 0.0 });
    let pool = g.constant(pool);
    let pooled = g.matmul(pool, z);
    let h = head.cam_hidden.forward(g, store, pooled);
    let h = g.silu(h);
    let raw = head.cam_out.forward(g, store, h);
    let s = g.slice_cols(raw, 0, 1);
    let s = g.softplus(s);
    let floor = g.constant(Matrix::filled(1, 1, SCALE_FLOOR));
    let s = g.add_row(s, floor);
    let t = g.slice_cols(raw, 1, 2);
    Ok((p3d, g.concat_cols(&[s, t])))
}

/// Master-view pose broadcast to every view.
#[derive(Clone, Debug, PartialEq)]
pub struct InterPose {
    pub p3d_master: Matrix,
    pub intrinsics: Vec<WeakPerspectiveIntrinsics>,
    /// Per view `(p2d: K × 2, p3d: K × 3)`.
    pub per_view: Vec<(Matrix, Matrix)>,
}

impl InterPose {
    /// Largest violation of the broadcast relations under `rig`.
    pub fn consistency_error(&self, rig: &CameraRig) -> f64 {
        let mut e = 0.0f64;
        for (i, view) in rig.views().iter().enumerate() {
            let (p2, p3) = &self.per_view[i];
            e = e.max(rotate_points(&view.rotation, &self.p3d_master).max_abs_diff(p3));
            e = e.max(project(&self.intrinsics[i], &view.rotation, &self.p3d_master).max_abs_diff(p2));
        }
        e
    }
}

pub fn broadcast_views(
    p3d_master: &Matrix,
    intrinsics: &[WeakPerspectiveIntrinsics],
    rig: &CameraRig,
) -> Result<InterPose> {
    if intrinsics.len() != rig.len() {
        return Err(Error::shape("broadcast_views", format!("{} intrinsics", rig.len()), format!("{}", intrinsics.len())));
    }
    let per_view = rig
        .views()
        .iter()
        .zip(intrinsics)
        .map(|(v, k)| (project(k, &v.rotation, p3d_master), rotate_points(&v.rotation, p3d_master)))
        .collect();
    let inter = InterPose {
        p3d_master: p3d_master.clone(),
        intrinsics: intrinsics.to_vec(),
        per_view,
    };
    debug_assert!(inter.consistency_error(rig) == 0.0);
    Ok(inter)
}

/// Tape version of [`broadcast_views`] for one sample: `p3d` is `K × 3`,
/// `intrinsics` is `N × 3`. Returns per-view `(p2d, p3d)` nodes.
pub fn broadcast_views_var(g: &mut Graph, p3d: Var, intrinsics: Var, rig: &CameraRig) -> Vec<(Var, Var)> {
    rig.views()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let k = g.slice_rows(intrinsics, i, 1);
            (project_var(g, k, &v.rotation, p3d), rotate_var(g, &v.rotation, p3d))
        })
        .collect()
}

/// Reads `N × 3` intrinsics rows back into typed values.
pub fn intrinsics_from_rows(m: &Matrix) -> Result<Vec<WeakPerspectiveIntrinsics>> {
    (0..m.rows())
        .map(|i| WeakPerspectiveIntrinsics::new(m[(i, 0)], [m[(i, 1)], m[(i, 2)]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraView, Rotation};
    use crate::gradcheck::check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, AlignmentHead) {
        let mut store = ParamStore::new();
        let head = AlignmentHead::new(&mut store, 16, &mut ChaCha8Rng::seed_from_u64(1));
        (store, head)
    }

    fn z(rng: &mut ChaCha8Rng, rows: usize) -> Matrix {
        Matrix::from_fn(rows, 16, |_, _| rng.gen_range(-2.0..2.0))
    }

    fn random_rig(rng: &mut ChaCha8Rng, n: usize) -> CameraRig {
        let views = (0..n)
            .map(|i| CameraView {
                view_id: i,
                rotation: if i == 0 {
                    Rotation::IDENTITY
                } else {
                    Rotation::from_axis_angle([rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                },
                intrinsics: WeakPerspectiveIntrinsics::new(1.0, [0.0, 0.0]).unwrap(),
            })
            .collect();
        CameraRig::new(views, 0).unwrap()
    }

    #[test]
    fn constant_head_outputs_bias() {
        let (mut store, head) = setup();
        store.set(head.pose_out.w, &Matrix::zeros(16, 3));
        let b = Matrix::from_rows(&[[0.1, -0.2, 0.3]]);
        store.set(head.pose_out.b.unwrap(), &b);
        let mut g = Graph::new();
        let zv = g.constant(z(&mut ChaCha8Rng::seed_from_u64(2), 2 * 3 * 14));
        let (p3d, intr) = predict_master(&mut g, &store, &head, zv, 3, 1, 14, 2).unwrap();
        assert_eq!(g.shape(p3d), (28, 3));
        assert_eq!(g.shape(intr), (6, 3));
        for r in 0..28 {
            assert_eq!(g.value(p3d).row(r), b.row(0));
        }
    }

    #[test]
    fn scale_is_positive() {
        let (mut store, head) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Push the scale logit far negative.
        store.set(head.cam_out.b.unwrap(), &Matrix::from_rows(&[[-800.0, 0.0, 0.0]]));
        let mut g = Graph::new();
        let zv = g.constant(z(&mut rng, 4 * 14));
        let (_, intr) = predict_master(&mut g, &store, &head, zv, 4, 0, 14, 1).unwrap();
        for r in 0..4 {
            assert!(g.value(intr)[(r, 0)] > 0.0);
        }
        assert!(intrinsics_from_rows(g.value(intr)).is_ok());
    }

    #[test]
    fn pose_norm_gradient() {
        let (store, head) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zm = z(&mut rng, 2 * 14);
        let idx: Vec<usize> = (0..store.len()).step_by(7).collect();
        let r = check_params(&store, &idx, 1e-5, |g, s| {
            let zv = g.constant(zm.clone());
            let (p3d, intr) = predict_master(g, s, &head, zv, 2, 1, 14, 1)?;
            let sq = g.square(p3d);
            let a = g.sum(sq);
            let b = g.sum(intr);
            Ok(g.add(a, b))
        })
        .unwrap();
        assert!(r.max_rel < 1e-3, "{r:?}");
    }

    #[test]
    fn identity_rig_projects_xy() {
        let rig = CameraRig::new(
            (0..3)
                .map(|i| CameraView {
                    view_id: i,
                    rotation: Rotation::IDENTITY,
                    intrinsics: WeakPerspectiveIntrinsics::new(1.0, [0.0, 0.0]).unwrap(),
                })
                .collect(),
            0,
        )
        .unwrap();
        let p = Matrix::from_fn(14, 3, |r, c| (r * 3 + c) as f64 * 0.01);
        let k = vec![WeakPerspectiveIntrinsics::new(1.0, [0.0, 0.0]).unwrap(); 3];
        let inter = broadcast_views(&p, &k, &rig).unwrap();
        for (p2, p3) in &inter.per_view {
            assert_eq!(*p3, p);
            assert_eq!(*p2, Matrix::from_fn(14, 2, |r, c| p[(r, c)]));
        }
    }

    #[test]
    fn broadcast_invariants_on_random_rigs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rig = random_rig(&mut rng, 4);
            let p = Matrix::from_fn(14, 3, |_, _| rng.gen_range(-1.0..1.0));
            let k: Vec<_> = (0..4)
                .map(|_| WeakPerspectiveIntrinsics::new(rng.gen_range(0.1..2.0), [rng.gen(), rng.gen()]).unwrap())
                .collect();
            let inter = broadcast_views(&p, &k, &rig).unwrap();
            assert!(inter.consistency_error(&rig) < 1e-6);
            assert_eq!(inter.per_view[rig.master()].1, p);

            // The tape version agrees with the plain one.
            let mut g = Graph::new();
            let pv = g.constant(p.clone());
            let kv = g.constant(Matrix::from_fn(4, 3, |i, c| match c {
                0 => k[i].scale(),
                _ => k[i].translation()[c - 1],
            }));
            for (i, (p2, p3)) in broadcast_views_var(&mut g, pv, kv, &rig).into_iter().enumerate() {
                assert!(g.value(p2).max_abs_diff(&inter.per_view[i].0) < 1e-12);
                assert!(g.value(p3).max_abs_diff(&inter.per_view[i].1) < 1e-12);
            }
        }
    }
}
