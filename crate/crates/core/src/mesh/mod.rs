//! Body mesh template, topology queries, joint regression and two-stage
//! coarse-to-fine upsampling.

pub mod obj;
pub mod skeleton;
mod template;

pub use template::{MeshTemplate, TemplateConfig, RING_SIDES};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Posed vertices and joints in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedBody {
    pub vertices: Matrix,
    pub joints: Matrix,
}

impl PosedBody {
    pub fn is_finite(&self) -> bool {
        self.vertices.is_finite() && self.joints.is_finite()
    }
}

/// Unique undirected edges `(a, b)` with `a < b`, sorted.
pub fn edges_from_faces(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            set.insert([a.min(b), a.max(b)]);
        }
    }
    set.into_iter().collect()
}

/// Sorted adjacency sets `G_i`.
pub fn neighborhoods_from_faces(m: usize, faces: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut sets = vec![BTreeSet::new(); m];
    for e in edges_from_faces(faces) {
        sets[e[0]].insert(e[1]);
        sets[e[1]].insert(e[0]);
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

/// Unit normals by right-hand rule over each face's winding.
pub fn face_normals(vertices: &Matrix, faces: &[[usize; 3]]) -> Result<Matrix> {
    let mut out = Matrix::zeros(faces.len(), 3);
    for (i, f) in faces.iter().enumerate() {
        let p = |k: usize| {
            let r = vertices.row(f[k]);
            [r[0], r[1], r[2]]
        };
        let (a, b, c) = (p(0), p(1), p(2));
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if !(len > 1e-12) {
            return Err(Error::DegenerateFace { face: i });
        }
        out.row_mut(i).copy_from_slice(&[n[0] / len, n[1] / len, n[2] / len]);
    }
    Ok(out)
}

pub fn edge_lengths(vertices: &Matrix, edges: &[[usize; 2]]) -> Vec<f64> {
    edges
        .iter()
        .map(|e| {
            let (a, b) = (vertices.row(e[0]), vertices.row(e[1]));
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .collect()
}

/// `J = regressor · V`.
pub fn regress_joints(vertices: &Matrix, joint_regressor: &Matrix) -> Result<Matrix> {
    if vertices.rows() != joint_regressor.cols() {
        return Err(Error::shape(
            "regress_joints",
            format!("{} vertices", joint_regressor.cols()),
            format!("{}", vertices.rows()),
        ));
    }
    Ok(joint_regressor.matmul(vertices))
}

/// Coarse-to-fine: `v_sub1 = up2 · v_sub2`, `v_full = up1 · v_sub1`.
pub fn upsample(v_sub2: &Matrix, template: &MeshTemplate) -> Result<(Matrix, Matrix)> {
    if v_sub2.rows() != template.up2.cols() {
        return Err(Error::shape(
            "upsample",
            format!("{} coarse vertices", template.up2.cols()),
            format!("{}", v_sub2.rows()),
        ));
    }
    let v_sub1 = template.up2.matmul(v_sub2);
    let v_full = template.up1.matmul(&v_sub1);
    Ok((v_sub1, v_full))
}

/// Per-vertex offset minus the mean offset of its neighbours.
pub fn laplacian_offsets(delta: &Matrix, neighborhoods: &[Vec<usize>]) -> Matrix {
    let mut out = delta.clone();
    for (i, nb) in neighborhoods.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let w = 1.0 / nb.len() as f64;
        for &g in nb {
            for c in 0..delta.cols() {
                out[(i, c)] -= w * delta[(g, c)];
            }
        }
    }
    out
}
