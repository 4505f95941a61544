use nalgebra::{DMatrix, DVector};

use super::skeleton::{self, VertexSkin, JOINT_NODES, NUM_JOINTS, SEGMENTS};
use super::{edges_from_faces, neighborhoods_from_faces};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Vertices per tube ring.
pub const RING_SIDES: usize = 8;

/// Surface resolution of the generated template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemplateConfig {
    pub m_full: usize,
    pub m_sub1: usize,
    pub m_sub2: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            m_full: 400,
            m_sub1: 100,
            m_sub2: 25,
        }
    }
}

impl TemplateConfig {
    pub fn validate(&self) -> Result<()> {
        let min_full = 2 * SEGMENTS.len() * RING_SIDES;
        if !self.m_full.is_multiple_of(RING_SIDES) || self.m_full < min_full {
            return Err(Error::Config(format!(
                "m_full must be a multiple of {RING_SIDES} and at least {min_full}, got {}",
                self.m_full
            )));
        }
        if !(4 <= self.m_sub2 && self.m_sub2 <= self.m_sub1 && self.m_sub1 <= self.m_full) {
            return Err(Error::Config(format!(
                "need 4 <= m_sub2 <= m_sub1 <= m_full, got {} / {} / {}",
                self.m_sub2, self.m_sub1, self.m_full
            )));
        }
        Ok(())
    }
}

/// Rest-pose body template with topology, joint regressor and the two fixed
/// upsampling maps.
#[derive(Clone, Debug)]
pub struct MeshTemplate {
    pub config: TemplateConfig,
    pub v_tpose: Matrix,
    pub j_tpose: Matrix,
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    /// `K × M_full`, rows nonnegative and summing to one.
    pub joint_regressor: Matrix,
    /// `M_full × M_sub1`: sub1 coordinates to full coordinates.
    pub up1: Matrix,
    /// `M_sub1 × M_sub2`: sub2 coordinates to sub1 coordinates.
    pub up2: Matrix,
    pub sub1_idx: Vec<usize>,
    pub sub2_idx: Vec<usize>,
    pub neighborhoods: Vec<Vec<usize>>,
    pub skin: Vec<VertexSkin>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Splits `total` rings across segments proportionally to length, at least
/// two per segment, by largest remainder.
fn allocate_rings(total: usize) -> Vec<usize> {
    let lengths: Vec<f64> = SEGMENTS
        .iter()
        .map(|s| {
            let d = sub(skeleton::rest(s.to), skeleton::rest(s.from));
            dot(d, d).sqrt()
        })
        .collect();
    let sum: f64 = lengths.iter().sum();
    let shares: Vec<f64> = lengths.iter().map(|l| l / sum * total as f64).collect();
    let mut rings: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).max(2)).collect();
    let mut assigned: usize = rings.iter().sum();
    while assigned < total {
        let i = (0..rings.len())
            .max_by(|&a, &b| {
                (shares[a] - rings[a] as f64)
                    .partial_cmp(&(shares[b] - rings[b] as f64))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        rings[i] += 1;
        assigned += 1;
    }
    while assigned > total {
        let i = (0..rings.len())
            .filter(|&i| rings[i] > 2)
            .min_by(|&a, &b| {
                (shares[a] - rings[a] as f64)
                    .partial_cmp(&(shares[b] - rings[b] as f64))
                    .unwrap()
                    .then(a.cmp(&b))
            })
            .unwrap();
        rings[i] -= 1;
        assigned -= 1;
    }
    rings
}

/// Greedy farthest-point sampling over `pool` (global indices), seeded with
/// `pool[0]`.
fn farthest_points(v: &Matrix, pool: &[usize], count: usize) -> Vec<usize> {
    let mut chosen = vec![pool[0]];
    let mut best: Vec<f64> = pool.iter().map(|&i| dist2(v.row(i), v.row(pool[0]))).collect();
    while chosen.len() < count {
        let (pos, _) = best
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        let pick = pool[pos];
        chosen.push(pick);
        for (b, &i) in best.iter_mut().zip(pool) {
            *b = b.min(dist2(v.row(i), v.row(pick)));
        }
    }
    chosen
}

/// Rows mapping coarse coordinates to fine coordinates. Fine vertices that
/// are themselves coarse get one-hot rows; the rest get affine weights over
/// nearby coarse vertices (distance along the body favoured by penalising
/// segment hops) that reproduce the rest position.
fn interpolation_matrix(v: &Matrix, skin: &[VertexSkin], fine: &[usize], coarse: &[usize]) -> Result<Matrix> {
    const HOP_PENALTY: f64 = 0.25;
    const RIDGE: f64 = 1e-12;
    let mut out = Matrix::zeros(fine.len(), coarse.len());
    for (r, &f) in fine.iter().enumerate() {
        if let Some(c) = coarse.iter().position(|&c| c == f) {
            out[(r, c)] = 1.0;
            continue;
        }
        let mut cand: Vec<(f64, usize)> = coarse
            .iter()
            .enumerate()
            .map(|(ci, &c)| {
                let hops = skeleton::segment_hops(skin[f].segment, skin[c].segment) as f64;
                (dist2(v.row(f), v.row(c)).sqrt() + HOP_PENALTY * hops, ci)
            })
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let target = v.row(f);
        let mut solved = None;
        for k in 6..=coarse.len().min(12) {
            let nb: Vec<usize> = cand[..k].iter().map(|c| c.1).collect();
            // Prior: inverse-distance weights.
            let inv: Vec<f64> = cand[..k].iter().map(|c| 1.0 / (c.0 + 1e-6)).collect();
            let total: f64 = inv.iter().sum();
            let w0 = DVector::from_iterator(k, inv.iter().map(|x| x / total));
            let a = DMatrix::from_fn(4, k, |i, j| if i < 3 { v[(coarse[nb[j]], i)] } else { 1.0 });
            let b = DVector::from_vec(vec![target[0], target[1], target[2], 1.0]);
            let gram = &a * a.transpose() + DMatrix::identity(4, 4) * RIDGE;
            let Some(inv_gram) = gram.try_inverse() else { continue };
            let w = &w0 + a.transpose() * (inv_gram * (&b - &a * &w0));
            let resid = (&a * &w - &b).norm();
            if resid < 1e-7 && w.iter().all(|x| x.is_finite()) {
                solved = Some((nb, w));
                break;
            }
        }
        let (nb, w) = solved.ok_or_else(|| {
            Error::Config(format!("cannot build interpolation weights for vertex {f}"))
        })?;
        for (j, &ci) in nb.iter().enumerate() {
            out[(r, ci)] = w[j];
        }
    }
    Ok(out)
}

impl MeshTemplate {
    pub fn new(config: TemplateConfig) -> Result<Self> {
        config.validate()?;
        let rings = allocate_rings(config.m_full / RING_SIDES);
        let mut verts: Vec<[f64; 3]> = Vec::with_capacity(config.m_full);
        let mut skin = Vec::with_capacity(config.m_full);
        let mut faces = Vec::new();
        // (segment, ring index) -> first vertex index
        let mut ring_start: Vec<Vec<usize>> = Vec::new();
        for (si, seg) in SEGMENTS.iter().enumerate() {
            let (p0, p1) = (skeleton::rest(seg.from), skeleton::rest(seg.to));
            let u = normalize(sub(p1, p0));
            let helper = if u[1].abs() < 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
            let a = normalize(cross(u, helper));
            let b = cross(u, a);
            let n_r = rings[si];
            let base = verts.len();
            let mut starts = Vec::with_capacity(n_r);
            for i in 0..n_r {
                let t = i as f64 / (n_r - 1) as f64;
                starts.push(verts.len());
                for j in 0..RING_SIDES {
                    let th = 2.0 * std::f64::consts::PI * j as f64 / RING_SIDES as f64;
                    let (s, c) = th.sin_cos();
                    let mut p = [0.0; 3];
                    for d in 0..3 {
                        p[d] = p0[d] + t * (p1[d] - p0[d]) + seg.radius * (c * a[d] + s * b[d]);
                    }
                    verts.push(p);
                    skin.push(VertexSkin {
                        segment: si,
                        t,
                        parent_weight: skeleton::parent_weight(seg, t),
                    });
                }
            }
            ring_start.push(starts);
            // Orientation check on the first quad decides winding for the tube.
            let tri = |i: usize, j: usize| {
                let v00 = base + i * RING_SIDES + j;
                let v01 = base + i * RING_SIDES + (j + 1) % RING_SIDES;
                let v10 = base + (i + 1) * RING_SIDES + j;
                let v11 = base + (i + 1) * RING_SIDES + (j + 1) % RING_SIDES;
                [[v00, v01, v11], [v00, v11, v10]]
            };
            let [f0, _] = tri(0, 0);
            let n = cross(sub(verts[f0[1]], verts[f0[0]]), sub(verts[f0[2]], verts[f0[0]]));
            let outward = sub(verts[f0[0]], p0);
            let flip = dot(n, outward) < 0.0;
            for i in 0..n_r - 1 {
                for j in 0..RING_SIDES {
                    for f in tri(i, j) {
                        faces.push(if flip { [f[0], f[2], f[1]] } else { f });
                    }
                }
            }
        }
        let v_tpose = Matrix::from_rows(&verts);
        let j_tpose = Matrix::from_fn(NUM_JOINTS, 3, |k, c| skeleton::rest(JOINT_NODES[k])[c]);

        let ring = |seg: &str, last: bool| -> usize {
            let si = SEGMENTS.iter().position(|s| s.name == seg).expect("known segment");
            let starts = &ring_start[si];
            if last {
                *starts.last().unwrap()
            } else {
                starts[0]
            }
        };
        // Each joint: rings whose centroids coincide with it in every pose.
        let joint_rings: [Vec<usize>; NUM_JOINTS] = [
            vec![ring("r_shin", true)],
            vec![ring("r_thigh", true), ring("r_shin", false)],
            vec![ring("r_thigh", false), ring("hips", false)],
            vec![ring("l_thigh", false), ring("hips", true)],
            vec![ring("l_thigh", true), ring("l_shin", false)],
            vec![ring("l_shin", true)],
            vec![ring("r_forearm", true)],
            vec![ring("r_upper_arm", true), ring("r_forearm", false)],
            vec![ring("r_upper_arm", false), ring("shoulders", false)],
            vec![ring("l_upper_arm", false), ring("shoulders", true)],
            vec![ring("l_upper_arm", true), ring("l_forearm", false)],
            vec![ring("l_forearm", true)],
            vec![ring("torso", true), ring("head", false)],
            vec![ring("head", true)],
        ];
        let mut joint_regressor = Matrix::zeros(NUM_JOINTS, config.m_full);
        for (k, rs) in joint_rings.iter().enumerate() {
            let w = 1.0 / (rs.len() * RING_SIDES) as f64;
            for &start in rs {
                for j in 0..RING_SIDES {
                    joint_regressor[(k, start + j)] += w;
                }
            }
        }

        let all: Vec<usize> = (0..config.m_full).collect();
        let sub1_idx = farthest_points(&v_tpose, &all, config.m_sub1);
        let sub2_idx = farthest_points(&v_tpose, &sub1_idx, config.m_sub2);
        let up2 = interpolation_matrix(&v_tpose, &skin, &sub1_idx, &sub2_idx)?;
        let up1 = interpolation_matrix(&v_tpose, &skin, &all, &sub1_idx)?;

        let edges = edges_from_faces(&faces);
        let neighborhoods = neighborhoods_from_faces(config.m_full, &faces);
        Ok(Self {
            config,
            v_tpose,
            j_tpose,
            faces,
            edges,
            joint_regressor,
            up1,
            up2,
            sub1_idx,
            sub2_idx,
            neighborhoods,
            skin,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.config.m_full
    }

    pub fn num_joints(&self) -> usize {
        NUM_JOINTS
    }

    /// Rest vertices restricted to the coarsest subset.
    pub fn v_tpose_sub2(&self) -> Matrix {
        self.v_tpose.select_rows(&self.sub2_idx)
    }

    pub fn v_tpose_sub1(&self) -> Matrix {
        self.v_tpose.select_rows(&self.sub1_idx)
    }

    /// Dense `M × M` Laplacian `I − D⁻¹A` over the vertex neighbourhoods.
    pub fn laplacian_matrix(&self) -> Matrix {
        let m = self.num_vertices();
        let mut l = Matrix::identity(m);
        for (i, nb) in self.neighborhoods.iter().enumerate() {
            let w = 1.0 / nb.len() as f64;
            for &g in nb {
                l[(i, g)] -= w;
            }
        }
        l
    }
}

impl Default for MeshTemplate {
    fn default() -> Self {
        Self::new(TemplateConfig::default()).expect("default template config is valid")
    }
}
