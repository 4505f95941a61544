//! Random articulated poses and the fixed skinning that turns them into a
//! posed template.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::Rotation;
use crate::mesh::skeleton::{self, JITTER_NODES, JOINT_NODES, NUM_JOINTS, NUM_NODES, SEGMENTS};
use crate::mesh::{regress_joints, MeshTemplate, PosedBody};
use crate::tensor::Matrix;

/// Per-axis axis-angle bounds `[lo, hi]` (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisLimits {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

const fn lim(lo: [f64; 3], hi: [f64; 3]) -> AxisLimits {
    AxisLimits { lo, hi }
}

const FIXED: AxisLimits = lim([0.0; 3], [0.0; 3]);
const QUARTER: f64 = std::f64::consts::FRAC_PI_4;

pub const ROOT_LIMITS: AxisLimits = lim([-0.1, -QUARTER, -0.1], [0.1, QUARTER, 0.1]);

/// Local rotation limits per skeleton node. Nodes that only terminate a bone
/// (head top, wrists, ankles) and the pelvis (driven by the root) are fixed.
pub const NODE_LIMITS: [AxisLimits; NUM_NODES] = [
    FIXED,
    lim([-0.3, -0.3, -0.2], [0.5, 0.3, 0.2]),
    lim([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]),
    FIXED,
    lim([-0.5, -1.0, -1.0], [0.5, 1.0, 1.0]),
    lim([0.0, -1.2, 0.0], [0.0, 1.2, 0.0]),
    FIXED,
    lim([-0.5, -1.0, -1.0], [0.5, 1.0, 1.0]),
    lim([0.0, -1.2, 0.0], [0.0, 1.2, 0.0]),
    FIXED,
    lim([-1.0, -0.3, -0.3], [0.4, 0.3, 0.3]),
    lim([0.0, 0.0, 0.0], [1.4, 0.0, 0.0]),
    FIXED,
    lim([-1.0, -0.3, -0.3], [0.4, 0.3, 0.3]),
    lim([0.0, 0.0, 0.0], [1.4, 0.0, 0.0]),
    FIXED,
];

pub const JITTER_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseConfig {
    /// Scales every limit range towards the rest pose; 0 yields the rest pose.
    pub amplitude: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self { amplitude: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseParams {
    /// Global body orientation (axis-angle).
    pub root: [f64; 3],
    /// Local axis-angle rotation of each node's child bones.
    pub local: [[f64; 3]; NUM_NODES],
    /// Bone-length factor of the bone ending at each node.
    pub jitter: [f64; NUM_NODES],
}

impl PoseParams {
    pub fn rest() -> Self {
        Self {
            root: [0.0; 3],
            local: [[0.0; 3]; NUM_NODES],
            jitter: [1.0; NUM_NODES],
        }
    }

    /// True when every angle and jitter factor is inside the limits.
    pub fn within_limits(&self) -> bool {
        let inside = |v: [f64; 3], l: &AxisLimits| (0..3).all(|a| v[a] >= l.lo[a] && v[a] <= l.hi[a]);
        inside(self.root, &ROOT_LIMITS)
            && self.local.iter().zip(&NODE_LIMITS).all(|(v, l)| inside(*v, l))
            && self.jitter.iter().enumerate().all(|(n, &j)| {
                if JITTER_NODES.contains(&n) {
                    (JITTER_RANGE.0..=JITTER_RANGE.1).contains(&j)
                } else {
                    j == 1.0
                }
            })
    }
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64, amp: f64) -> f64 {
    let (lo, hi) = (lo * amp, hi * amp);
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn draw_axes(rng: &mut impl Rng, l: &AxisLimits, amp: f64) -> [f64; 3] {
    [
        draw(rng, l.lo[0], l.hi[0], amp),
        draw(rng, l.lo[1], l.hi[1], amp),
        draw(rng, l.lo[2], l.hi[2], amp),
    ]
}

pub fn sample_pose_with(config: &PoseConfig, rng: &mut impl Rng) -> PoseParams {
    let amp = config.amplitude.clamp(0.0, 1.0);
    let mut p = PoseParams::rest();
    p.root = draw_axes(rng, &ROOT_LIMITS, amp);
    for (n, l) in NODE_LIMITS.iter().enumerate() {
        p.local[n] = draw_axes(rng, l, amp);
    }
    for &n in &JITTER_NODES {
        p.jitter[n] = 1.0 + draw(rng, JITTER_RANGE.0 - 1.0, JITTER_RANGE.1 - 1.0, amp);
    }
    p
}

pub fn sample_pose(config: &PoseConfig, seed: u64) -> PoseParams {
    sample_pose_with(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Global rotation and position of every skeleton node.
#[derive(Clone, Debug)]
pub struct Kinematics {
    pub rotations: [Rotation; NUM_NODES],
    pub positions: [[f64; 3]; NUM_NODES],
}

impl Kinematics {
    /// The 14 output joints, `K × 3`.
    pub fn joints(&self) -> Matrix {
        Matrix::from_fn(NUM_JOINTS, 3, |k, c| self.positions[JOINT_NODES[k]][c])
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scaled(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Forward kinematics with the pelvis fixed at the origin.
pub fn forward_kinematics(params: &PoseParams) -> Kinematics {
    let mut rotations = [Rotation::IDENTITY; NUM_NODES];
    let mut positions = [[0.0; 3]; NUM_NODES];
    for n in 0..NUM_NODES {
        match skeleton::parent(n) {
            None => {
                rotations[n] = Rotation::from_axis_angle(params.root);
            }
            Some(par) => {
                let bone = scaled(sub(skeleton::rest(n), skeleton::rest(par)), params.jitter[n]);
                positions[n] = add(positions[par], rotations[par].apply(bone));
                rotations[n] = rotations[par].compose(&Rotation::from_axis_angle(params.local[n]));
            }
        }
    }
    Kinematics { rotations, positions }
}

/// Skins the template with `params`. Each vertex follows its segment's
/// owner node, stretched along limb axes by the bone jitter, and blends
/// in the parent node's rotation near the segment start.
pub fn pose_body(params: &PoseParams, template: &MeshTemplate) -> Result<PosedBody> {
    let kin = forward_kinematics(params);
    let m = template.num_vertices();
    let mut vertices = Matrix::zeros(m, 3);
    for v in 0..m {
        let sk = &template.skin[v];
        let seg = &SEGMENTS[sk.segment];
        let r = template.v_tpose.row(v);
        let local = sub([r[0], r[1], r[2]], skeleton::rest(seg.owner));
        let stretched = if seg.limb {
            let axis = sub(skeleton::rest(seg.to), skeleton::rest(seg.from));
            let len2 = axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2];
            let along = (local[0] * axis[0] + local[1] * axis[1] + local[2] * axis[2]) / len2;
            add(local, scaled(axis, along * (params.jitter[seg.to] - 1.0)))
        } else {
            local
        };
        let origin = kin.positions[seg.owner];
        let own = add(origin, kin.rotations[seg.owner].apply(stretched));
        let p = match seg.blend_parent {
            Some(bp) if sk.parent_weight > 0.0 => {
                let other = add(origin, kin.rotations[bp].apply(local));
                let w = sk.parent_weight;
                add(scaled(own, 1.0 - w), scaled(other, w))
            }
            _ => own,
        };
        vertices.row_mut(v).copy_from_slice(&p);
    }
    let joints = regress_joints(&vertices, &template.joint_regressor)?;
    Ok(PosedBody { vertices, joints })
}
