//! Rest skeleton of the toy humanoid and the body segments its surface is
//! built from.
//!
//! Coordinates are metres in a y-up frame with the pelvis at the origin and
//! the body facing +z. The body's right side is at -x.

/// Number of output joints (LSP-style 14-joint skeleton).
pub const NUM_JOINTS: usize = 14;

/// Internal kinematic nodes. Output joints are a subset; `Pelvis` and `Spine`
/// exist only to drive the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum Node {
    Pelvis = 0,
    Spine,
    Neck,
    HeadTop,
    RShoulder,
    RElbow,
    RWrist,
    LShoulder,
    LElbow,
    LWrist,
    RHip,
    RKnee,
    RAnkle,
    LHip,
    LKnee,
    LAnkle,
}

pub const NUM_NODES: usize = 16;

/// `(parent, rest position)` per node, indexed by `Node as usize`.
pub const NODES: [(Option<usize>, [f64; 3]); NUM_NODES] = [
    (None, [0.0, 0.0, 0.0]),
    (Some(0), [0.0, 0.0, 0.0]),
    (Some(1), [0.0, 0.55, 0.0]),
    (Some(2), [0.0, 0.85, 0.0]),
    (Some(1), [-0.2, 0.5, 0.0]),
    (Some(4), [-0.45, 0.5, 0.0]),
    (Some(5), [-0.7, 0.5, 0.0]),
    (Some(1), [0.2, 0.5, 0.0]),
    (Some(7), [0.45, 0.5, 0.0]),
    (Some(8), [0.7, 0.5, 0.0]),
    (Some(0), [-0.1, -0.05, 0.0]),
    (Some(10), [-0.1, -0.5, 0.0]),
    (Some(11), [-0.1, -0.92, 0.0]),
    (Some(0), [0.1, -0.05, 0.0]),
    (Some(13), [0.1, -0.5, 0.0]),
    (Some(14), [0.1, -0.92, 0.0]),
];

/// Output joint order: node index of each of the 14 joints.
pub const JOINT_NODES: [usize; NUM_JOINTS] = [12, 11, 10, 13, 14, 15, 6, 5, 4, 7, 8, 9, 2, 3];

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "r_wrist", "r_elbow", "r_shoulder",
    "l_shoulder", "l_elbow", "l_wrist", "neck", "head_top",
];

/// A tube of surface vertices rigidly attached to `owner`.
#[derive(Clone, Copy, Debug)]
pub struct Segment {
    pub name: &'static str,
    pub owner: usize,
    pub from: usize,
    pub to: usize,
    pub radius: f64,
    /// When set, the owner→`to` bone is a limb whose length jitter also
    /// stretches this tube along its axis.
    pub limb: bool,
    /// Node whose rotation is blended in near the tube's start.
    pub blend_parent: Option<usize>,
}

pub const SEGMENTS: [Segment; 12] = [
    Segment { name: "torso", owner: 1, from: 0, to: 2, radius: 0.13, limb: true, blend_parent: Some(0) },
    Segment { name: "head", owner: 2, from: 2, to: 3, radius: 0.1, limb: true, blend_parent: Some(1) },
    Segment { name: "shoulders", owner: 1, from: 4, to: 7, radius: 0.06, limb: false, blend_parent: None },
    Segment { name: "hips", owner: 0, from: 10, to: 13, radius: 0.07, limb: false, blend_parent: None },
    Segment { name: "r_upper_arm", owner: 4, from: 4, to: 5, radius: 0.05, limb: true, blend_parent: Some(1) },
    Segment { name: "r_forearm", owner: 5, from: 5, to: 6, radius: 0.04, limb: true, blend_parent: Some(4) },
    Segment { name: "l_upper_arm", owner: 7, from: 7, to: 8, radius: 0.05, limb: true, blend_parent: Some(1) },
    Segment { name: "l_forearm", owner: 8, from: 8, to: 9, radius: 0.04, limb: true, blend_parent: Some(7) },
    Segment { name: "r_thigh", owner: 10, from: 10, to: 11, radius: 0.075, limb: true, blend_parent: Some(0) },
    Segment { name: "r_shin", owner: 11, from: 11, to: 12, radius: 0.055, limb: true, blend_parent: Some(10) },
    Segment { name: "l_thigh", owner: 13, from: 13, to: 14, radius: 0.075, limb: true, blend_parent: Some(0) },
    Segment { name: "l_shin", owner: 14, from: 14, to: 15, radius: 0.055, limb: true, blend_parent: Some(13) },
];

/// Nodes whose bone length may be jittered.
pub const JITTER_NODES: [usize; 10] = [2, 3, 5, 6, 8, 9, 11, 12, 14, 15];

pub fn rest(node: usize) -> [f64; 3] {
    NODES[node].1
}

pub fn parent(node: usize) -> Option<usize> {
    NODES[node].0
}

/// Per-vertex skinning record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VertexSkin {
    pub segment: usize,
    /// Position along the segment axis in `[0, 1]`.
    pub t: f64,
    /// Weight of `blend_parent`'s rotation (0 when not blended).
    pub parent_weight: f64,
}

/// Fraction of a limb over which the parent rotation is blended in.
pub const BLEND_SPAN: f64 = 0.25;

pub fn parent_weight(seg: &Segment, t: f64) -> f64 {
    match seg.blend_parent {
        Some(_) if t < BLEND_SPAN => 0.5 * (1.0 - t / BLEND_SPAN),
        _ => 0.0,
    }
}

/// Number of segment hops between two segments (sharing a node counts as
/// adjacent).
pub fn segment_hops(a: usize, b: usize) -> usize {
    if a == b {
        return 0;
    }
    let n = SEGMENTS.len();
    let touches = |i: usize, j: usize| {
        let (si, sj) = (&SEGMENTS[i], &SEGMENTS[j]);
        let ni = [si.owner, si.from, si.to];
        let nj = [sj.owner, sj.from, sj.to];
        ni.iter().any(|x| nj.contains(x))
    };
    let mut dist = vec![usize::MAX; n];
    dist[a] = 0;
    let mut frontier = vec![a];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &i in &frontier {
            for j in 0..n {
                if dist[j] == usize::MAX && touches(i, j) {
                    dist[j] = dist[i] + 1;
                    next.push(j);
                }
            }
        }
        frontier = next;
    }
    dist[b]
}
