//! Procedural multi-view dataset: random articulated poses, skinned meshes,
//! per-view ground truth and depth-shaded silhouette rasters.

mod dataset;
mod pose;
mod render;

pub use dataset::{
    cross_view_error, generate, generate_sample, load_dataset, make_dataset, read_dataset, sample_from_body,
    write_dataset, Dataset, DatasetHeader, GenConfig, MultiViewSample, MAGIC, VERSION,
};
pub use pose::{
    forward_kinematics, pose_body, sample_pose, sample_pose_with, AxisLimits, Kinematics, PoseConfig, PoseParams,
    JITTER_RANGE, NODE_LIMITS, ROOT_LIMITS,
};
pub use render::{default_rig, default_world_rotations, render_view, Raster, RenderConfig, ELEVATION_DEG, OUT_OF_FRAME_LIMIT};
