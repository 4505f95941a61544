//! Weak-perspective projection and similarity Procrustes on a posed body:
//! PA-MPJPE removes a global rotation, scale and shift, MPJPE does not.

use mvmesh::geometry::{procrustes_align, project, rotate_points, Rotation, WeakPerspectiveIntrinsics};
use mvmesh::losses::{mpjpe, pa_mpjpe};
use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{pose_body, sample_pose, PoseConfig};
use mvmesh::tensor::Matrix;

fn main() -> mvmesh::Result<()> {
    let template = MeshTemplate::default();
    let gt = pose_body(&sample_pose(&PoseConfig::default(), 3), &template)?.joints;

    let r = Rotation::from_axis_angle([0.1, 0.6, -0.2]);
    let moved = rotate_points(&r, &gt);
    let pred = Matrix::from_fn(gt.rows(), 3, |i, c| 1.1 * moved[(i, c)] + [0.05, -0.02, 0.3][c]);
    println!("similarity-moved copy: MPJPE {:.1} mm, PA-MPJPE {:.2e} mm", 1e3 * mpjpe(&pred, &gt), 1e3 * pa_mpjpe(&pred, &gt)?);

    let sim = procrustes_align(&pred, &gt)?;
    println!("recovered scale {:.6} (expected {:.6})", sim.scale, 1.0 / 1.1);

    let noisy = Matrix::from_fn(gt.rows(), 3, |i, c| gt[(i, c)] + 0.02 * ((i * 3 + c) as f64).sin());
    println!("noisy copy: MPJPE {:.1} mm, PA-MPJPE {:.1} mm", 1e3 * mpjpe(&noisy, &gt), 1e3 * pa_mpjpe(&noisy, &gt)?);

    let k = WeakPerspectiveIntrinsics::new(45.0, [56.0, 56.0])?;
    let uv = project(&k, &Rotation::look_at_origin(0.5, 0.1), &gt);
    println!("pelvis-side joints in pixels:");
    for j in 0..3 {
        println!("  {j}: ({:.1}, {:.1})", uv[(j, 0)], uv[(j, 1)]);
    }
    Ok(())
}
