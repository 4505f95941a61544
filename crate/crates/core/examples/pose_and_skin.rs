//! Samples poses from the prior and skins the template with them.

use mvmesh::mesh::{obj, MeshTemplate};
use mvmesh::synthetic::{pose_body, sample_pose, PoseConfig};

fn main() -> mvmesh::Result<()> {
    let t = MeshTemplate::default();
    let prior = PoseConfig::default();
    for seed in 0..5 {
        let p = sample_pose(&prior, seed);
        let body = pose_body(&p, &t)?;
        let height = (0..body.vertices.rows()).map(|r| body.vertices[(r, 1)]).fold(f64::MIN, f64::max)
            - (0..body.vertices.rows()).map(|r| body.vertices[(r, 1)]).fold(f64::MAX, f64::min);
        println!(
            "seed {seed}: root yaw {:+.2} rad, extent {:.2} m, within limits: {}",
            p.root[1],
            height,
            p.within_limits()
        );
        if seed == 0 {
            let path = std::env::temp_dir().join("mvmesh_posed.obj");
            std::fs::write(&path, obj::to_obj_string(&body.vertices, &t.faces))?;
            println!("  wrote {}", path.display());
        }
    }
    Ok(())
}
