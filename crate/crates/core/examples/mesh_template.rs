//! The procedural body template: sizes, topology, joint regression and the
//! fixed coarse-to-fine upsampling. Writes the rest mesh as OBJ.

use mvmesh::mesh::{edge_lengths, obj, regress_joints, upsample, MeshTemplate};

fn main() -> mvmesh::Result<()> {
    let t = MeshTemplate::default();
    println!(
        "{} vertices ({} / {} in the subsets), {} faces, {} edges, {} joints",
        t.num_vertices(),
        t.sub1_idx.len(),
        t.sub2_idx.len(),
        t.faces.len(),
        t.edges.len(),
        t.num_joints()
    );
    let lens = edge_lengths(&t.v_tpose, &t.edges);
    let mean = lens.iter().sum::<f64>() / lens.len() as f64;
    println!("mean edge length {:.1} mm", 1e3 * mean);

    let j = regress_joints(&t.v_tpose, &t.joint_regressor)?;
    println!("regressor error at rest {:.2e}", j.max_abs_diff(&t.j_tpose));

    let (sub1, full) = upsample(&t.v_tpose_sub2(), &t)?;
    println!(
        "upsampling the rest coarse mesh: sub1 error {:.2e}, full error {:.2e}",
        sub1.max_abs_diff(&t.v_tpose_sub1()),
        full.max_abs_diff(&t.v_tpose)
    );

    let path = std::env::temp_dir().join("mvmesh_rest.obj");
    obj::write_obj(std::fs::File::create(&path)?, &t.v_tpose, &t.faces)?;
    println!("wrote {}", path.display());
    Ok(())
}
