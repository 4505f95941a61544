//! Generates a small synthetic dataset, checks its cross-view ground truth
//! and prints the master view of the first sample as ASCII art.
//!
//! cargo run --release --example generate_dataset -- [n] [out.mmtd]

use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{cross_view_error, default_rig, load_dataset, make_dataset, GenConfig};

fn main() -> mvmesh::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(16, |a| a.parse().expect("n must be a number"));
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("mvmesh_demo.mmtd").display().to_string());

    let rig = default_rig(4, 112)?;
    let ds = make_dataset(out.as_ref(), n, &rig, 1, &MeshTemplate::default(), &GenConfig::default())?;
    let h = ds.header;
    println!("{} samples, {} views of {}x{}, {} joints, {} vertices -> {out}", h.n_samples, h.n_views, h.height, h.width, h.n_joints, h.n_vertices);

    let (mut e3, mut e2, mut clipped) = (0.0f64, 0.0f64, 0);
    for s in &ds.samples {
        let (a, b) = cross_view_error(s, &rig);
        e3 = e3.max(a);
        e2 = e2.max(b);
        clipped += s.images.iter().filter(|im| im.out_of_frame()).count();
    }
    println!("worst cross-view error: 3D {e3:.2e} m, 2D {e2:.2e} px; {clipped} clipped views");

    // The file stores f32, so reloading loses a little precision.
    let back = load_dataset(out.as_ref())?;
    let drift = back.samples[0].joints3d[0].max_abs_diff(&ds.samples[0].joints3d[0]);
    println!("reload drift {drift:.1e}");

    let im = &ds.samples[0].images[rig.master()];
    let ramp = [' ', '.', ':', '+', '#', '@'];
    for row in (0..im.height).step_by(4) {
        let line: String = (0..im.width)
            .step_by(2)
            .map(|c| ramp[((im.get(row, c) * 5.0).round() as usize).min(5)])
            .collect();
        println!("{line}");
    }
    Ok(())
}
