//! Writes the predicted and ground-truth meshes of one sample as OBJ for
//! side-by-side viewing, as `mvmesh export-obj` does.

use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{default_rig, generate, GenConfig};
use mvmesh::train::{export_obj, TrainConfig, Trainer};

fn main() -> mvmesh::Result<()> {
    let config = TrainConfig::default();
    let t = Trainer::new(config.clone())?;
    let rig = default_rig(config.max_views, config.image_size)?;
    let data = generate(2, 4, &rig, &MeshTemplate::default(), &GenConfig::default())?;
    let dir = std::env::temp_dir().join("mvmesh_obj");
    let (pred, gt) = export_obj(&t.model, &t.store, &config, &data, 1, &dir)?;
    println!("untrained prediction: {}\nground truth:         {}", pred.display(), gt.display());
    Ok(())
}
