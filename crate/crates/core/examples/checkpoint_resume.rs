//! Saves a checkpoint mid-run, reloads it and shows that resuming gives
//! the same parameters as training straight through.

use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{default_rig, generate, GenConfig};
use mvmesh::train::{Checkpoint, TrainConfig, Trainer};

fn main() -> mvmesh::Result<()> {
    let config = TrainConfig { epochs: 2, n_views: 2, lr: 1e-3, ..TrainConfig::default() };
    let rig = default_rig(config.max_views, config.image_size)?;
    let data = generate(16, 2, &rig, &MeshTemplate::default(), &GenConfig::default())?;

    let mut straight = Trainer::new(config.clone())?;
    straight.train(&data.samples, &mut std::io::sink(), &mut |_| Ok(()))?;

    let path = std::env::temp_dir().join("mvmesh_demo.mmtc");
    let mut first = Trainer::new(TrainConfig { epochs: 1, ..config.clone() })?;
    first.train(&data.samples, &mut std::io::sink(), &mut |t| t.checkpoint().save(&path))?;
    let size = std::fs::metadata(&path)?.len();

    let mut ck = Checkpoint::load(&path)?;
    println!("checkpoint {} ({size} bytes): epoch {}, step {}", path.display(), ck.epoch, ck.step);
    ck.config.epochs = 2;
    let mut resumed = Trainer::from_checkpoint(ck)?;
    resumed.train(&data.samples, &mut std::io::sink(), &mut |_| Ok(()))?;

    let diff = resumed.store.flat().iter().zip(straight.store.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max parameter difference after resuming: {diff:e}");
    let same = resumed.checkpoint().to_bytes()? == straight.checkpoint().to_bytes()?;
    println!("checkpoints byte-identical: {same}");
    Ok(())
}
