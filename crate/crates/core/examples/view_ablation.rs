//! A miniature of the views ablation: one model per view count on the
//! same data, with the table `mvmesh ablate --axis views` prints.
//!
//! cargo run --release --example view_ablation -- [epochs] [axis]

use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{default_rig, generate, GenConfig};
use mvmesh::train::{ablate, holdout_split, AblationAxis, TrainConfig};

fn main() -> mvmesh::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(3, |a| a.parse().expect("epochs"));
    let axis: AblationAxis = args.next().as_deref().unwrap_or("views").parse()?;
    let base = TrainConfig { epochs, lr: 1e-3, ..TrainConfig::default() };
    let rig = default_rig(base.max_views, base.image_size)?;
    let data = generate(60, 8, &rig, &MeshTemplate::default(), &GenConfig::default())?;
    let (train, test) = holdout_split(&data.samples, base.holdout)?;
    let table = ablate(&base, axis, train, test, &mut |row| eprintln!("done: {}", row.setting.label))?;
    print!("{}", table.to_text());
    Ok(())
}
