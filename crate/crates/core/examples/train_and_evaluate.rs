//! Trains a reduced model for a few epochs in memory, printing the JSON
//! metrics log, then evaluates on held-out samples with 1 to 4 views.
//!
//! cargo run --release --example train_and_evaluate -- [epochs]

use mvmesh::mesh::MeshTemplate;
use mvmesh::synthetic::{default_rig, generate, GenConfig};
use mvmesh::train::{evaluate, EvalOptions, TrainConfig, Trainer};

fn main() -> mvmesh::Result<()> {
    let epochs = std::env::args().nth(1).map_or(5, |a| a.parse().expect("epochs"));
    let config = TrainConfig { epochs, lr: 1e-3, ..TrainConfig::default() };
    let rig = default_rig(config.max_views, config.image_size)?;
    let data = generate(80, 5, &rig, &MeshTemplate::default(), &GenConfig::default())?;
    let (train, test) = data.samples.split_at(64);

    let mut t = Trainer::new(config.clone())?;
    t.train(train, &mut std::io::stdout(), &mut |_| Ok(()))?;
    for n in 1..=config.max_views {
        let r = evaluate(&t.model, &t.store, &config, test, EvalOptions { n_views: n, all_views: false })?;
        println!("{n} views: MPJPE {:.1} mm, PA-MPJPE {:.1} mm, MPVE {:.1} mm", r.mean.mpjpe, r.mean.pa_mpjpe, r.mean.mpve);
    }
    Ok(())
}
