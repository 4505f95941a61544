//! One forward pass of the full network on a 4-view sample: sequence
//! lengths at each stage, parameter counts per module and the outputs.

use std::collections::BTreeMap;

use mvmesh::autodiff::Graph;
use mvmesh::mesh::MeshTemplate;
use mvmesh::model::Batch;
use mvmesh::nn::Mode;
use mvmesh::synthetic::{generate, GenConfig};
use mvmesh::train::{model_rig, TrainConfig, Trainer};

fn main() -> mvmesh::Result<()> {
    let config = TrainConfig::default();
    let t = Trainer::new(config.clone())?;
    let mut per_group: BTreeMap<String, usize> = BTreeMap::new();
    for e in t.store.entries() {
        *per_group.entry(e.group().to_string()).or_default() += e.len();
    }
    println!("{} parameters", t.store.len());
    for (g, n) in &per_group {
        println!("  {g:<10} {n:>8}");
    }

    let rig = model_rig(&config, 4)?;
    let data = generate(1, 9, &rig, &MeshTemplate::default(), &GenConfig::default())?;
    let batch = Batch::new(&[&data.samples[0]], &rig)?;
    let mut g = Graph::new();
    let images = g.constant(batch.images.clone());
    let grid = t.model.backbone.forward(&mut g, &t.store, images, 4)?;
    println!("backbone grid {:?} (49 tokens per view)", g.shape(grid));

    let f = t.model.forward(&mut g, &t.store, &batch, &mut Mode::Eval)?;
    println!("fused sequence {:?} (K*N rows)", g.shape(f.z));
    println!("master pose {:?}, intrinsics {:?}", g.shape(f.p3d), g.shape(f.intrinsics));
    println!(
        "mesh {:?} -> {:?} -> {:?}, joints {:?}",
        g.shape(f.body.v_sub2),
        g.shape(f.body.v_sub1),
        g.shape(f.body.v_full),
        g.shape(f.body.joints)
    );
    let k = g.value(f.intrinsics);
    for v in 0..4 {
        println!("  view {v}: s {:.3} t ({:+.3}, {:+.3})", k[(v, 0)], k[(v, 1)], k[(v, 2)]);
    }
    Ok(())
}
