//! Finite-difference audit of the loss terms and of the whole network,
//! as run by `mvmesh gradcheck`.

use mvmesh::train::{gradcheck, GradcheckOptions, TrainConfig};

fn main() -> mvmesh::Result<()> {
    let config = TrainConfig::default();
    let report = gradcheck(&config, GradcheckOptions::default())?;
    print!("{}", report.to_text());
    println!("all within tolerance: {}", report.passed());
    Ok(())
}
