//! Prints the default training config in the `key = value` form that
//! `mvmesh train --config` reads.

fn main() {
    print!("{}", mvmesh::train::TrainConfig::default().to_text());
}
