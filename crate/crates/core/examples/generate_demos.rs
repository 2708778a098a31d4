//! Scripted-expert demonstrations for the point-mass task in each
//! sparsification regime, written to a temporary directory and read back.
//!
//! Run with `cargo run --example generate_demos`.

use gpril::demos::{scripted_expert, sparsify, DemoSet, Sparsify};
use gpril::env::PointMassConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = PointMassConfig::default();
    let trajs = scripted_expert(&env, 10, 1000)?;
    let lens: Vec<usize> = trajs.iter().map(|t| t.num_transitions()).collect();
    println!("expert episode lengths: {lens:?}");

    let dir = std::env::temp_dir().join("gpril_demo_example");
    std::fs::create_dir_all(&dir)?;
    for regime in [Sparsify::Full, Sparsify::Stride(5), Sparsify::FinalOnly] {
        let set = sparsify(&trajs, regime)?;
        let path = dir.join(format!("demos_{}.jsonl", regime.to_string().replace(':', "_")));
        set.save(&path)?;
        let back = DemoSet::load(&path)?;
        println!("{regime:<9} {:>4} samples, actions: {:<5} -> {}", back.len(), back.has_actions(), path.display());
    }
    let set = sparsify(&trajs, Sparsify::Full)?;
    println!("normalization mean {:.3?}\n              std  {:.3?}", set.norm_mean, set.norm_std);
    Ok(())
}
