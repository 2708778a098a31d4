//! Behavioral cloning on the same demonstrations, with the success rate as
//! the number of demonstrations grows.
//!
//! Run with `cargo run --release --example bc_baseline`.

use gpril::demos::{scripted_expert, sparsify, Sparsify};
use gpril::env::PointMassConfig;
use gpril::gpril::{behavioral_cloning, evaluate, GprilConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = PointMassConfig::default();
    let trajs = scripted_expert(&env, 10, 1000)?;
    let cfg = GprilConfig::desk_scale();
    for n in [1, 3, 10] {
        let demos = sparsify(&trajs[..n], Sparsify::Full)?;
        let policy = behavioral_cloning(&cfg, &demos)?;
        let r = evaluate(&policy, &demos.normalizer(), &env, 100, 4242)?;
        println!("{n:>2} demos ({:>4} pairs): success {:.2}, median success length {:?}", demos.len(), r.success_rate, r.median_success_len);
    }
    Ok(())
}
