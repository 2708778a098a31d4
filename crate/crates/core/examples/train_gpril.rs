//! End-to-end training on the point-mass insertion task with the
//! desk-scale configuration, writing metrics, checkpoints and plots.
//!
//! Run with `cargo run --release --example train_gpril -- [iterations] [out_dir]`.
//! The full 300 iterations take a few minutes.

use std::path::PathBuf;

use gpril::cli::write_plots;
use gpril::demos::{scripted_expert, sparsify, Sparsify};
use gpril::env::PointMassConfig;
use gpril::gpril::{evaluate, train, GprilConfig, RunOutput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/example_gpril".into()));

    let env = PointMassConfig::default();
    let demos = sparsify(&scripted_expert(&env, 10, 1000)?, Sparsify::Full)?;
    let cfg = GprilConfig { total_iterations: iterations, ..GprilConfig::desk_scale() };
    let out = train(&cfg, &env, &demos, &RunOutput { dir: Some(out_dir.clone()) })?;
    for m in &out.metrics {
        println!(
            "iter {:>4}  env steps {:>6}  demo loglik {:>8.3}  success {:.2}",
            m.iter, m.env_steps, m.demo_loglik, m.success_rate
        );
    }
    let report = evaluate(&out.policy, &out.normalizer, &env, 100, 4242)?;
    println!("final: {report:?}");
    write_plots(&out.metrics, &out_dir)?;
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
