//! The sample-based estimator used during training, driven by exact
//! predecessor samples on the tabular MDP, against the closed-form value.
//!
//! Run with `cargo run --release --example exact_predecessor_estimator`.

use gpril::gpril::estimate_state_dist_grad;
use gpril::oracle::{fixture_4state, ExactPredecessor, TabularOracle};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy) = fixture_4state();
    let oracle = TabularOracle::new(mdp, policy.clone())?;
    let gamma = 0.9;
    let model = ExactPredecessor::new(&oracle, gamma)?;
    let exact = oracle.grad_log_stationary_disc(gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for target in 0..oracle.n_states() {
        let targets = Array2::from_elem((1, 1), target as f64);
        for n in [1_000, 100_000] {
            let est = estimate_state_dist_grad(&model, &policy, &targets, n, &mut rng)?;
            // The estimator omits the 1/(1-γ) factor.
            let scaled: Vec<f64> = est.0.iter().map(|g| g / (1.0 - gamma)).collect();
            let err = scaled.iter().zip(exact.row(target).iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            println!("target {target} samples {n:>6}: max abs error {err:.4}");
        }
    }
    Ok(())
}
