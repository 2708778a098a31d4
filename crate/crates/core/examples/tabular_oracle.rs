//! Exact quantities on the shipped 4-state MDP: the stationary
//! distribution, the discounted predecessor distribution, and how the
//! predecessor-based gradient of `log d^π` approaches the finite-difference
//! value as γ grows.
//!
//! Run with `cargo run --example tabular_oracle`.

use gpril::oracle::{fixture_4state, TabularOracle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy) = fixture_4state();
    let oracle = TabularOracle::new(mdp, policy)?;
    println!("stationary d = {:.4}", oracle.d.transpose());

    let fd = oracle.grad_log_stationary_fd(1e-5)?;
    println!("finite-difference grad log d (rows: target state):\n{fd:.4}");

    for gamma in [0.5, 0.9, 0.99, 0.999] {
        let disc = oracle.grad_log_stationary_disc(gamma)?;
        let rel = disc.iter().zip(fd.iter()).map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max);
        println!("gamma {gamma:<6} max relative error {rel:.5}");
    }

    let b = oracle.predecessor_dist(0.9)?;
    println!("predecessor distribution at gamma 0.9 (rows: target, cols: (s, a)):\n{b:.4}");

    let (lhs, rhs) = oracle.policy_gradient_equiv(0.9, 2, 1)?;
    println!("predecessor form vs reward form for (s=2, a=1):\n  {:.6}\n  {:.6}", lhs.transpose(), rhs.transpose());
    println!("recursion residual {:.2e}", oracle.recursion_residual(&fd).amax());
    Ok(())
}
