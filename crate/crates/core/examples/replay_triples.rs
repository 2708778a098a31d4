//! Geometric-gap training triples drawn from a replay buffer of point-mass
//! episodes, with the empirical gap distribution against `Geom(1-γ)`.
//!
//! Run with `cargo run --example replay_triples`.

use gpril::demos::scripted_expert;
use gpril::env::PointMassConfig;
use gpril::replay::ReplayBuffer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = PointMassConfig::default();
    let mut buffer = ReplayBuffer::new(10_000);
    for traj in scripted_expert(&env, 20, 7)? {
        buffer.append_episode(traj);
    }
    println!("{} transitions in {} episodes", buffer.len(), buffer.num_episodes());

    let gamma = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let triples = buffer.sample_triples(gamma, 50_000, &mut rng)?;
    let mut counts = [0usize; 8];
    for t in &triples {
        if t.gap < counts.len() {
            counts[t.gap] += 1;
        }
    }
    println!("gap  empirical  geometric");
    for (j, c) in counts.iter().enumerate() {
        let p = (1.0 - gamma) * gamma.powi(j as i32);
        println!("{j:>3}  {:>9.4}  {p:>9.4}", *c as f64 / triples.len() as f64);
    }
    let t = &triples[0];
    println!("example: s {:.3?}\n         a {:.3?}\n  future s {:.3?} (gap {})", t.s.0, t.a.0, t.s_future.0, t.gap);
    Ok(())
}
