//! Fit the state and action predecessor flows on expert rollouts, then
//! sample predecessors of a state near the slot. Samples should sit
//! earlier along the approach path, with actions pointing towards the
//! target.
//!
//! Run with `cargo run --release --example predecessor_model`.

use gpril::demos::{scripted_expert, sparsify, Sparsify};
use gpril::env::PointMassConfig;
use gpril::gpril::{model_update_step, FlowOptimizers, FlowPair, GprilConfig, PredecessorModel};
use gpril::replay::ReplayBuffer;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = PointMassConfig::default();
    let trajs = scripted_expert(&env, 40, 3)?;
    let demos = sparsify(&trajs, Sparsify::Full)?;
    let mut buffer = ReplayBuffer::new(50_000);
    for t in trajs.iter().cloned() {
        buffer.append_episode(t);
    }
    let cfg = GprilConfig::desk_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut flows = FlowPair::new(5, 2, &cfg, demos.normalizer(), &mut rng);
    let mut opt = FlowOptimizers::new(&flows, cfg.lr_model);
    for step in 0..=2000 {
        let st = model_update_step(&mut flows, &mut opt, &buffer, &cfg, &mut rng)?;
        if step % 500 == 0 {
            println!("step {step:>5}: log-lik states {:.3}, actions {:.3}", st.loglik_s, st.loglik_a);
        }
    }

    let target = &trajs[0].states[trajs[0].states.len() - 3];
    let z = demos.normalize(target)?;
    let targets = Array2::from_shape_fn((6, 5), |(_, k)| z[k]);
    let (s, a) = flows.sample_predecessors(&targets, &mut rng)?;
    println!("target position ({:.3}, {:.3})", target[0], target[1]);
    for r in 0..s.nrows() {
        let raw = demos.denormalize(&s.row(r).to_vec())?;
        println!("  predecessor ({:.3}, {:.3})  action ({:.3}, {:.3})", raw[0], raw[1], a[[r, 0]], a[[r, 1]]);
    }
    Ok(())
}
