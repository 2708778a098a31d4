//! Minimal differentiable-network substrate: a reverse-mode [`Tape`],
//! fully connected [`Mlp`]s over flat parameter vectors, [`Adam`],
//! global-norm clipping, and the binary checkpoint format.

mod adam;
mod checkpoint;
mod mlp;
mod tape;

pub use adam::{clip_by_global_norm, Adam};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use mlp::{glorot_uniform, Mlp};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Flat gradient aligned with a model's parameter flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(n: usize) -> Self {
        GradVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Value and exact gradient of a scalar loss built on a tape from a flat
/// parameter vector. `loss_fn` receives the tape and the `1 x n` parameter
/// node and returns a `1 x 1` node.
pub fn grad<F>(params: &[f64], loss_fn: F) -> Result<(f64, GradVector)>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let p = tape.flat(params);
    let loss = loss_fn(&mut tape, p);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    tape.backward(loss);
    let g = tape.grad(p).into_raw_vec_and_offset().0;
    Ok((value, GradVector(g)))
}
