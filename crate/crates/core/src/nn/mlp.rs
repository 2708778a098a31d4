use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{check_dim, Result};

/// Uniform draw in `±sqrt(6 / (n_in + n_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, n_in: usize, n_out: usize) -> f64 {
    let limit = (6.0 / (n_in + n_out) as f64).sqrt();
    rng.random_range(-limit..=limit)
}

/// Fully connected network with tanh hidden layers and an affine output.
///
/// Parameters live in one flat vector: for each layer, the `n_in x n_out`
/// weight matrix in row-major order followed by the `n_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(layer_sizes);
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            for p in &mut net.params[offset..offset + n_in * n_out] {
                *p = glorot_uniform(rng, n_in, n_out);
            }
            offset += n_in * n_out + n_out;
        }
        net
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(layer_sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!(layer_sizes.iter().all(|&n| n > 0), "layer sizes must be positive");
        let n = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp { layer_sizes: layer_sizes.to_vec(), params: vec![0.0; n] }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("nonempty")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let x = ArrayView1::from(x).insert_axis(ndarray::Axis(0)).to_owned();
        Ok(self.forward_batch(&x).into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch (one row per input), without recording.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width");
        let mut h = x.clone();
        let mut offset = 0;
        let n_layers = self.layer_sizes.len() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let wm = ArrayView1::from(&self.params[offset..offset + n_in * n_out])
                .into_shape_with_order((n_in, n_out))
                .expect("shape");
            offset += n_in * n_out;
            let b = ArrayView1::from(&self.params[offset..offset + n_out]);
            offset += n_out;
            h = h.dot(&wm) + &b;
            if l + 1 < n_layers {
                h.mapv_inplace(f64::tanh);
            }
        }
        h
    }

    /// Record the forward pass on `tape`. `p` is a `1 x num_params` node
    /// holding this network's parameters; `x` is `B x input_dim`.
    pub fn forward_tape(&self, tape: &mut Tape, p: Var, x: Var) -> Var {
        self.forward_tape_at(tape, p, 0, x)
    }

    /// As [`Mlp::forward_tape`], reading parameters from `p` at `base`.
    pub fn forward_tape_at(&self, tape: &mut Tape, p: Var, base: usize, x: Var) -> Var {
        let mut h = x;
        let mut offset = base;
        let n_layers = self.layer_sizes.len() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let wm = tape.view(p, offset, n_in, n_out);
            offset += n_in * n_out;
            let b = tape.view(p, offset, 1, n_out);
            offset += n_out;
            let z = tape.matmul(h, wm);
            h = tape.add_row(z, b);
            if l + 1 < n_layers {
                h = tape.tanh(h);
            }
        }
        h
    }
}
