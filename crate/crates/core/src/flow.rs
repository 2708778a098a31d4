//! Conditional masked autoregressive flows.
//!
//! A [`MafStack`] is a stack of autoregressive Gaussian transforms. Each
//! transform is parameterized by a [`MadeConditioner`], a masked network that
//! maps the already-generated coordinates and a conditioning vector to a
//! per-coordinate shift `μ_i` and scale `σ_i`. Densities are exact via the
//! change-of-variable formula; sampling inverts the transforms one
//! coordinate at a time.
//!
//! Transform `k` of the stack uses ordering `k`: the identity for even `k`,
//! the reversal for odd `k`. With `x = f_1(f_2(... f_K(z)))`, density
//! evaluation applies `f_1^{-1}` first.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{glorot_uniform, GradVector, Tape, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `σ = floor + softplus(raw)`; always strictly above `floor`.
pub fn sigma_floor(raw: f64, floor: f64) -> f64 {
    floor + softplus(raw)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Architecture of a flow, serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub n_transforms: usize,
    pub sigma_floor: f64,
}

/// Masked conditioner of one transform. Holds the connectivity masks and the
/// location of its parameters inside the stack's flat vector.
///
/// Layout at `offset`: for each hidden layer, the masked `n_in x n_out`
/// weights, the `cond_dim x n_out` condition weights (omitted when
/// `cond_dim == 0`), and `n_out` biases; then the masked `h x 2D` output
/// weights and `2D` output biases. Output columns are `[μ_1..μ_D, raw_1..raw_D]`.
#[derive(Debug, Clone)]
pub struct MadeConditioner {
    dim: usize,
    cond_dim: usize,
    hidden: Vec<usize>,
    /// Autoregressive position (1-based) of each input coordinate.
    input_degree: Vec<usize>,
    masks: Vec<Rc<Array2<f64>>>,
    offset: usize,
    n_params: usize,
}

impl MadeConditioner {
    fn new(dim: usize, cond_dim: usize, hidden: &[usize], ordering: &[usize], offset: usize) -> Self {
        let mut input_degree = vec![0; dim];
        for (pos, &i) in ordering.iter().enumerate() {
            input_degree[i] = pos + 1;
        }
        let hidden_degrees: Vec<Vec<usize>> = hidden.iter().map(|&h| (0..h).map(|k| k % dim).collect()).collect();
        let mut masks = Vec::new();
        let mut prev = input_degree.clone();
        for deg in &hidden_degrees {
            let m = Array2::from_shape_fn((prev.len(), deg.len()), |(i, k)| f64::from(u8::from(deg[k] >= prev[i])));
            masks.push(Rc::new(m));
            prev = deg.clone();
        }
        let out = Array2::from_shape_fn((prev.len(), 2 * dim), |(k, c)| {
            f64::from(u8::from(prev[k] < input_degree[c % dim]))
        });
        masks.push(Rc::new(out));
        let mut n_params = 0;
        let mut n_in = dim;
        for &h in hidden {
            n_params += n_in * h + cond_dim * h + h;
            n_in = h;
        }
        n_params += n_in * 2 * dim + 2 * dim;
        MadeConditioner { dim, cond_dim, hidden: hidden.to_vec(), input_degree, masks, offset, n_params }
    }

    pub fn num_params(&self) -> usize {
        self.n_params
    }

    /// Coordinates in the order this transform generates them.
    pub fn ordering(&self) -> Vec<usize> {
        let mut ord: Vec<usize> = (0..self.dim).collect();
        ord.sort_by_key(|&i| self.input_degree[i]);
        ord
    }

    fn mask_slices(&self) -> Vec<(usize, usize, usize, Option<usize>, usize)> {
        // (weight offset, n_in, n_out, cond offset, bias offset), relative to the stack.
        let mut out = Vec::new();
        let mut o = self.offset;
        let mut n_in = self.dim;
        for &h in &self.hidden {
            let w = o;
            o += n_in * h;
            let c = if self.cond_dim > 0 {
                let c = o;
                o += self.cond_dim * h;
                Some(c)
            } else {
                None
            };
            out.push((w, n_in, h, c, o));
            o += h;
            n_in = h;
        }
        let w = o;
        o += n_in * 2 * self.dim;
        out.push((w, n_in, 2 * self.dim, None, o));
        out
    }

    /// Raw outputs `[μ, raw]` for a batch, evaluated directly.
    fn raw_outputs(&self, params: &[f64], u: &Array2<f64>, cond: ArrayView2<f64>) -> Array2<f64> {
        let layers = self.mask_slices();
        let last = layers.len() - 1;
        let mut h = u.clone();
        for (l, &(w, n_in, n_out, c, b)) in layers.iter().enumerate() {
            let wm = ArrayView1::from(&params[w..w + n_in * n_out]).into_shape_with_order((n_in, n_out)).expect("shape");
            let wm = &wm * &*self.masks[l];
            let mut z = h.dot(&wm);
            if let Some(c) = c {
                let cm = ArrayView1::from(&params[c..c + self.cond_dim * n_out])
                    .into_shape_with_order((self.cond_dim, n_out))
                    .expect("shape");
                z += &cond.dot(&cm);
            }
            z += &ArrayView1::from(&params[b..b + n_out]);
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        h
    }

    fn raw_outputs_tape(&self, tape: &mut Tape, p: Var, u: Var, cond: Option<Var>) -> Var {
        let layers = self.mask_slices();
        let last = layers.len() - 1;
        let mut h = u;
        for (l, &(w, n_in, n_out, c, b)) in layers.iter().enumerate() {
            let wv = tape.view(p, w, n_in, n_out);
            let wm = tape.mul_const(wv, self.masks[l].clone());
            let mut z = tape.matmul(h, wm);
            if let (Some(c), Some(cv)) = (c, cond) {
                let cw = tape.view(p, c, self.cond_dim, n_out);
                let cz = tape.matmul(cv, cw);
                z = tape.add(z, cz);
            }
            let bv = tape.view(p, b, 1, n_out);
            z = tape.add_row(z, bv);
            if l < last {
                z = tape.tanh(z);
            }
            h = z;
        }
        h
    }
}

/// Stack of conditional autoregressive Gaussian transforms.
#[derive(Debug, Clone)]
pub struct MafStack {
    spec: FlowSpec,
    transforms: Vec<MadeConditioner>,
    pub params: Vec<f64>,
}

impl MafStack {
    /// Fan-scaled uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: FlowSpec, rng: &mut R) -> Self {
        let mut flow = Self::zeros(spec);
        for t in flow.transforms.clone() {
            for (w, n_in, n_out, c, _) in t.mask_slices() {
                for p in &mut flow.params[w..w + n_in * n_out] {
                    *p = glorot_uniform(rng, n_in, n_out);
                }
                if let Some(c) = c {
                    for p in &mut flow.params[c..c + t.cond_dim * n_out] {
                        *p = glorot_uniform(rng, n_in + t.cond_dim, n_out);
                    }
                }
            }
        }
        flow
    }

    pub fn zeros(spec: FlowSpec) -> Self {
        assert!(spec.dim > 0 && spec.n_transforms > 0, "flow needs a dimension and a transform");
        assert!(spec.sigma_floor >= 0.0);
        let mut transforms = Vec::new();
        let mut offset = 0;
        for k in 0..spec.n_transforms {
            let mut ordering: Vec<usize> = (0..spec.dim).collect();
            if k % 2 == 1 {
                ordering.reverse();
            }
            let t = MadeConditioner::new(spec.dim, spec.cond_dim, &spec.hidden, &ordering, offset);
            offset += t.num_params();
            transforms.push(t);
        }
        MafStack { spec, transforms, params: vec![0.0; offset] }
    }

    /// Every transform outputs the constant shift `mu` and scale `sigma`,
    /// independent of its inputs.
    pub fn constant(spec: FlowSpec, mu: f64, sigma: f64) -> Self {
        assert!(sigma > spec.sigma_floor, "sigma must exceed the floor");
        let raw = softplus_inv(sigma - spec.sigma_floor);
        let mut flow = Self::zeros(spec);
        for t in flow.transforms.clone() {
            let (_, _, _, _, b) = *t.mask_slices().last().expect("output layer");
            for i in 0..t.dim {
                flow.params[b + i] = mu;
                flow.params[b + t.dim + i] = raw;
            }
        }
        flow
    }

    /// The identity map: `μ = 0`, `σ = 1` in every transform.
    pub fn identity(spec: FlowSpec) -> Self {
        Self::constant(spec, 0.0, 1.0)
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.spec.cond_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn transforms(&self) -> &[MadeConditioner] {
        &self.transforms
    }

    fn split(&self, raw: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.spec.dim;
        let mu = raw.slice(ndarray::s![.., ..d]).to_owned();
        let floor = self.spec.sigma_floor;
        let sigma = raw.slice(ndarray::s![.., d..]).mapv(|r| sigma_floor(r, floor));
        (mu, sigma)
    }

    /// Shift and scale of transform `k` for inputs `u` (`B x D`) and
    /// conditions `cond` (`B x C`).
    pub fn conditioner_outputs(&self, k: usize, u: &Array2<f64>, cond: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let raw = self.transforms[k].raw_outputs(&self.params, u, cond.view());
        self.split(&raw)
    }

    fn check_batch(&self, x: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
        check_dim(self.spec.dim, x.ncols())?;
        check_dim(self.spec.cond_dim, cond.ncols())?;
        check_dim(x.nrows(), cond.nrows())?;
        if x.iter().chain(cond.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// Map data to base noise. Returns `z` and, per row, `Σ log σ` over all
    /// transforms.
    pub fn inverse(&self, x: &Array2<f64>, cond: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_batch(x, cond)?;
        let mut u = x.clone();
        let mut log_scale = Array1::zeros(x.nrows());
        for k in 0..self.transforms.len() {
            let (mu, sigma) = self.conditioner_outputs(k, &u, cond);
            log_scale += &sigma.mapv(f64::ln).sum_axis(Axis(1));
            u = (&u - &mu) / &sigma;
        }
        Ok((u, log_scale))
    }

    /// Conditional log-density of each row of `x`.
    pub fn log_density_batch(&self, x: &Array2<f64>, cond: &Array2<f64>) -> Result<Array1<f64>> {
        let (z, log_scale) = self.inverse(x, cond)?;
        let d = self.spec.dim as f64;
        let base = z.mapv(|v| -0.5 * v * v).sum_axis(Axis(1)) - d * HALF_LN_2PI;
        Ok(base - log_scale)
    }

    pub fn log_density(&self, x: &[f64], cond: &[f64]) -> Result<f64> {
        let xb = row(x);
        let cb = row(cond);
        Ok(self.log_density_batch(&xb, &cb)?[0])
    }

    /// Push base noise `z` (`B x D`) through the stack.
    pub fn forward_from_noise(&self, z: &Array2<f64>, cond: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_batch(z, cond)?;
        let mut u = z.clone();
        for k in (0..self.transforms.len()).rev() {
            let mut x = Array2::zeros(u.dim());
            for i in self.transforms[k].ordering() {
                let (mu, sigma) = self.conditioner_outputs(k, &x, cond);
                for r in 0..x.nrows() {
                    x[[r, i]] = mu[[r, i]] + sigma[[r, i]] * u[[r, i]];
                }
            }
            u = x;
        }
        Ok(u)
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, cond: &Array2<f64>, rng: &mut R) -> Array2<f64> {
        let z = Array2::from_shape_simple_fn((cond.nrows(), self.spec.dim), || rng.sample(StandardNormal));
        self.forward_from_noise(&z, cond).expect("finite conditions")
    }

    pub fn sample<R: Rng + ?Sized>(&self, cond: &[f64], rng: &mut R) -> Vec<f64> {
        self.sample_batch(&row(cond), rng).into_raw_vec_and_offset().0
    }

    /// Record per-row log-densities on `tape` with parameters read from `p`.
    pub fn log_density_tape(&self, tape: &mut Tape, p: Var, x: Var, cond: Option<Var>) -> Var {
        let d = self.spec.dim;
        let mut u = x;
        let mut log_scales = Vec::new();
        for t in &self.transforms {
            let raw = t.raw_outputs_tape(tape, p, u, cond);
            let mu = tape.slice_cols(raw, 0, d);
            let r = tape.slice_cols(raw, d, 2 * d);
            let sp = tape.softplus(r);
            let sigma = tape.add_scalar(sp, self.spec.sigma_floor);
            let diff = tape.sub(u, mu);
            u = tape.div(diff, sigma);
            let ls = tape.ln(sigma);
            log_scales.push(tape.sum_cols(ls));
        }
        let z2 = tape.square(u);
        let z2 = tape.sum_cols(z2);
        let mut lp = tape.scale(z2, -0.5);
        lp = tape.add_scalar(lp, -(d as f64) * HALF_LN_2PI);
        for ls in log_scales {
            lp = tape.sub(lp, ls);
        }
        lp
    }

    /// Weighted mean negative log-density plus `½·l2·‖ω‖²`, and its gradient
    /// with respect to the flow parameters. `weights = None` weighs rows
    /// equally.
    pub fn nll_grad(&self, x: &Array2<f64>, cond: &Array2<f64>, weights: Option<&[f64]>, l2: f64) -> Result<(f64, GradVector)> {
        self.check_batch(x, cond)?;
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = x.nrows();
        let w = match weights {
            Some(w) => {
                check_dim(n, w.len())?;
                let total: f64 = w.iter().sum();
                Array2::from_shape_fn((n, 1), |(r, _)| w[r] / total)
            }
            None => Array2::from_elem((n, 1), 1.0 / n as f64),
        };
        let mut tape = Tape::new();
        let p = tape.flat(&self.params);
        let xv = tape.leaf(x.clone());
        let cv = (self.spec.cond_dim > 0).then(|| tape.leaf(cond.clone()));
        let lp = self.log_density_tape(&mut tape, p, xv, cv);
        let wv = tape.leaf(w);
        let weighted = tape.mul(lp, wv);
        let total = tape.sum(weighted);
        let mut loss = tape.scale(total, -1.0);
        if l2 > 0.0 {
            let sq = tape.square(p);
            let reg = tape.sum(sq);
            let reg = tape.scale(reg, 0.5 * l2);
            loss = tape.add(loss, reg);
        }
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("flow loss = {value}")));
        }
        tape.backward(loss);
        Ok((value, GradVector(tape.grad(p).into_raw_vec_and_offset().0)))
    }
}

pub(crate) fn row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("shape")
}

/// Rows of `rows` stacked into a matrix of width `dim`.
pub fn stack_rows<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        assert_eq!(r.len(), dim, "row width");
        data.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(dim: usize, cond_dim: usize, n_transforms: usize, floor: f64) -> FlowSpec {
        FlowSpec { dim, cond_dim, hidden: vec![16, 16], n_transforms, sigma_floor: floor }
    }

    #[test]
    fn sigma_floor_values() {
        assert!((sigma_floor(-1e3, 0.1) - 0.1).abs() < 1e-300 + 1e-15);
        assert!((sigma_floor(0.0, 0.1) - (0.1 + 2f64.ln())).abs() < 1e-15);
        assert!((sigma_floor(0.0, 0.1) - 0.7931).abs() < 1e-4);
        let mut prev = sigma_floor(-30.0, 0.1);
        for k in -29..50 {
            let s = sigma_floor(k as f64, 0.1);
            assert!(s > prev && s > 0.1);
            prev = s;
        }
    }

    #[test]
    fn identity_flow_at_origin() {
        let flow = MafStack::identity(spec(2, 3, 2, 0.1));
        let lp = flow.log_density(&[0.0, 0.0], &[0.4, -1.0, 2.0]).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn single_scaled_transform() {
        let flow = MafStack::constant(spec(1, 0, 1, 0.0), 0.0, 0.1);
        let lp = flow.log_density(&[0.0], &[]).unwrap();
        assert!((lp - (-HALF_LN_2PI - 0.1f64.ln())).abs() < 1e-12);
        assert!((lp - 1.383647).abs() < 1e-6);
    }

    #[test]
    fn identity_flow_sampling_passes_noise_through() {
        let flow = MafStack::identity(spec(2, 1, 2, 0.1));
        let x = flow.forward_from_noise(&array![[0.3, -0.7]], &array![[5.0]]).unwrap();
        assert!((x[[0, 0]] - 0.3).abs() < 1e-12 && (x[[0, 1]] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let flow = MafStack::identity(spec(1, 1, 1, 0.1));
        assert!(flow.log_density(&[f64::NAN], &[0.0]).is_err());
        assert!(flow.log_density(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn masks_respect_ordering() {
        let flow = MafStack::zeros(spec(4, 2, 2, 0.1));
        assert_eq!(flow.transforms()[0].ordering(), vec![0, 1, 2, 3]);
        assert_eq!(flow.transforms()[1].ordering(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn round_trip_recovers_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flow = MafStack::new(spec(3, 2, 2, 0.1), &mut rng);
        let z = Array2::from_shape_simple_fn((20, 3), || rng.sample::<f64, _>(StandardNormal));
        let c = Array2::from_shape_simple_fn((20, 2), || rng.random_range(-1.0..1.0));
        let x = flow.forward_from_noise(&z, &c).unwrap();
        let (z2, _) = flow.inverse(&x, &c).unwrap();
        assert!((&z - &z2).iter().all(|d| d.abs() < 1e-9));
        assert!(flow.log_density_batch(&x, &c).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn duplicated_rows_equal_doubled_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flow = MafStack::new(spec(2, 1, 2, 0.1), &mut rng);
        let x = array![[0.1, 0.5], [-0.3, 0.2], [0.9, -1.0]];
        let c = array![[0.0], [1.0], [-1.0]];
        let xd = array![[0.1, 0.5], [0.1, 0.5], [-0.3, 0.2], [0.9, -1.0]];
        let cd = array![[0.0], [0.0], [1.0], [-1.0]];
        let (la, ga) = flow.nll_grad(&xd, &cd, None, 1e-2).unwrap();
        let (lb, gb) = flow.nll_grad(&x, &c, Some(&[2.0, 1.0, 1.0]), 1e-2).unwrap();
        assert!((la - lb).abs() < 1e-12);
        assert!(ga.0.iter().zip(&gb.0).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn tape_density_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let flow = MafStack::new(spec(3, 2, 2, 0.1), &mut rng);
        let x = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-2.0..2.0));
        let c = Array2::from_shape_simple_fn((5, 2), || rng.random_range(-2.0..2.0));
        let direct = flow.log_density_batch(&x, &c).unwrap();
        let mut tape = Tape::new();
        let p = tape.flat(&flow.params);
        let xv = tape.leaf(x);
        let cv = tape.leaf(c);
        let lp = flow.log_density_tape(&mut tape, p, xv, Some(cv));
        for r in 0..5 {
            assert!((tape.value(lp)[[r, 0]] - direct[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn fits_a_standard_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sp = FlowSpec { dim: 1, cond_dim: 1, hidden: vec![8], n_transforms: 1, sigma_floor: 0.1 };
        let mut flow = MafStack::new(sp, &mut rng);
        let data: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let mut opt = Adam::new(flow.num_params(), 1e-2);
        for _ in 0..1500 {
            let x = Array2::from_shape_fn((256, 1), |_| data[rng.random_range(0..data.len())]);
            let c = Array2::from_shape_fn((256, 1), |_| rng.random_range(-1.0..1.0));
            let (_, g) = flow.nll_grad(&x, &c, None, 0.0).unwrap();
            opt.step(&mut flow.params, &g);
        }
        let lp = flow.log_density(&[0.0], &[0.3]).unwrap();
        assert!((lp + HALF_LN_2PI).abs() < 0.05, "log p(0) = {lp}");
    }

    #[test]
    fn fits_a_bimodal_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sp = FlowSpec { dim: 1, cond_dim: 0, hidden: vec![32, 32], n_transforms: 2, sigma_floor: 0.01 };
        let mut flow = MafStack::new(sp, &mut rng);
        let draw = |rng: &mut ChaCha8Rng| {
            let centre = if rng.random::<bool>() { 2.0 } else { -2.0 };
            centre + 0.5 * rng.sample::<f64, _>(StandardNormal)
        };
        let mut opt = Adam::new(flow.num_params(), 3e-3);
        let empty = Array2::zeros((256, 0));
        for _ in 0..3000 {
            let x = Array2::from_shape_fn((256, 1), |_| draw(&mut rng));
            let (_, g) = flow.nll_grad(&x, &empty, None, 0.0).unwrap();
            opt.step(&mut flow.params, &g);
        }
        let xs = flow.sample_batch(&Array2::zeros((10_000, 0)), &mut rng);
        let frac = xs.iter().filter(|&&v| v > 0.0).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.03, "fraction above zero {frac}");
    }
}
