//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-valued operations as they are evaluated; calling
//! [`Tape::backward`] on a scalar node accumulates exact gradients for every
//! node on the tape. Rows are batch items by convention.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `rows x cols` row-major window into a `1 x n` node.
    View { src: usize, offset: usize },
    MatMul(usize, usize),
    MulConst(usize, Rc<Array2<f64>>),
    /// `(B x m) + (1 x m)` with the row broadcast.
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    SumCols(usize),
    Concat(Vec<usize>),
    Slice { src: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A `1 x n` leaf holding a flat parameter vector.
    pub fn flat(&mut self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("shape"))
    }

    /// Reshape `rows * cols` entries of a `1 x n` node, starting at `offset`.
    pub fn view(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let flat = &self.nodes[src.0].value;
        assert_eq!(flat.nrows(), 1, "view source must be a row vector");
        let data = flat.slice(s![0, offset..offset + rows * cols]).to_vec();
        let value = Array2::from_shape_vec((rows, cols), data).expect("shape");
        self.push(value, Op::View { src: src.0, offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// Elementwise product with a constant matrix (e.g. a connectivity mask).
    pub fn mul_const(&mut self, a: Var, c: Rc<Array2<f64>>) -> Var {
        let value = self.value(a) * &*c;
        self.push(value, Op::MulConst(a.0, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a.0, row.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a.0))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, as a `B x 1` node.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a.0))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::Slice { src: a.0, start })
    }

    /// Per-row diagonal Gaussian log-density of `x` under mean `mu` and
    /// standard deviation `sigma` (all `B x D`), as a `B x 1` node.
    pub fn gaussian_log_density(&mut self, x: Var, mu: Var, sigma: Var) -> Var {
        let d = self.value(x).ncols() as f64;
        let diff = self.sub(x, mu);
        let z = self.div(diff, sigma);
        let z2 = self.square(z);
        let quad = self.scale(z2, -0.5);
        let log_sigma = self.ln(sigma);
        let per_dim = self.sub(quad, log_sigma);
        let rows = self.sum_cols(per_dim);
        self.add_scalar(rows, -0.5 * d * (2.0 * std::f64::consts::PI).ln())
    }

    /// Accumulate gradients of the scalar `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of the last `backward` target with respect to `v`
    /// (zeros if `v` does not influence it).
    pub fn grad(&self, v: Var) -> Array2<f64> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.value(v).dim()),
        }
    }

    fn accumulate(&mut self, i: usize, g: Array2<f64>) {
        match &mut self.grads[i] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Array2<f64>) {
        let nodes = &self.nodes;
        let mut out: Vec<(usize, Array2<f64>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::View { src, offset } => {
                let (src, offset) = (*src, *offset);
                let len = nodes[src].value.len();
                let acc = self.grads[src].get_or_insert_with(|| Array2::zeros((1, len)));
                let flat = g.as_standard_layout();
                let mut window = acc.slice_mut(s![0, offset..offset + g.len()]);
                window += &ndarray::ArrayView1::from(flat.as_slice().expect("contiguous"));
                return;
            }
            Op::MatMul(a, b) => {
                out.push((*a, g.dot(&nodes[*b].value.t())));
                out.push((*b, nodes[*a].value.t().dot(g)));
            }
            Op::MulConst(a, c) => out.push((*a, g * &**c)),
            Op::AddRow(a, r) => {
                out.push((*a, g.clone()));
                out.push((*r, g.sum_axis(Axis(0)).insert_axis(Axis(0))));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, -g));
            }
            Op::Mul(a, b) => {
                out.push((*a, g * &nodes[*b].value));
                out.push((*b, g * &nodes[*a].value));
            }
            Op::Div(a, b) => {
                let bv = &nodes[*b].value;
                out.push((*a, g / bv));
                let mut gb = g * &nodes[i].value;
                gb /= bv;
                out.push((*b, -gb));
            }
            Op::Scale(a, k) => out.push((*a, g * *k)),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Tanh(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&nodes[i].value).for_each(|g, &y| *g *= 1.0 - y * y);
                out.push((*a, ga));
            }
            Op::Exp(a) => out.push((*a, g * &nodes[i].value)),
            Op::Log(a) => out.push((*a, g / &nodes[*a].value)),
            Op::Softplus(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&nodes[*a].value).for_each(|g, &x| *g *= sigmoid(x));
                out.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&nodes[i].value).for_each(|g, &y| *g *= y * (1.0 - y));
                out.push((*a, ga));
            }
            Op::Square(a) => {
                let mut ga = g * &nodes[*a].value;
                ga *= 2.0;
                out.push((*a, ga));
            }
            Op::Sum(a) => out.push((*a, Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]))),
            Op::SumCols(a) => {
                let dim = nodes[*a].value.dim();
                out.push((*a, g.broadcast(dim).expect("B x 1 broadcast").to_owned()));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = nodes[p].value.ncols();
                    out.push((p, g.slice(s![.., start..start + w]).to_owned()));
                    start += w;
                }
            }
            Op::Slice { src, start } => {
                let dim = nodes[*src].value.dim();
                let mut ga = Array2::zeros(dim);
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                out.push((*src, ga));
            }
        }
        for (j, gj) in out {
            self.accumulate(j, gj);
        }
    }
}
