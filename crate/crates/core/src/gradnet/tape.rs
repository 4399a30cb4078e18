//! Reverse-mode differentiation over batched 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! consumes the tape, so a recorded graph can be differentiated only once:
//!
//! ```compile_fail
//! use racer_core::gradnet::Tape;
//! use ndarray::arr2;
//! let mut tape = Tape::new();
//! let x = tape.input(arr2(&[[1.0]]));
//! let y = tape.sum_all(x);
//! let _ = tape.backward(y);
//! let _ = tape.backward(y); // use of moved value
//! ```

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::riskmeasures::{cvar_grad_parts, cvar_parts};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Multiplies column `j` by `scale[j]` and adds `shift[j]`.
    AffineCols(Var, Rc<[f64]>),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    LogCosh(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    /// Row-wise CVaR of probability rows over fixed atoms.
    Cvar(Var, Rc<[f64]>, f64),
    /// Shifted tanh soft-clip of a column toward `[lo, hi]`; both bounds are 1x1 nodes.
    Softclip(Var, Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Whether it is a "parameter" or a constant only depends on
    /// whether the caller reads its gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `x + b` with `b` a 1 x cols row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x) + self.value(b);
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn affine_cols(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), scale.len(), "affine_cols scale width");
        assert_eq!(x.ncols(), shift.len(), "affine_cols shift width");
        let mut v = x.clone();
        for (j, mut col) in v.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|e| e * scale[j] + shift[j]);
        }
        self.push(v, Op::AffineCols(a, scale.into()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Numerically stable `ln(cosh(x))`.
    pub fn log_cosh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_cosh);
        self.push(v, Op::LogCosh(a))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            let lse = max + row.mapv(|x| (x - max).exp()).sum().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    /// Per-row sum, giving a rows x 1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    /// Row-wise CVaR of the probability rows of `probs` over `atoms`.
    pub fn cvar_rows(&mut self, probs: Var, atoms: Rc<[f64]>, alpha: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.ncols(), atoms.len(), "cvar_rows atom count");
        let mut v = Array2::zeros((p.nrows(), 1));
        for (i, row) in p.rows().into_iter().enumerate() {
            let row = row.to_vec();
            v[[i, 0]] = cvar_parts(&atoms, &row, alpha);
        }
        self.push(v, Op::Cvar(probs, atoms, alpha))
    }

    /// `eta * tanh((a - mu) / eta) + mu` with `eta`, `mu` from the bounds.
    pub fn softclip(&mut self, a: Var, lo: Var, hi: Var) -> Var {
        let (l, h) = (self.scalar(lo), self.scalar(hi));
        let eta = 0.5 * (h - l);
        let mu = 0.5 * (h + l);
        let v = self.value(a).mapv(|x| eta * ((x - mu) / eta).tanh() + mu);
        self.push(v, Op::Softclip(a, lo, hi))
    }

    /// Back-propagates from `out`, seeded with ones.
    pub fn backward(self, out: Var) -> Gradients {
        let seed = Array2::ones(self.nodes[out.0].value.dim());
        self.backward_with(out, seed)
    }

    /// Back-propagates `out_grad` from `out`. Consumes the tape.
    pub fn backward_with(self, out: Var, out_grad: Array2<f64>) -> Gradients {
        let n = self.nodes.len();
        assert_eq!(out_grad.dim(), self.nodes[out.0].value.dim(), "seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(out_grad);

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            let value_of = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&value_of(*b).t()));
                    acc(&mut grads, *b, value_of(*a).t().dot(&g));
                }
                Op::AddBias(x, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * value_of(*b));
                    acc(&mut grads, *b, &g * value_of(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::AffineCols(a, scale) => {
                    let mut g = g;
                    for (j, mut col) in g.axis_iter_mut(Axis(1)).enumerate() {
                        col *= scale[j];
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val).for_each(|g, y| {
                        if *y <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(val).for_each(|g, y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, g);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * val),
                Op::Square(a) => acc(&mut grads, *a, g * value_of(*a) * 2.0),
                Op::LogCosh(a) => {
                    let mut g = g;
                    Zip::from(&mut g).and(value_of(*a)).for_each(|g, x| *g *= x.tanh());
                    acc(&mut grads, *a, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut g = g;
                    Zip::from(&mut g).and(value_of(*a)).for_each(|g, x| {
                        if *x < *lo || *x > *hi {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * sum(g)
                    let mut dx = g;
                    for (mut row, y) in dx.rows_mut().into_iter().zip(val.rows()) {
                        let s = row.sum();
                        Zip::from(&mut row).and(&y).for_each(|d, y| *d -= y.exp() * s);
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::SumRows(a) => {
                    let shape = value_of(*a).dim();
                    let dx = Array2::from_shape_fn(shape, |(r, _)| g[[r, 0]]);
                    acc(&mut grads, *a, dx);
                }
                Op::SumAll(a) => {
                    let dx = Array2::from_elem(value_of(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, dx);
                }
                Op::MeanAll(a) => {
                    let x = value_of(*a);
                    let dx = Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64);
                    acc(&mut grads, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = value_of(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut dx = Array2::zeros(value_of(*a).dim());
                    dx.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, dx);
                }
                Op::SliceRows(a, start, end) => {
                    let mut dx = Array2::zeros(value_of(*a).dim());
                    dx.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, dx);
                }
                Op::Cvar(p, atoms, alpha) => {
                    let probs = value_of(*p);
                    let mut dx = Array2::zeros(probs.dim());
                    let mut buf = vec![0.0; atoms.len()];
                    for (r, (row, mut drow)) in
                        probs.rows().into_iter().zip(dx.rows_mut()).enumerate()
                    {
                        cvar_grad_parts(atoms, &row.to_vec(), *alpha, &mut buf);
                        let up = g[[r, 0]];
                        for (d, b) in drow.iter_mut().zip(&buf) {
                            *d = up * b;
                        }
                    }
                    acc(&mut grads, *p, dx);
                }
                Op::Softclip(a, lo, hi) => {
                    let (l, h) = (value_of(*lo)[[0, 0]], value_of(*hi)[[0, 0]]);
                    let eta = 0.5 * (h - l);
                    let mu = 0.5 * (h + l);
                    let x = value_of(*a);
                    let mut dx = Array2::zeros(x.dim());
                    let (mut dlo, mut dhi) = (0.0, 0.0);
                    Zip::from(&mut dx).and(x).and(&g).for_each(|d, x, g| {
                        let u = (x - mu) / eta;
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        *d = g * sech2;
                        // d/d eta and d/d mu of eta*tanh((x-mu)/eta) + mu
                        let d_eta = t - u * sech2;
                        let d_mu = 1.0 - sech2;
                        dhi += g * (0.5 * d_eta + 0.5 * d_mu);
                        dlo += g * (-0.5 * d_eta + 0.5 * d_mu);
                    });
                    acc(&mut grads, *a, dx);
                    acc(&mut grads, *lo, Array2::from_elem((1, 1), dlo));
                    acc(&mut grads, *hi, Array2::from_elem((1, 1), dhi));
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Gradients { grads, shapes }
    }
}

pub(crate) fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}
