use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{BoundParams, Param, ParamKind, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected network: hidden layers use `activation`, the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    /// Half-width of the uniform init of the output layer, relative to the
    /// fan-in scale. Small values start the network near a constant output.
    pub final_scale: f64,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self {
            sizes,
            activation: Activation::Relu,
            final_scale: 1.0,
        }
    }

    pub fn with_final_scale(mut self, s: f64) -> Self {
        self.final_scale = s;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Fan-in scaled uniform init.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut params = Vec::with_capacity(2 * self.n_layers());
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if l + 1 == self.n_layers() {
                bound *= self.final_scale;
            }
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            });
            let b = Array2::from_shape_fn((1, fan_out), |_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            });
            params.push(Param::new(format!("l{l}.w"), ParamKind::Weight, w));
            params.push(Param::new(format!("l{l}.b"), ParamKind::Bias, b));
        }
        ParamSet::new(params).expect("finite init")
    }

    pub fn check(&self, p: &ParamSet) -> Result<()> {
        let expected: Vec<(usize, usize)> = (0..self.n_layers())
            .flat_map(|l| [(self.sizes[l], self.sizes[l + 1]), (1, self.sizes[l + 1])])
            .collect();
        if p.shapes() != expected {
            return Err(Error::Shape(format!(
                "parameter shapes {:?} do not match layer sizes {:?}",
                p.shapes(),
                self.sizes
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        if tape.value(x).ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                tape.value(x).ncols(),
                self.input_dim()
            )));
        }
        let mut h = x;
        for l in 0..self.n_layers() {
            h = tape.matmul(h, p.0[2 * l]);
            h = tape.add_bias(h, p.0[2 * l + 1]);
            if l + 1 < self.n_layers() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Forward pass without recording.
    pub fn predict(&self, p: &ParamSet, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut h = x.dot(p.value(0)) + p.value(1);
        for l in 1..self.n_layers() {
            h.mapv_inplace(|v| self.activation.apply(v));
            h = h.dot(p.value(2 * l)) + p.value(2 * l + 1);
        }
        Ok(h)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let mlp = Mlp::new(3, &[4], 2).with_final_scale(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = mlp.init(&mut rng);
        for i in 0..p.len() {
            let z = Array2::zeros(p.value(i).dim());
            p.set(i, z).unwrap();
        }
        let y = mlp.predict(&p, &arr2(&[[1.0, -2.0, 3.0]])).unwrap();
        assert_eq!(y, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn identity_linear_layer() {
        let mlp = Mlp::new(2, &[], 2);
        let p = ParamSet::new(vec![
            Param::new("l0.w", ParamKind::Weight, Array2::eye(2)),
            Param::new("l0.b", ParamKind::Bias, Array2::zeros((1, 2))),
        ])
        .unwrap();
        let x = arr2(&[[0.3, -1.7], [2.0, 5.0]]);
        assert_eq!(mlp.predict(&p, &x).unwrap(), x);
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let xv = t.input(x.clone());
        let y = mlp.forward(&mut t, &b, xv).unwrap();
        assert_eq!(t.value(y), &x);
    }

    /// Straight-line scalar recomputation of a two-hidden-layer ReLU network.
    fn oracle(p: &ParamSet, x: &[f64]) -> Vec<f64> {
        let layer = |w: &Array2<f64>, b: &Array2<f64>, h: &[f64], act: bool| -> Vec<f64> {
            (0..w.ncols())
                .map(|j| {
                    let mut s = b[[0, j]];
                    for (i, hi) in h.iter().enumerate() {
                        s += hi * w[[i, j]];
                    }
                    if act && s < 0.0 {
                        0.0
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = layer(p.value(0), p.value(1), x, true);
        let h2 = layer(p.value(2), p.value(3), &h1, true);
        layer(p.value(4), p.value(5), &h2, false)
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mlp = Mlp::new(4, &[7, 5], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = mlp.init(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xa = Array2::from_shape_vec((1, 4), x.clone()).unwrap();
            let y = mlp.predict(&p, &xa).unwrap();
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let xv = t.input(xa);
            let yt = mlp.forward(&mut t, &b, xv).unwrap();
            for (j, o) in oracle(&p, &x).iter().enumerate() {
                assert!((y[[0, j]] - o).abs() < 1e-12);
                assert_eq!(t.value(yt)[[0, j]], y[[0, j]]);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mlp = Mlp::new(3, &[4], 2);
        let p = mlp.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(mlp.predict(&p, &arr2(&[[1.0, 2.0]])).is_err());
        assert!(Mlp::new(3, &[5], 2).check(&p).is_err());
        assert!(mlp.check(&p).is_ok());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mlp = Mlp::new(3, &[6, 6], 2).with_activation(Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = mlp.init(&mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &ParamSet| -> f64 {
            let y = mlp.predict(p, &x).unwrap();
            y.mapv(|v| v * v).sum() * 0.5
        };
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let xv = t.input(x.clone());
        let y = mlp.forward(&mut t, &b, xv).unwrap();
        let sq = t.square(y);
        let out = t.sum_all(sq);
        let out = t.scale(out, 0.5);
        let mut g = t.backward(out);
        let grads = b.grads(&mut g);
        let eps = 1e-5;
        for _ in 0..100 {
            let i = rng.random_range(0..p.len());
            let (r, c) = p.value(i).dim();
            let (r, c) = (rng.random_range(0..r), rng.random_range(0..c));
            let mut pp = p.clone();
            let mut v = pp.value(i).clone();
            v[[r, c]] += eps;
            pp.set(i, v.clone()).unwrap();
            let up = loss(&pp);
            v[[r, c]] -= 2.0 * eps;
            pp.set(i, v).unwrap();
            let fd = (up - loss(&pp)) / (2.0 * eps);
            let an = grads[i][[r, c]];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-8);
        }
    }
}
