use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::params::{BoundParams, ParamSet};
use super::tape::{log_cosh, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian policy squashed through `tanh`, so every action dimension lies in (-1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquashedGaussian {
    pub net: Mlp,
    pub act_dim: usize,
}

pub struct TapeSample {
    /// Squashed action, rows x act_dim.
    pub a_pre: Var,
    /// Log density of `a_pre`, rows x 1.
    pub log_prob: Var,
}

impl SquashedGaussian {
    pub fn new(obs_dim: usize, hidden: &[usize], act_dim: usize) -> Self {
        Self {
            net: Mlp::new(obs_dim, hidden, 2 * act_dim),
            act_dim,
        }
    }

    fn check_noise(&self, rows: usize, noise: &Array2<f64>) -> Result<()> {
        if noise.dim() != (rows, self.act_dim) {
            return Err(Error::Shape(format!(
                "noise {:?}, expected ({rows}, {})",
                noise.dim(),
                self.act_dim
            )));
        }
        Ok(())
    }

    /// Reparameterized sample recorded on `tape`; gradients flow through the
    /// mean and log-std heads.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        states: Var,
        noise: &Array2<f64>,
    ) -> Result<TapeSample> {
        let rows = tape.value(states).nrows();
        self.check_noise(rows, noise)?;
        let k = self.act_dim;
        let out = self.net.forward(tape, params, states)?;
        let mu = tape.slice_cols(out, 0, k);
        let log_std = tape.slice_cols(out, k, 2 * k);
        let log_std = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        let std = tape.exp(log_std);
        let eps = tape.input(noise.clone());
        let spread = tape.mul(std, eps);
        let u = tape.add(mu, spread);
        let a_pre = tape.tanh(u);

        let base = noise
            .map_axis(Axis(1), |r| r.iter().map(|e| -0.5 * e * e - HALF_LN_2PI).sum::<f64>())
            .insert_axis(Axis(1));
        let base = tape.input(base);
        let ls_sum = tape.sum_rows(log_std);
        let lc = tape.log_cosh(u);
        let lc_sum = tape.sum_rows(lc);
        let lc_sum = tape.scale(lc_sum, 2.0);
        let lp = tape.sub(base, ls_sum);
        let log_prob = tape.add(lp, lc_sum);
        Ok(TapeSample { a_pre, log_prob })
    }

    /// Same computation as [`Self::sample_on_tape`] without recording.
    pub fn sample(
        &self,
        params: &ParamSet,
        states: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_noise(states.nrows(), noise)?;
        let k = self.act_dim;
        let out = self.net.predict(params, states)?;
        let mut a = Array2::zeros((states.nrows(), k));
        let mut lp = Array1::zeros(states.nrows());
        for r in 0..states.nrows() {
            let mut acc = 0.0;
            for j in 0..k {
                let ls = out[[r, k + j]].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let e = noise[[r, j]];
                let u = out[[r, j]] + ls.exp() * e;
                a[[r, j]] = u.tanh();
                acc += -0.5 * e * e - HALF_LN_2PI - ls + 2.0 * log_cosh(u);
            }
            lp[r] = acc;
        }
        Ok((a, lp))
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mean_action(&self, params: &ParamSet, states: &Array2<f64>) -> Result<Array2<f64>> {
        let out = self.net.predict(params, states)?;
        Ok(out.slice(ndarray::s![.., 0..self.act_dim]).mapv(f64::tanh))
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, self.act_dim), |_| rng.sample(StandardNormal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradnet::params::ParamKind;
    use crate::gradnet::Param;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One-dimensional policy with constant output (mu, log_std).
    fn constant_policy(mu: f64, log_std: f64) -> (SquashedGaussian, ParamSet) {
        let pol = SquashedGaussian::new(1, &[], 1);
        let p = ParamSet::new(vec![
            Param::new("l0.w", ParamKind::Weight, Array2::zeros((1, 2))),
            Param::new("l0.b", ParamKind::Bias, arr2(&[[mu, log_std]])),
        ])
        .unwrap();
        (pol, p)
    }

    #[test]
    fn tiny_std_is_deterministic_tanh_mean() {
        let (pol, p) = constant_policy(0.4, -40.0);
        let s = arr2(&[[0.0]]);
        let (a, _) = pol.sample(&p, &s, &arr2(&[[1.0]])).unwrap();
        // log-std is clamped at -5, so the residual spread is exp(-5).
        assert!((a[[0, 0]] - 0.4f64.tanh()).abs() < 1e-2);
        assert_eq!(pol.mean_action(&p, &s).unwrap()[[0, 0]], 0.4f64.tanh());
    }

    #[test]
    fn zero_mean_unit_std_zero_noise() {
        let (pol, p) = constant_policy(0.0, 0.0);
        let (a, _) = pol.sample(&p, &arr2(&[[0.0]]), &arr2(&[[0.0]])).unwrap();
        assert_eq!(a[[0, 0]], 0.0);
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let pol = SquashedGaussian::new(3, &[8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = pol.net.init(&mut rng);
        let s = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let noise = pol.draw_noise(&mut rng, 4);
        let (a, lp) = pol.sample(&p, &s, &noise).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let sv = t.input(s);
        let ts = pol.sample_on_tape(&mut t, &b, sv, &noise).unwrap();
        for r in 0..4 {
            assert!((t.value(ts.log_prob)[[r, 0]] - lp[r]).abs() < 1e-12);
            for j in 0..2 {
                assert_eq!(t.value(ts.a_pre)[[r, j]], a[[r, j]]);
            }
        }
    }

    #[test]
    fn log_prob_matches_histogram_density() {
        let (pol, p) = constant_policy(0.3, -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let s = Array2::zeros((n, 1));
        let noise = pol.draw_noise(&mut rng, n);
        let (a, _) = pol.sample(&p, &s, &noise).unwrap();
        let bins = 40;
        let mut counts = vec![0usize; bins];
        for v in a.iter() {
            let b = (((v + 1.0) / 2.0) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let width = 2.0 / bins as f64;
        for (b, c) in counts.iter().enumerate() {
            let centre = -1.0 + (b as f64 + 0.5) * width;
            // invert tanh to get the matching noise value
            let e = (centre.atanh() - 0.3) / (-0.5f64).exp();
            let (_, lp) = pol.sample(&p, &arr2(&[[0.0]]), &arr2(&[[e]])).unwrap();
            let density = lp[0].exp();
            let empirical = *c as f64 / (n as f64 * width);
            if density > 0.2 {
                assert!(
                    (empirical - density).abs() / density < 0.03,
                    "bin {b}: empirical {empirical} density {density}"
                );
            }
        }
    }
}
