//! CVaR actor objective and adaptive action limits.
//!
//! Actions flow `policy -> tanh -> rescale to hard bounds (a_pre) -> softclip
//! on limited dimensions (a_applied)`. The limit `v_plus` of every limited
//! dimension is a free scalar grown by ascending the same ensemble CVaR the
//! actor maximizes.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::critic::{CriticEnsemble, EntropyActions};
use crate::error::{Error, Result};
use crate::gradnet::{ParamSet, SquashedGaussian, Tape, Var};

/// Shifted-tanh approximation of `clip(a, v_minus, v_plus)`.
pub fn softclip(a: f64, v_minus: f64, v_plus: f64) -> Result<f64> {
    if !(v_minus < v_plus) {
        return Err(Error::DegenerateLimits { v_minus, v_plus });
    }
    let eta = 0.5 * (v_plus - v_minus);
    let mu = 0.5 * (v_plus + v_minus);
    Ok(eta * ((a - mu) / eta).tanh() + mu)
}

/// Partial derivatives of [`softclip`] with respect to `(a, v_minus, v_plus)`.
pub fn softclip_grad(a: f64, v_minus: f64, v_plus: f64) -> (f64, f64, f64) {
    let eta = 0.5 * (v_plus - v_minus);
    let mu = 0.5 * (v_plus + v_minus);
    let u = (a - mu) / eta;
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let d_eta = t - u * sech2;
    let d_mu = 1.0 - sech2;
    (sech2, 0.5 * (d_mu - d_eta), 0.5 * (d_mu + d_eta))
}

/// Per-dimension hard bounds of an action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionSpace {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action bounds must satisfy low < high".into()));
        }
        Ok(Self { low, high })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.low.iter().copied().zip(self.high.iter().copied()).collect()
    }

    /// Affine map from (-1, 1) onto the hard bounds, as (scale, shift).
    pub fn rescale_coefs(&self) -> (Vec<f64>, Vec<f64>) {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| (0.5 * (h - l), 0.5 * (h + l)))
            .unzip()
    }

    pub fn rescale(&self, unit: &Array2<f64>) -> Array2<f64> {
        let (scale, shift) = self.rescale_coefs();
        let mut out = unit.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * scale[j] + shift[j]);
        }
        out
    }
}

/// Learnable upper bounds on a subset of action dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    pub limited_dims: Vec<usize>,
    pub v_minus: Vec<f64>,
    pub v_plus: Vec<f64>,
    /// Hard ceiling for each `v_plus`.
    pub hard_max: Vec<f64>,
    /// Smallest allowed `v_plus - v_minus`.
    pub min_gap: Vec<f64>,
}

impl ActionLimits {
    /// Limits starting `initial_fraction` of the hard range above the hard minimum,
    /// with a floor gap of `gap_fraction` of the range.
    pub fn cautious(
        space: &ActionSpace,
        limited_dims: &[usize],
        initial_fraction: f64,
        gap_fraction: f64,
    ) -> Result<Self> {
        let mut l = Self {
            limited_dims: limited_dims.to_vec(),
            v_minus: vec![],
            v_plus: vec![],
            hard_max: vec![],
            min_gap: vec![],
        };
        for &d in limited_dims {
            if d >= space.dim() {
                return Err(Error::Config(format!("limited dimension {d} out of range")));
            }
            let (lo, hi) = (space.low[d], space.high[d]);
            let range = hi - lo;
            l.v_minus.push(lo);
            l.hard_max.push(hi);
            l.min_gap.push(gap_fraction * range);
            l.v_plus.push((lo + initial_fraction * range).max(lo + gap_fraction * range));
        }
        l.validate()?;
        Ok(l)
    }

    /// No limited dimensions: actions pass through unchanged.
    pub fn open() -> Self {
        Self {
            limited_dims: vec![],
            v_minus: vec![],
            v_plus: vec![],
            hard_max: vec![],
            min_gap: vec![],
        }
    }

    pub fn is_open(&self) -> bool {
        self.limited_dims.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, _) in self.limited_dims.iter().enumerate() {
            let (vm, vp) = (self.v_minus[i], self.v_plus[i]);
            if !(vm < vp) {
                return Err(Error::DegenerateLimits {
                    v_minus: vm,
                    v_plus: vp,
                });
            }
            if vp > self.hard_max[i] + 1e-12 {
                return Err(Error::Config(format!(
                    "v_plus {vp} exceeds hard bound {}",
                    self.hard_max[i]
                )));
            }
        }
        Ok(())
    }

    /// Clamps every `v_plus` into `[v_minus + min_gap, hard_max]`.
    pub fn clamp(&mut self) {
        for i in 0..self.v_plus.len() {
            let lo = self.v_minus[i] + self.min_gap[i];
            self.v_plus[i] = self.v_plus[i].clamp(lo, self.hard_max[i]);
        }
    }

    /// Records the soft-clip of the limited columns of `a_pre`. Returns the
    /// limited action and the `v_plus` leaves (one per limited dimension).
    pub fn apply_on_tape(&self, tape: &mut Tape, a_pre: Var) -> (Var, Vec<Var>) {
        if self.is_open() {
            return (a_pre, vec![]);
        }
        let cols = tape.value(a_pre).ncols();
        let mut parts = Vec::with_capacity(cols);
        let mut plus_vars = Vec::with_capacity(self.limited_dims.len());
        for j in 0..cols {
            let col = tape.slice_cols(a_pre, j, j + 1);
            match self.limited_dims.iter().position(|d| *d == j) {
                Some(i) => {
                    let lo = tape.constant_scalar(self.v_minus[i]);
                    let hi = tape.constant_scalar(self.v_plus[i]);
                    plus_vars.push(hi);
                    parts.push(tape.softclip(col, lo, hi));
                }
                None => parts.push(col),
            }
        }
        (tape.concat_cols(&parts), plus_vars)
    }
}

/// Soft-clips the limited dimensions of every row; other dimensions pass through.
pub fn apply_limits(a_pre: &Array2<f64>, limits: &ActionLimits) -> Result<Array2<f64>> {
    let mut out = a_pre.clone();
    for (i, &d) in limits.limited_dims.iter().enumerate() {
        if d >= out.ncols() {
            return Err(Error::Shape(format!("limited dimension {d} out of range")));
        }
        let (vm, vp) = (limits.v_minus[i], limits.v_plus[i]);
        for v in out.column_mut(d) {
            *v = softclip(*v, vm, vp)?;
        }
    }
    Ok(out)
}

/// Policy network plus the action space it is rescaled to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub policy: SquashedGaussian,
    pub space: ActionSpace,
}

/// Sampled actions: before and after the limits.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub pre_limit: Array2<f64>,
    pub applied: Array2<f64>,
}

impl Actor {
    /// Stochastic actions for `states` under `noise`.
    pub fn act(
        &self,
        params: &ParamSet,
        limits: &ActionLimits,
        states: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<ActionSample> {
        let (unit, _) = self.policy.sample(params, states, noise)?;
        let pre_limit = self.space.rescale(&unit);
        let applied = apply_limits(&pre_limit, limits)?;
        Ok(ActionSample { pre_limit, applied })
    }

    /// Deterministic `tanh(mean)` action after limits.
    pub fn act_deterministic(
        &self,
        params: &ParamSet,
        limits: &ActionLimits,
        states: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let unit = self.policy.mean_action(params, states)?;
        apply_limits(&self.space.rescale(&unit), limits)
    }

    /// Backup actions at the next states and the two entropy action sets at
    /// the current states. Backup actions share one noise draw across members.
    pub fn critic_actions(
        &self,
        params: &ParamSet,
        limits: &ActionLimits,
        states: &Array2<f64>,
        next_states: &Array2<f64>,
        next_noise: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<(Array2<f64>, EntropyActions)> {
        let next = self.act(params, limits, next_states, next_noise)?;
        let now = self.act(params, limits, states, noise)?;
        Ok((
            next.applied,
            EntropyActions {
                limited: now.applied,
                pre_limit: now.pre_limit,
            },
        ))
    }
}

/// Result of one pass of the shared actor / limit objective.
#[derive(Debug, Clone)]
pub struct PolicyObjective {
    /// `-mean ensemble CVaR` at the limited actions.
    pub loss: f64,
    pub mean_cvar: f64,
    /// Gradient w.r.t. the actor parameters (limits held fixed).
    pub actor_grads: Vec<Array2<f64>>,
    /// Gradient w.r.t. each `v_plus` (actor held fixed).
    pub limit_grads: Vec<f64>,
}

/// Evaluates `-mean_s cvar_alpha(mixture Z(s, softclip(a)))` with
/// `a ~ pi_theta(s)` reparameterized through `noise`, and returns its
/// gradients with respect to both the actor parameters and `v_plus`.
/// Critic parameters are constants.
pub fn policy_objective(
    critics: &CriticEnsemble,
    actor: &Actor,
    params: &ParamSet,
    limits: &ActionLimits,
    states: &Array2<f64>,
    alpha: f64,
    noise: &Array2<f64>,
) -> Result<PolicyObjective> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let sv = tape.input(states.clone());
    let sample = actor.policy.sample_on_tape(&mut tape, &bound, sv, noise)?;
    let (scale, shift) = actor.space.rescale_coefs();
    let a_pre = tape.affine_cols(sample.a_pre, &scale, &shift);
    let (a, plus_vars) = limits.apply_on_tape(&mut tape, a_pre);
    let members = critics.bind_members(&mut tape);
    let cv = critics.ensemble_cvar_on_tape(&mut tape, &members, sv, a, alpha)?;
    let mean_cvar = tape.mean_all(cv);
    let loss = tape.scale(mean_cvar, -1.0);
    let (l, mc) = (tape.scalar(loss), tape.scalar(mean_cvar));
    if !l.is_finite() {
        return Err(Error::NonFinite("policy objective".into()));
    }
    let mut g = tape.backward(loss);
    let limit_grads = plus_vars.iter().map(|v| g.get(*v)[[0, 0]]).collect();
    Ok(PolicyObjective {
        loss: l,
        mean_cvar: mc,
        actor_grads: bound.grads(&mut g),
        limit_grads,
    })
}

/// Actor loss and its gradient w.r.t. the actor parameters.
pub fn actor_loss(
    critics: &CriticEnsemble,
    actor: &Actor,
    params: &ParamSet,
    limits: &ActionLimits,
    states: &Array2<f64>,
    alpha: f64,
    noise: &Array2<f64>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let o = policy_objective(critics, actor, params, limits, states, alpha, noise)?;
    Ok((o.loss, o.actor_grads))
}

/// Limit loss and its gradient w.r.t. each `v_plus`.
pub fn limit_loss(
    critics: &CriticEnsemble,
    actor: &Actor,
    params: &ParamSet,
    limits: &ActionLimits,
    states: &Array2<f64>,
    alpha: f64,
    noise: &Array2<f64>,
) -> Result<(f64, Vec<f64>)> {
    let o = policy_objective(critics, actor, params, limits, states, alpha, noise)?;
    Ok((o.loss, o.limit_grads))
}

/// Adam state for the raw `v_plus` scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitOptimizer {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Array1<f64>,
    v: Array1<f64>,
}

impl LimitOptimizer {
    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn new(limits: &ActionLimits, lr: f64) -> Self {
        let n = limits.v_plus.len();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Array1::zeros(n),
            v: Array1::zeros(n),
        }
    }

    /// One descent step on the limit loss followed by the clamp.
    pub fn step(&mut self, limits: &mut ActionLimits, grads: &[f64]) -> Result<()> {
        if grads.len() != limits.v_plus.len() {
            return Err(Error::Shape("limit gradient count".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("limit gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, g) in grads.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let upd = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            limits.v_plus[i] -= self.lr * upd;
        }
        limits.clamp();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::AtomGrid;
    use crate::gradnet::{Param, ParamKind};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softclip_examples() {
        assert_eq!(softclip(0.3, -0.2, 0.8).unwrap(), 0.3);
        assert_abs_diff_eq!(softclip(0.5, -1.0, 1.0).unwrap(), 0.462_117_157_260_009_8, epsilon = 1e-12);
        assert_abs_diff_eq!(softclip(1e6, 0.0, 2.0).unwrap(), 2.0, epsilon = 1e-12);
        assert!(matches!(
            softclip(0.0, 1.0, 1.0),
            Err(Error::DegenerateLimits { .. })
        ));
    }

    #[test]
    fn softclip_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let vm = rng.random_range(-2.0..1.0);
            let vp = vm + rng.random_range(0.1..3.0);
            let a = rng.random_range(-4.0..4.0);
            let (da, dm, dp) = softclip_grad(a, vm, vp);
            let e = 1e-6;
            let f = |a: f64, vm: f64, vp: f64| softclip(a, vm, vp).unwrap();
            let fa = (f(a + e, vm, vp) - f(a - e, vm, vp)) / (2.0 * e);
            let fm = (f(a, vm + e, vp) - f(a, vm - e, vp)) / (2.0 * e);
            let fp = (f(a, vm, vp + e) - f(a, vm, vp - e)) / (2.0 * e);
            for (x, y) in [(da, fa), (dm, fm), (dp, fp)] {
                assert!((x - y).abs() <= 1e-3 * x.abs().max(y.abs()) + 1e-7);
            }
        }
    }

    #[test]
    fn softclip_properties() {
        let (vm, vp) = (0.2, 1.4);
        let (eta, mu) = (0.6, 0.8);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..400 {
            let a = -3.0 + i as f64 * 0.015;
            let y = softclip(a, vm, vp).unwrap();
            assert!(y > prev);
            assert!(y > vm && y < vp);
            prev = y;
        }
        let edge = softclip(mu + eta, vm, vp).unwrap();
        assert!((edge - vp).abs() <= eta * (1.0 - 1f64.tanh()) + 1e-12);
        assert!((softclip(mu + 1e-4, vm, vp).unwrap() - (mu + 1e-4)).abs() < 1e-10);
        // continuity in the bounds
        let a = 0.9;
        let y0 = softclip(a, vm, vp).unwrap();
        let y1 = softclip(a, vm, vp + 1e-7).unwrap();
        assert!((y1 - y0).abs() < 1e-6);
    }

    fn space() -> ActionSpace {
        ActionSpace::new(vec![-1.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn apply_limits_examples() {
        let s = space();
        let mut l = ActionLimits::cautious(&s, &[1], 1.0, 0.01).unwrap();
        assert_eq!(l.v_plus, vec![1.0]);
        let a = arr2(&[[0.3, 0.45], [-0.7, 0.5]]);
        let out = apply_limits(&a, &l).unwrap();
        // steering untouched, speed close to identity inside the limits
        assert_eq!(out[[0, 0]], 0.3);
        assert_eq!(out[[1, 0]], -0.7);
        assert!((out[[0, 1]] - 0.45).abs() < 0.05);
        assert_eq!(out[[1, 1]], 0.5);
        l.v_plus[0] = 0.2;
        let out = apply_limits(&a, &l).unwrap();
        assert!(out[[0, 1]] < 0.2);
        assert_eq!(apply_limits(&a, &ActionLimits::open()).unwrap(), a);
    }

    #[test]
    fn cautious_limits_start_low() {
        let l = ActionLimits::cautious(&space(), &[1], 0.2, 0.01).unwrap();
        assert_abs_diff_eq!(l.v_plus[0], 0.2);
        assert_eq!(l.v_minus[0], 0.0);
        assert!(ActionLimits::cautious(&space(), &[2], 0.2, 0.01).is_err());
    }

    #[test]
    fn limit_optimizer_clamps() {
        let mut l = ActionLimits::cautious(&space(), &[1], 0.2, 0.01).unwrap();
        let mut opt = LimitOptimizer::new(&l, 0.5);
        for _ in 0..10 {
            opt.step(&mut l, &[-1.0]).unwrap();
        }
        assert_eq!(l.v_plus[0], 1.0);
        for _ in 0..40 {
            opt.step(&mut l, &[1.0]).unwrap();
        }
        assert_abs_diff_eq!(l.v_plus[0], 0.01, epsilon = 1e-12);
        assert!(opt.step(&mut l, &[f64::NAN]).is_err());
    }

    /// Critic with one hidden layer whose output logits depend on the
    /// action only through a fixed direction; used for sign checks.
    pub(crate) fn actor_fixture(seed: u64) -> (CriticEnsemble, Actor, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = CriticEnsemble::new(
            3,
            &space().bounds(),
            &[12],
            AtomGrid::new(0.0, 10.0, 11).unwrap(),
            3,
            2.0,
            &mut rng,
        )
        .unwrap();
        let actor = Actor {
            policy: SquashedGaussian::new(3, &[10], 2),
            space: space(),
        };
        let p = actor.policy.net.init(&mut rng);
        (e, actor, p)
    }

    #[test]
    fn actor_and_limit_gradients_match_finite_differences() {
        let (e, actor, p) = actor_fixture(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
        let noise = actor.policy.draw_noise(&mut rng, 8);
        let limits = ActionLimits::cautious(&space(), &[1], 0.4, 0.01).unwrap();
        let alpha = 0.6;
        let base = policy_objective(&e, &actor, &p, &limits, &states, alpha, &noise).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let i = rng.random_range(0..p.len());
            let (r, c) = p.value(i).dim();
            let (r, c) = (rng.random_range(0..r), rng.random_range(0..c));
            let f = |d: f64| {
                let mut q = p.clone();
                let mut v = q.value(i).clone();
                v[[r, c]] += d;
                q.set(i, v).unwrap();
                actor_loss(&e, &actor, &q, &limits, &states, alpha, &noise).unwrap().0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            let an = base.actor_grads[i][[r, c]];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-7,
                "param {i}[{r},{c}] fd {fd} an {an}"
            );
            checked += 1;
        }
        for k in 0..100 {
            let mut l = limits.clone();
            l.v_plus[0] = 0.1 + 0.009 * k as f64;
            let (_, g) = limit_loss(&e, &actor, &p, &l, &states, alpha, &noise).unwrap();
            let f = |d: f64| {
                let mut l2 = l.clone();
                l2.v_plus[0] += d;
                limit_loss(&e, &actor, &p, &l2, &states, alpha, &noise).unwrap().0
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            assert!((fd - g[0]).abs() <= 1e-3 * fd.abs().max(g[0].abs()) + 1e-7);
        }
    }

    #[test]
    fn alpha_zero_is_negative_mixture_mean() {
        let (e, actor, p) = actor_fixture(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = Array2::from_shape_fn((16, 3), |_| rng.random_range(-1.0..1.0));
        let noise = actor.policy.draw_noise(&mut rng, 16);
        let limits = ActionLimits::cautious(&space(), &[1], 0.5, 0.01).unwrap();
        let (loss, _) = actor_loss(&e, &actor, &p, &limits, &states, 0.0, &noise).unwrap();
        let a = actor.act(&p, &limits, &states, &noise).unwrap().applied;
        let atoms = Array1::from(e.grid.atoms());
        let mean = e.mixture_probs(&states, &a).unwrap().dot(&atoms).mean().unwrap();
        assert_abs_diff_eq!(loss, -mean, epsilon = 1e-9);
    }

    /// Critic whose final layer ignores its hidden state: Z is the same
    /// for every (s, a).
    fn constant_critic(e: &mut CriticEnsemble, logits: &[f64]) {
        let mut members = e.members().to_vec();
        for m in members.iter_mut() {
            let n = m.len();
            let w = Array2::zeros(m.value(n - 2).dim());
            m.set(n - 2, w).unwrap();
            m.set(n - 1, Array2::from_shape_vec((1, logits.len()), logits.to_vec()).unwrap())
                .unwrap();
        }
        e.set_members(members.clone(), members).unwrap();
    }

    #[test]
    fn constant_critic_gives_zero_gradients() {
        let (mut e, actor, p) = actor_fixture(5);
        let logits: Vec<f64> = (0..11).map(|i| (i as f64 * 0.37).sin()).collect();
        constant_critic(&mut e, &logits);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let states = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
        let noise = actor.policy.draw_noise(&mut rng, 8);
        let limits = ActionLimits::cautious(&space(), &[1], 0.3, 0.01).unwrap();
        let o = policy_objective(&e, &actor, &p, &limits, &states, 0.9, &noise).unwrap();
        assert!(o.actor_grads.iter().all(|g| g.iter().all(|x| *x == 0.0)));
        assert_eq!(o.limit_grads, vec![0.0]);
        let mut l2 = limits.clone();
        let mut opt = LimitOptimizer::new(&l2, 1e-3);
        opt.step(&mut l2, &o.limit_grads).unwrap();
        assert_eq!(l2.v_plus, limits.v_plus);
    }

    #[test]
    fn shifting_atoms_shifts_loss_not_gradient() {
        let (e, actor, p) = actor_fixture(7);
        let mut shifted = e.clone();
        shifted.grid = AtomGrid::new(3.5, 13.5, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let states = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
        let noise = actor.policy.draw_noise(&mut rng, 8);
        let limits = ActionLimits::cautious(&space(), &[1], 0.3, 0.01).unwrap();
        let a = policy_objective(&e, &actor, &p, &limits, &states, 0.9, &noise).unwrap();
        let b = policy_objective(&shifted, &actor, &p, &limits, &states, 0.9, &noise).unwrap();
        assert_abs_diff_eq!(b.loss, a.loss - 3.5, epsilon = 1e-9);
        for (x, y) in a.actor_grads.iter().zip(&b.actor_grads) {
            assert!((x - y).iter().all(|d| d.abs() < 1e-9));
        }
    }

    /// Critic over a 1-D action whose distribution is a point mass at
    /// `atom(a)` for member-specific slopes. Built by hand: inputs are
    /// (state, action) and logits are `k * slope * a * z_index`.
    fn sloped_critic(slopes: &[f64]) -> CriticEnsemble {
        let space = ActionSpace::new(vec![0.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = CriticEnsemble::new(
            1,
            &space.bounds(),
            &[],
            AtomGrid::new(0.0, 10.0, 11).unwrap(),
            slopes.len(),
            1.0,
            &mut rng,
        )
        .unwrap();
        let members: Vec<ParamSet> = slopes
            .iter()
            .map(|s| {
                // input column 1 is the normalized action 2a - 1
                let w = Array2::from_shape_fn((2, 11), |(r, j)| {
                    if r == 1 {
                        s * (j as f64 - 5.0)
                    } else {
                        0.0
                    }
                });
                ParamSet::new(vec![
                    Param::new("l0.w", ParamKind::Weight, w),
                    Param::new("l0.b", ParamKind::Bias, Array2::zeros((1, 11))),
                ])
                .unwrap()
            })
            .collect();
        e.set_members(members.clone(), members).unwrap();
        e
    }

    fn one_d_actor() -> (Actor, ParamSet) {
        let actor = Actor {
            policy: SquashedGaussian::new(1, &[], 1),
            space: ActionSpace::new(vec![0.0], vec![1.0]).unwrap(),
        };
        // mean 2 (tanh ~ 0.96), log-std -2
        let p = ParamSet::new(vec![
            Param::new("l0.w", ParamKind::Weight, Array2::zeros((1, 2))),
            Param::new("l0.b", ParamKind::Bias, arr2(&[[2.0, -2.0]])),
        ])
        .unwrap();
        (actor, p)
    }

    #[test]
    fn confident_increasing_critic_pushes_limit_up() {
        let e = sloped_critic(&[1.0, 1.0, 1.0]);
        let (actor, p) = one_d_actor();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = Array2::zeros((32, 1));
        let noise = actor.policy.draw_noise(&mut rng, 32);
        let limits = ActionLimits::cautious(&actor.space, &[0], 0.6, 0.01).unwrap();
        let (_, g) = limit_loss(&e, &actor, &p, &limits, &states, 0.9, &noise).unwrap();
        assert!(g[0] < 0.0, "descent on the loss must raise v_plus, grad {}", g[0]);
    }

    #[test]
    fn disagreement_above_the_limit_stops_growth() {
        // One member predicts collapsing returns as the action grows.
        let e = sloped_critic(&[1.0, 1.0, -3.0]);
        let (actor, p) = one_d_actor();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = Array2::zeros((32, 1));
        let noise = actor.policy.draw_noise(&mut rng, 32);
        let limits = ActionLimits::cautious(&actor.space, &[0], 0.6, 0.01).unwrap();
        let (_, g) = limit_loss(&e, &actor, &p, &limits, &states, 0.9, &noise).unwrap();
        assert!(g[0] >= 0.0, "grad {}", g[0]);
    }
}
