//! Desk-scale driving environment with stochastic rollovers, and an exact
//! return-distribution oracle for small tabular MDPs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actor_limits::ActionSpace;
use crate::error::{Error, Result};
use crate::riskmeasures::CategoricalDistribution;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rollover hazard: `p = sigmoid(k * (speed * |steer| * roughness - threshold))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazardConfig {
    pub k: f64,
    pub threshold: f64,
    /// Mean terrain roughness.
    pub roughness_base: f64,
    /// Amplitude of the sinusoidal roughness variation.
    pub roughness_amplitude: f64,
    /// Spatial wavelength of the roughness field (m).
    pub roughness_wavelength: f64,
}

impl Default for HazardConfig {
    fn default() -> Self {
        Self {
            k: 5.0,
            threshold: 3.0,
            roughness_base: 1.0,
            roughness_amplitude: 0.5,
            roughness_wavelength: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliffCarConfig {
    pub wheelbase: f64,
    /// Steering angle at `steer = 1` (rad).
    pub max_steer_angle: f64,
    pub dt: f64,
    /// Speed at `speed_cmd = 1` (m/s).
    pub max_speed: f64,
    pub goal_radius: f64,
    pub goal_sigma: f64,
    /// Failures above this speed (m/s) are also counted separately.
    pub fast_speed: f64,
    /// Episode cap used only by evaluation rollouts.
    pub eval_episode_steps: usize,
    pub terrain_seed: u64,
    pub hazard: HazardConfig,
}

impl Default for CliffCarConfig {
    fn default() -> Self {
        Self {
            wheelbase: 0.5,
            max_steer_angle: 0.5,
            dt: 0.1,
            max_speed: 5.0,
            goal_radius: 1.0,
            goal_sigma: 5.0,
            fast_speed: 2.0,
            eval_episode_steps: 500,
            terrain_seed: 7,
            hazard: HazardConfig::default(),
        }
    }
}

impl CliffCarConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wheelbase", self.wheelbase),
            ("max_steer_angle", self.max_steer_angle),
            ("dt", self.dt),
            ("max_speed", self.max_speed),
            ("goal_radius", self.goal_radius),
            ("goal_sigma", self.goal_sigma),
            ("hazard.k", self.hazard.k),
            ("hazard.roughness_wavelength", self.hazard.roughness_wavelength),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.hazard.roughness_amplitude < 0.0
            || self.hazard.roughness_amplitude > self.hazard.roughness_base
        {
            return Err(Error::Config("roughness must stay nonnegative".into()));
        }
        if self.eval_episode_steps == 0 {
            return Err(Error::Config("eval_episode_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub heading: f64,
    pub goal: [f64; 2],
    pub roughness: f64,
}

/// The randomness consumed by one step, drawn up front so that stepping is a
/// pure function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDraw {
    /// Uniform in [0, 1); the step fails when it falls below the hazard.
    pub failure_u: f64,
    /// Standard normal pair used if a new goal is needed.
    pub goal_noise: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub failed: bool,
    pub done: bool,
    /// Speed driven during the step (m/s).
    pub speed: f64,
    pub goal_reached: bool,
}

/// Kinematic bicycle on rough terrain. Action = (steer in [-1, 1], speed_cmd in [0, 1]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliffCar {
    pub config: CliffCarConfig,
    phase: [f64; 2],
}

pub const OBS_DIM: usize = 5;
pub const STEER: usize = 0;
pub const SPEED: usize = 1;

impl CliffCar {
    pub fn new(config: CliffCarConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.terrain_seed);
        let tau = std::f64::consts::TAU;
        let phase = [rng.random_range(0.0..tau), rng.random_range(0.0..tau)];
        Ok(Self { config, phase })
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new(vec![-1.0, 0.0], vec![1.0, 1.0]).expect("static bounds")
    }

    /// Dimensions subject to adaptive limits (speed only).
    pub fn limited_dims(&self) -> Vec<usize> {
        vec![SPEED]
    }

    pub fn roughness(&self, p: [f64; 2]) -> f64 {
        let h = &self.config.hazard;
        let w = std::f64::consts::TAU / h.roughness_wavelength;
        h.roughness_base
            + h.roughness_amplitude * (w * p[0] + self.phase[0]).sin() * (w * p[1] + self.phase[1]).sin()
    }

    /// Upper bound on the per-step reward magnitude.
    pub fn max_reward(&self) -> f64 {
        self.config.max_speed
    }

    fn fresh_goal(&self, p: [f64; 2], noise: [f64; 2]) -> [f64; 2] {
        let s = self.config.goal_sigma;
        let (mut dx, mut dy) = (s * noise[0], s * noise[1]);
        let d = dx.hypot(dy);
        let min_d = 1.5 * self.config.goal_radius;
        if d < min_d {
            if d > 0.0 {
                dx *= min_d / d;
                dy *= min_d / d;
            } else {
                dx = min_d;
            }
        }
        [p[0] + dx, p[1] + dy]
    }

    /// Deterministic initial state for `seed`.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let position = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let noise = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        EnvState {
            position,
            velocity: [0.0, 0.0],
            heading,
            goal: self.fresh_goal(position, noise),
            roughness: self.roughness(position),
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> StepDraw {
        StepDraw {
            failure_u: rng.random::<f64>(),
            goal_noise: [rng.sample(StandardNormal), rng.sample(StandardNormal)],
        }
    }

    /// Per-step rollover probability for `action` taken in `state`.
    pub fn hazard(&self, state: &EnvState, action: [f64; 2]) -> f64 {
        let h = &self.config.hazard;
        let speed = action[SPEED].clamp(0.0, 1.0) * self.config.max_speed;
        let x = speed * action[STEER].clamp(-1.0, 1.0).abs() * state.roughness;
        sigmoid(h.k * (x - h.threshold))
    }

    pub fn observe(&self, s: &EnvState) -> [f64; OBS_DIM] {
        let dx = s.goal[0] - s.position[0];
        let dy = s.goal[1] - s.position[1];
        let bearing = dy.atan2(dx) - s.heading;
        let speed = s.velocity[0].hypot(s.velocity[1]);
        [
            speed / self.config.max_speed,
            bearing.cos(),
            bearing.sin(),
            dx.hypot(dy).min(10.0) / 10.0,
            s.roughness,
        ]
    }

    /// Advances one step. Actions outside the hard bounds are clamped.
    pub fn step(&self, s: &EnvState, action: [f64; 2], draw: &StepDraw) -> StepResult {
        let c = &self.config;
        let steer = action[STEER].clamp(-1.0, 1.0);
        let speed = action[SPEED].clamp(0.0, 1.0) * c.max_speed;
        let p_fail = self.hazard(s, action);

        let delta = steer * c.max_steer_angle;
        let heading = s.heading + speed / c.wheelbase * delta.tan() * c.dt;
        let velocity = [speed * heading.cos(), speed * heading.sin()];
        let position = [
            s.position[0] + velocity[0] * c.dt,
            s.position[1] + velocity[1] * c.dt,
        ];
        let to_goal = [s.goal[0] - s.position[0], s.goal[1] - s.position[1]];
        let dist = to_goal[0].hypot(to_goal[1]);
        let g_hat = if dist > 0.0 {
            [to_goal[0] / dist, to_goal[1] / dist]
        } else {
            [0.0, 0.0]
        };
        let failed = draw.failure_u < p_fail;
        let reached = (s.goal[0] - position[0]).hypot(s.goal[1] - position[1]) < c.goal_radius;
        let goal = if reached {
            self.fresh_goal(position, draw.goal_noise)
        } else {
            s.goal
        };
        let next_state = EnvState {
            position,
            velocity,
            heading,
            goal,
            roughness: self.roughness(position),
        };
        let reward = if failed {
            0.0
        } else {
            velocity[0] * g_hat[0] + velocity[1] * g_hat[1]
        };
        StepResult {
            next_state,
            reward,
            failed,
            done: failed,
            speed,
            goal_reached: reached && !failed,
        }
    }
}

/// Environment instance with its own rng stream and failure accounting.
/// Resets only on failure.
#[derive(Debug, Clone)]
pub struct CliffCarRunner {
    pub env: CliffCar,
    pub state: EnvState,
    rng: ChaCha8Rng,
    reset_seed: u64,
    pub failures: u64,
    pub fast_failures: u64,
    pub episode: u64,
}

impl CliffCarRunner {
    pub fn new(env: CliffCar, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reset_seed = rng.random();
        let state = env.reset(reset_seed);
        Self {
            env,
            state,
            rng,
            reset_seed,
            failures: 0,
            fast_failures: 0,
            episode: 0,
        }
    }

    pub fn observe(&self) -> [f64; OBS_DIM] {
        self.env.observe(&self.state)
    }

    /// Steps the environment; on failure the counters increment once and the
    /// state is reset. The returned result carries the pre-reset next state.
    pub fn step(&mut self, action: [f64; 2]) -> StepResult {
        let draw = CliffCar::draw(&mut self.rng);
        let r = self.env.step(&self.state, action, &draw);
        if r.failed {
            self.failures += 1;
            if r.speed > self.env.config.fast_speed {
                self.fast_failures += 1;
            }
            self.reset();
        } else {
            self.state = r.next_state;
        }
        r
    }

    fn reset(&mut self) {
        self.episode += 1;
        self.reset_seed = self.reset_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        self.state = self.env.reset(self.reset_seed);
    }
}

/// Appends one JSON line per step result.
pub fn write_trajectory<W: Write>(mut w: W, steps: &[StepResult]) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectory_file(path: &Path, steps: &[StepResult]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectory(f, steps)
}

/// One stochastic outcome of taking an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub prob: f64,
    pub next: usize,
    pub reward: f64,
}

/// Finite MDP with stochastic rewards attached to outcomes. Terminal states
/// absorb with no further reward; failure states are terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    /// `outcomes[s][a]`.
    pub outcomes: Vec<Vec<Vec<Outcome>>>,
    pub terminal: Vec<bool>,
    pub failure: Vec<bool>,
}

impl TabularMDP {
    pub fn new(
        outcomes: Vec<Vec<Vec<Outcome>>>,
        terminal: Vec<bool>,
        failure: Vec<bool>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n == 0 || terminal.len() != n || failure.len() != n {
            return Err(Error::Config("state tables disagree in size".into()));
        }
        let n_actions = outcomes[0].len();
        for (s, acts) in outcomes.iter().enumerate() {
            if failure[s] && !terminal[s] {
                return Err(Error::Config(format!("failure state {s} must be terminal")));
            }
            if acts.len() != n_actions {
                return Err(Error::Config("every state needs the same action count".into()));
            }
            if terminal[s] {
                continue;
            }
            for (a, outs) in acts.iter().enumerate() {
                let total: f64 = outs.iter().map(|o| o.prob).sum();
                if (total - 1.0).abs() > 1e-9
                    || outs.iter().any(|o| o.next >= n || o.prob < 0.0 || !o.reward.is_finite())
                {
                    return Err(Error::InvalidDistribution(format!(
                        "transition row ({s}, {a}) is not a distribution over states"
                    )));
                }
            }
        }
        Ok(Self {
            outcomes,
            terminal,
            failure,
        })
    }

    pub fn n_states(&self) -> usize {
        self.outcomes.len()
    }

    pub fn n_actions(&self) -> usize {
        self.outcomes[0].len()
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.outcomes
            .iter()
            .flatten()
            .flatten()
            .map(|o| o.reward.abs())
            .fold(0.0, f64::max)
    }

    /// Start `0`. `safe` pays 1 and ends. `risky` pays 2 and moves to
    /// state 1, which pays 2 and ends with probability 0.8 or fails with
    /// reward 0. State 2 is the absorbing success state, state 3 the failure.
    pub fn risky_bandit() -> Self {
        let o = |prob, next, reward| Outcome { prob, next, reward };
        let risky_tail = vec![o(0.8, 2, 2.0), o(0.2, 3, 0.0)];
        Self::new(
            vec![
                vec![vec![o(1.0, 2, 1.0)], vec![o(1.0, 1, 2.0)]],
                vec![risky_tail.clone(), risky_tail],
                vec![vec![], vec![]],
                vec![vec![], vec![]],
            ],
            vec![false, false, true, true],
            vec![false, false, false, true],
        )
        .expect("valid construction")
    }

    /// Samples one outcome of `(s, a)`.
    pub fn sample<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Outcome {
        let outs = &self.outcomes[s][a];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for o in outs {
            acc += o.prob;
            if u < acc {
                return *o;
            }
        }
        *outs.last().expect("non-terminal state has outcomes")
    }

    /// Monte Carlo return of one rollout starting with `(s, a)`.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        policy: &[Vec<f64>],
        gamma: f64,
        max_steps: usize,
        rng: &mut R,
    ) -> f64 {
        let (mut s, mut a) = (s, a);
        let (mut g, mut disc) = (0.0, 1.0);
        for _ in 0..max_steps {
            let o = self.sample(s, a, rng);
            g += disc * o.reward;
            disc *= gamma;
            s = o.next;
            if self.terminal[s] {
                break;
            }
            a = sample_action(&policy[s], rng);
        }
        g
    }
}

fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

fn key(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

/// Exact return distribution of every `(s, a)` under `policy` (rows of
/// action probabilities), enumerating all trajectories up to `horizon`
/// steps. Mass still running at the horizon keeps its partial return, which
/// is off by at most `gamma^horizon * r_max / (1 - gamma)`; that bound must
/// not exceed `precision`. Terminal states get a point mass at 0.
pub fn tabular_return_distribution(
    m: &TabularMDP,
    policy: &[Vec<f64>],
    gamma: f64,
    horizon: usize,
    precision: f64,
) -> Result<Vec<Vec<CategoricalDistribution>>> {
    if !(gamma >= 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if policy.len() != m.n_states()
        || policy.iter().any(|r| {
            r.len() != m.n_actions() || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
        })
    {
        return Err(Error::InvalidDistribution("policy table".into()));
    }
    let r_max = m.max_abs_reward();
    let tail_bound = |h: usize| gamma.powi(h as i32) * r_max / (1.0 - gamma);
    let mut out = Vec::with_capacity(m.n_states());
    for s in 0..m.n_states() {
        let mut row = Vec::with_capacity(m.n_actions());
        for a in 0..m.n_actions() {
            if m.terminal[s] {
                row.push(CategoricalDistribution::point_mass(0.0));
                continue;
            }
            // frontier: (state, return key) -> (return, mass)
            let mut frontier: BTreeMap<(usize, i64), (f64, f64)> = BTreeMap::new();
            let mut finished: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
            let add = |map: &mut BTreeMap<(usize, i64), (f64, f64)>,
                           fin: &mut BTreeMap<i64, (f64, f64)>,
                           next: usize,
                           g: f64,
                           p: f64| {
                if m.terminal[next] {
                    fin.entry(key(g)).or_insert((g, 0.0)).1 += p;
                } else {
                    map.entry((next, key(g))).or_insert((g, 0.0)).1 += p;
                }
            };
            for o in &m.outcomes[s][a] {
                if o.prob > 0.0 {
                    add(&mut frontier, &mut finished, o.next, o.reward, o.prob);
                }
            }
            let mut disc = gamma;
            for _ in 1..horizon {
                if frontier.is_empty() {
                    break;
                }
                let mut next_frontier = BTreeMap::new();
                for ((st, _), (g, p)) in frontier {
                    for (act, pa) in policy[st].iter().enumerate() {
                        if *pa == 0.0 {
                            continue;
                        }
                        for o in &m.outcomes[st][act] {
                            if o.prob > 0.0 {
                                add(
                                    &mut next_frontier,
                                    &mut finished,
                                    o.next,
                                    g + disc * o.reward,
                                    p * pa * o.prob,
                                );
                            }
                        }
                    }
                }
                frontier = next_frontier;
                disc *= gamma;
            }
            if !frontier.is_empty() && tail_bound(horizon) > precision {
                let required = if gamma == 0.0 || r_max == 0.0 {
                    horizon
                } else {
                    ((precision * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil() as usize
                };
                return Err(Error::HorizonTooSmall {
                    given: horizon,
                    required,
                    precision,
                });
            }
            for (_, (g, p)) in frontier {
                finished.entry(key(g)).or_insert((g, 0.0)).1 += p;
            }
            let (atoms, probs): (Vec<f64>, Vec<f64>) = finished.into_values().unzip();
            row.push(CategoricalDistribution::normalized(atoms, probs)?);
        }
        out.push(row);
    }
    Ok(out)
}

/// Total-variation distance between two distributions on arbitrary atoms.
pub fn total_variation(a: &CategoricalDistribution, b: &CategoricalDistribution) -> f64 {
    let mut mass: BTreeMap<i64, f64> = BTreeMap::new();
    for (x, p) in a.atoms().iter().zip(a.probs()) {
        *mass.entry(key(*x)).or_default() += p;
    }
    for (x, p) in b.atoms().iter().zip(b.probs()) {
        *mass.entry(key(*x)).or_default() -= p;
    }
    0.5 * mass.values().map(|v| v.abs()).sum::<f64>()
}
