//! Off-policy training loop: replay, critic / actor / limit updates, failure
//! accounting, metrics and checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::actor_limits::{
    apply_limits, policy_objective, ActionLimits, ActionSpace, Actor, LimitOptimizer,
};
use crate::critic::{
    critic_loss, AtomGrid, CriticBatch, CriticEnsemble, CriticLossConfig, CriticLossOutput,
};
use crate::envs::{CliffCar, CliffCarConfig, CliffCarRunner, TabularMDP, OBS_DIM};
use crate::error::{Error, Result};
use crate::gradnet::{Adam, Checkpoint, ParamSet, SquashedGaussian};
use crate::riskmeasures::{mixture, CategoricalDistribution, RiskLevel};

/// Independent ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Single critic, no entropy terms.
    pub no_epistemic: bool,
    /// Limits fully open: actions pass through unclipped.
    pub no_limits: bool,
    /// alpha = 0, limits open, single critic, no entropy terms.
    pub risk_neutral: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "no_epistemic" => a.no_epistemic = true,
            "no_limits" => a.no_limits = true,
            "risk_neutral" => a.risk_neutral = true,
            other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
        Ok(a)
    }

    pub fn union(self, o: Self) -> Self {
        Self {
            no_epistemic: self.no_epistemic || o.no_epistemic,
            no_limits: self.no_limits || o.no_limits,
            risk_neutral: self.risk_neutral || o.risk_neutral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub alpha: RiskLevel,
    pub gamma: f64,
    /// Critic updates per environment step; fractional values accumulate.
    pub utd_ratio: f64,
    pub ensemble_n: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    /// Output-layer init scale of the critics (small = near-uniform start).
    pub critic_final_scale: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub limit_lr: f64,
    /// First-moment decay of the limit optimizer.
    pub limit_beta1: f64,
    pub tau: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_steps: usize,
    /// Environment steps before the first limit update.
    pub limit_warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub entropy_in_coef: f64,
    pub entropy_ood_coef: f64,
    /// Initial `v_plus` as a fraction of the hard range above `v_minus`.
    pub initial_limit_fraction: f64,
    /// Smallest `v_plus - v_minus` as a fraction of the hard range.
    pub limit_gap_fraction: f64,
    /// Multiplies environment rewards before they reach the critic.
    pub reward_scale: f64,
    /// A periodic metrics row every this many steps.
    pub metrics_every: usize,
    /// Checkpoint every this many steps (0: final checkpoint only).
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    pub ablation: Ablation,
    pub env: CliffCarConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: RiskLevel::new(0.9).expect("valid"),
            gamma: 0.99,
            utd_ratio: 8.0,
            ensemble_n: 5,
            v_min: -50.0,
            v_max: 500.0,
            n_atoms: 51,
            critic_hidden: vec![256, 256],
            actor_hidden: vec![256, 256],
            critic_final_scale: 0.1,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            limit_lr: 1e-3,
            limit_beta1: 0.9,
            tau: 0.005,
            weight_decay: 1e-4,
            batch_size: 256,
            buffer_capacity: 200_000,
            warmup_steps: 1000,
            limit_warmup_steps: 0,
            total_steps: 100_000,
            seed: 0,
            entropy_in_coef: 0.01,
            entropy_ood_coef: 0.01,
            initial_limit_fraction: 0.2,
            limit_gap_fraction: 0.01,
            reward_scale: 1.0,
            metrics_every: 1000,
            checkpoint_every: 0,
            eval_episodes: 5,
            ablation: Ablation::default(),
            env: CliffCarConfig::default(),
        }
    }
}

impl TrainerConfig {
    /// Scaled-down preset that trains 100k steps in minutes on one core.
    pub fn desk() -> Self {
        Self {
            gamma: 0.95,
            utd_ratio: 0.5,
            ensemble_n: 3,
            v_min: -15.0,
            v_max: 45.0,
            n_atoms: 61,
            critic_hidden: vec![32, 32],
            actor_hidden: vec![32, 32],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            limit_lr: 1e-4,
            limit_beta1: 0.99,
            tau: 0.02,
            batch_size: 32,
            buffer_capacity: 100_000,
            limit_warmup_steps: 10_000,
            entropy_ood_coef: 0.002,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("gamma", self.gamma),
            ("utd_ratio", self.utd_ratio),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("limit_lr", self.limit_lr),
            ("tau", self.tau),
            ("reward_scale", self.reward_scale),
            ("limit_gap_fraction", self.limit_gap_fraction),
            ("initial_limit_fraction", self.initial_limit_fraction),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.limit_beta1) {
            return Err(Error::Config("limit_beta1 must lie in [0, 1)".into()));
        }
        if self.gamma >= 1.0 || self.tau > 1.0 {
            return Err(Error::Config("gamma must be < 1 and tau <= 1".into()));
        }
        if self.initial_limit_fraction > 1.0 || self.limit_gap_fraction >= 1.0 {
            return Err(Error::Config("limit fractions must not exceed 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.entropy_in_coef >= 0.0 && self.entropy_ood_coef >= 0.0)
        {
            return Err(Error::Config("weight decay and entropy coefficients must be >= 0".into()));
        }
        for (name, v) in [
            ("ensemble_n", self.ensemble_n),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("total_steps", self.total_steps),
            ("metrics_every", self.metrics_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        AtomGrid::new(self.v_min, self.v_max, self.n_atoms)?;
        self.env.validate()
    }

    /// Applies the ablation switches.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        let a = self.ablation;
        if a.no_epistemic || a.risk_neutral {
            c.ensemble_n = 1;
            c.entropy_in_coef = 0.0;
            c.entropy_ood_coef = 0.0;
        }
        if a.risk_neutral {
            c.alpha = RiskLevel::neutral();
        }
        c
    }

    pub fn limits_open(&self) -> bool {
        self.ablation.no_limits || self.ablation.risk_neutral
    }
}

/// One environment interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: [f64; OBS_DIM],
    pub a_pre: [f64; 2],
    pub a_applied: [f64; 2],
    pub r: f64,
    pub s_next: [f64; OBS_DIM],
    pub failed: bool,
    pub done: bool,
}

/// Fixed-capacity FIFO with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    inserted: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: T) {
        let slot = (self.inserted % self.capacity as u64) as usize;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// `"failure"` rows are written at every failure, `"periodic"` every
    /// `metrics_every` steps.
    pub kind: String,
    pub episode: u64,
    pub cum_failures: u64,
    pub cum_failures_fast: u64,
    /// Mean speed-made-good since the previous row.
    pub avg_speed: f64,
    pub v_minus: f64,
    pub v_plus: f64,
    pub cvar_alpha_mean: f64,
    pub critic_loss: f64,
    pub kl: f64,
    pub entropy_in: f64,
    pub entropy_ood: f64,
    pub actor_loss: f64,
    /// Last gradient of the limit loss w.r.t. `v_plus` (0 when open).
    pub limit_grad: f64,
    pub critic_updates: u64,
}

/// Append-only JSONL sink.
pub struct MetricsWriter<W: Write> {
    w: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Self {
        Self { w }
    }

    pub fn record(&mut self, row: &MetricsRow) -> Result<()> {
        serde_json::to_writer(&mut self.w, row)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Summary written at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub episodes: u64,
    pub cum_failures: u64,
    pub cum_failures_fast: u64,
    /// Average speed-made-good of the final deterministic policy.
    pub avg_speed: f64,
    pub eval_failures: u64,
    pub avg_return: f64,
    pub v_plus_final: f64,
    pub critic_updates: u64,
}

#[derive(Debug, Clone, Default)]
struct LastLosses {
    critic: f64,
    kl: f64,
    entropy_in: f64,
    entropy_ood: f64,
    actor: f64,
    cvar: f64,
    limit_grad: f64,
}

/// Full learner state.
pub struct Trainer {
    pub config: TrainerConfig,
    pub runner: CliffCarRunner,
    pub critics: CriticEnsemble,
    pub actor: Actor,
    pub actor_params: ParamSet,
    pub limits: ActionLimits,
    critic_opts: Vec<Adam>,
    actor_opt: Adam,
    limit_opt: LimitOptimizer,
    pub buffer: ReplayBuffer<Transition>,
    act_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    pub step: u64,
    pub critic_updates: u64,
    utd_acc: f64,
    window_speed: f64,
    window_steps: u64,
    last: LastLosses,
    pub metrics: Vec<MetricsRow>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn build_critics(cfg: &TrainerConfig, space: &ActionSpace, rng: &mut ChaCha8Rng) -> Result<CriticEnsemble> {
    CriticEnsemble::new(
        OBS_DIM,
        &space.bounds(),
        &cfg.critic_hidden,
        AtomGrid::new(cfg.v_min, cfg.v_max, cfg.n_atoms)?,
        cfg.ensemble_n,
        cfg.critic_final_scale,
        rng,
    )
}

fn build_limits(cfg: &TrainerConfig, env: &CliffCar) -> Result<ActionLimits> {
    if cfg.limits_open() {
        Ok(ActionLimits::open())
    } else {
        ActionLimits::cautious(
            &env.action_space(),
            &env.limited_dims(),
            cfg.initial_limit_fraction,
            cfg.limit_gap_fraction,
        )
    }
}

/// The `v_plus` reported for the speed dimension (hard max when open).
fn reported_limits(limits: &ActionLimits, space: &ActionSpace) -> (f64, f64) {
    match limits.v_plus.first() {
        Some(vp) => (limits.v_minus[0], *vp),
        None => (space.low[crate::envs::SPEED], space.high[crate::envs::SPEED]),
    }
}

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.effective();
        let env = CliffCar::new(cfg.env.clone())?;
        let space = env.action_space();
        let mut init_rng = stream(cfg.seed, 0);
        let critics = build_critics(&cfg, &space, &mut init_rng)?;
        let actor = Actor {
            policy: SquashedGaussian::new(OBS_DIM, &cfg.actor_hidden, space.dim()),
            space,
        };
        let actor_params = actor.policy.net.init(&mut init_rng);
        let limits = build_limits(&cfg, &env)?;
        let critic_opts = critics
            .members()
            .iter()
            .map(|m| Adam::new(m, cfg.critic_lr, cfg.weight_decay))
            .collect();
        let actor_opt = Adam::new(&actor_params, cfg.actor_lr, cfg.weight_decay);
        let limit_opt = LimitOptimizer::new(&limits, cfg.limit_lr).with_beta1(cfg.limit_beta1);
        let runner = CliffCarRunner::new(env, cfg.seed.wrapping_mul(2).wrapping_add(1));
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            runner,
            critics,
            actor,
            actor_params,
            limits,
            critic_opts,
            actor_opt,
            limit_opt,
            act_rng: stream(cfg.seed, 1),
            replay_rng: stream(cfg.seed, 2),
            step: 0,
            critic_updates: 0,
            utd_acc: 0.0,
            window_speed: 0.0,
            window_steps: 0,
            last: LastLosses::default(),
            metrics: Vec::new(),
            config: cfg,
        })
    }

    pub fn v_plus(&self) -> f64 {
        reported_limits(&self.limits, &self.actor.space).1
    }

    fn select_action(&mut self, obs: &[f64; OBS_DIM]) -> Result<([f64; 2], [f64; 2])> {
        let a_pre: [f64; 2] = if self.step < self.config.warmup_steps as u64 {
            let sp = &self.actor.space;
            [
                self.act_rng.random_range(sp.low[0]..sp.high[0]),
                self.act_rng.random_range(sp.low[1]..sp.high[1]),
            ]
        } else {
            let s = Array2::from_shape_vec((1, OBS_DIM), obs.to_vec()).expect("shape");
            let noise = self.actor.policy.draw_noise(&mut self.act_rng, 1);
            let (unit, _) = self.actor.policy.sample(&self.actor_params, &s, &noise)?;
            let a = self.actor.space.rescale(&unit);
            [a[[0, 0]], a[[0, 1]]]
        };
        let pre = Array2::from_shape_vec((1, 2), a_pre.to_vec()).expect("shape");
        let applied = apply_limits(&pre, &self.limits)?;
        Ok((a_pre, [applied[[0, 0]], applied[[0, 1]]]))
    }

    fn batch_states(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let b = idx.len();
        let mut s = Array2::zeros((b, OBS_DIM));
        let mut s2 = Array2::zeros((b, OBS_DIM));
        for (r, &i) in idx.iter().enumerate() {
            let t = self.buffer.get(i);
            for j in 0..OBS_DIM {
                s[[r, j]] = t.s[j];
                s2[[r, j]] = t.s_next[j];
            }
        }
        (s, s2)
    }

    fn critic_update(&mut self) -> Result<CriticLossOutput> {
        let b = self.config.batch_size;
        let idx = self.buffer.sample_indices(&mut self.replay_rng, b);
        let (states, next_states) = self.batch_states(&idx);
        let mut actions = Array2::zeros((b, 2));
        let mut rewards = Array1::zeros(b);
        let mut terminal = Vec::with_capacity(b);
        for (r, &i) in idx.iter().enumerate() {
            let t = self.buffer.get(i);
            actions[[r, 0]] = t.a_applied[0];
            actions[[r, 1]] = t.a_applied[1];
            rewards[r] = t.r * self.config.reward_scale;
            terminal.push(t.failed);
        }
        let next_noise = self.actor.policy.draw_noise(&mut self.replay_rng, b);
        let noise = self.actor.policy.draw_noise(&mut self.replay_rng, b);
        let (next_actions, ea) = self.actor.critic_actions(
            &self.actor_params,
            &self.limits,
            &states,
            &next_states,
            &next_noise,
            &noise,
        )?;
        let batch = CriticBatch {
            states,
            actions,
            rewards,
            next_states,
            terminal,
        };
        let cfg = CriticLossConfig {
            gamma: self.config.gamma,
            entropy_in_coef: self.config.entropy_in_coef,
            entropy_ood_coef: self.config.entropy_ood_coef,
        };
        let use_entropy = cfg.entropy_in_coef > 0.0 || cfg.entropy_ood_coef > 0.0;
        let out = critic_loss(
            &self.critics,
            &batch,
            &next_actions,
            use_entropy.then_some(&ea),
            &cfg,
        )?;
        for (i, g) in out.grads.iter().enumerate() {
            self.critic_opts[i].step(self.critics.member_mut(i), g)?;
        }
        self.critics.polyak_update(self.config.tau)?;
        self.critic_updates += 1;
        Ok(out)
    }

    /// One actor step and, unless limits are open, one limit step, both from
    /// the same sampled states and policy noise.
    fn policy_update(&mut self) -> Result<()> {
        let b = self.config.batch_size;
        let idx = self.buffer.sample_indices(&mut self.replay_rng, b);
        let (states, _) = self.batch_states(&idx);
        let noise = self.actor.policy.draw_noise(&mut self.replay_rng, b);
        let o = policy_objective(
            &self.critics,
            &self.actor,
            &self.actor_params,
            &self.limits,
            &states,
            self.config.alpha.alpha(),
            &noise,
        )?;
        self.actor_opt.step(&mut self.actor_params, &o.actor_grads)?;
        if !self.limits.is_open() && self.step > self.config.limit_warmup_steps as u64 {
            self.limit_opt.step(&mut self.limits, &o.limit_grads)?;
            self.last.limit_grad = o.limit_grads[0];
        }
        self.last.actor = o.loss;
        self.last.cvar = o.mean_cvar;
        Ok(())
    }

    fn row(&mut self, kind: &str) -> MetricsRow {
        let (v_minus, v_plus) = reported_limits(&self.limits, &self.actor.space);
        let avg = if self.window_steps > 0 {
            self.window_speed / self.window_steps as f64
        } else {
            0.0
        };
        self.window_speed = 0.0;
        self.window_steps = 0;
        MetricsRow {
            step: self.step,
            kind: kind.to_string(),
            episode: self.runner.episode,
            cum_failures: self.runner.failures,
            cum_failures_fast: self.runner.fast_failures,
            avg_speed: avg,
            v_minus,
            v_plus,
            cvar_alpha_mean: self.last.cvar,
            critic_loss: self.last.critic,
            kl: self.last.kl,
            entropy_in: self.last.entropy_in,
            entropy_ood: self.last.entropy_ood,
            actor_loss: self.last.actor,
            limit_grad: self.last.limit_grad,
            critic_updates: self.critic_updates,
        }
    }

    /// One environment step followed by the scheduled updates. Returns the
    /// metrics rows produced by this step.
    pub fn train_step(&mut self) -> Result<Vec<MetricsRow>> {
        let obs = self.runner.observe();
        let (a_pre, a_applied) = self.select_action(&obs)?;
        let res = self.runner.step(a_applied);
        self.step += 1;
        self.buffer.push(Transition {
            s: obs,
            a_pre,
            a_applied,
            r: res.reward,
            s_next: self.runner.env.observe(&res.next_state),
            failed: res.failed,
            done: res.done,
        });
        self.window_speed += res.reward;
        self.window_steps += 1;

        if self.step > self.config.warmup_steps as u64 && self.buffer.len() >= self.config.batch_size
        {
            self.utd_acc += self.config.utd_ratio;
            let mut updated = false;
            while self.utd_acc >= 1.0 {
                self.utd_acc -= 1.0;
                let out = self.critic_update()?;
                self.last.critic = out.loss;
                self.last.kl = out.kl;
                self.last.entropy_in = out.entropy_in;
                self.last.entropy_ood = out.entropy_ood;
                updated = true;
            }
            if updated {
                self.policy_update()?;
            }
        }

        let mut rows = Vec::new();
        if res.failed {
            debug!("failure at step {} (speed {:.2})", self.step, res.speed);
            rows.push(self.row("failure"));
        }
        if self.step % self.config.metrics_every as u64 == 0 {
            rows.push(self.row("periodic"));
        }
        self.metrics.extend(rows.iter().cloned());
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            meta: json!({
                "config": self.config,
                "step": self.step,
                "critic_updates": self.critic_updates,
                "limits": self.limits,
                "limit_optimizer": self.limit_opt,
                "cum_failures": self.runner.failures,
                "cum_failures_fast": self.runner.fast_failures,
                "episode": self.runner.episode,
            }),
            ..Default::default()
        };
        for (i, (m, t)) in self.critics.members().iter().zip(self.critics.targets()).enumerate() {
            ck.param_sets.insert(format!("critic.{i}"), m.clone());
            ck.param_sets.insert(format!("critic_target.{i}"), t.clone());
            ck.optimizers.insert(format!("critic.{i}"), self.critic_opts[i].clone());
        }
        ck.param_sets.insert("actor".into(), self.actor_params.clone());
        ck.optimizers.insert("actor".into(), self.actor_opt.clone());
        ck
    }

    /// Runs the remaining steps. With `out_dir`, writes `metrics.jsonl`,
    /// checkpoints and `final_summary.json`; on a non-finite update an
    /// `abort.json` checkpoint is written before the error is returned.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainSummary> {
        let mut writer = match out_dir {
            Some(d) => {
                fs::create_dir_all(d.join("checkpoints"))?;
                Some(MetricsWriter::new(BufWriter::new(fs::File::create(
                    d.join("metrics.jsonl"),
                )?)))
            }
            None => None,
        };
        let total = self.config.total_steps as u64;
        while self.step < total {
            let rows = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    warn!("aborting at step {}: {e}", self.step);
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    if let Some(d) = out_dir {
                        let mut ck = self.checkpoint();
                        ck.meta["abort_reason"] = json!(e.to_string());
                        ck.save(&d.join("checkpoints").join("abort.json"))?;
                    }
                    return Err(e);
                }
            };
            if let Some(w) = writer.as_mut() {
                for r in &rows {
                    w.record(r)?;
                }
            }
            let every = self.config.checkpoint_every as u64;
            if let (Some(d), true) = (out_dir, every > 0 && self.step % every == 0) {
                self.checkpoint()
                    .save(&d.join("checkpoints").join(format!("step_{}.json", self.step)))?;
            }
            if self.step % (total / 10).max(1) == 0 {
                info!(
                    "step {} failures {} v_plus {:.3} cvar {:.3}",
                    self.step,
                    self.runner.failures,
                    self.v_plus(),
                    self.last.cvar
                );
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        let eval = evaluate_policy(
            &DeterministicActor {
                actor: &self.actor,
                params: &self.actor_params,
            },
            &self.limits,
            &self.runner.env,
            self.config.eval_episodes,
            self.config.seed ^ 0x5EED,
        )?;
        let summary = TrainSummary {
            steps: self.step,
            episodes: self.runner.episode,
            cum_failures: self.runner.failures,
            cum_failures_fast: self.runner.fast_failures,
            avg_speed: eval.avg_speed,
            eval_failures: eval.failures,
            avg_return: eval.avg_return,
            v_plus_final: self.v_plus(),
            critic_updates: self.critic_updates,
        };
        if let Some(d) = out_dir {
            self.checkpoint().save(&d.join("checkpoints").join("final.json"))?;
            fs::write(
                d.join("final_summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
        }
        Ok(summary)
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(config: TrainerConfig, out_dir: Option<&Path>) -> Result<(TrainSummary, Vec<MetricsRow>)> {
    let mut t = Trainer::new(config)?;
    let s = t.run(out_dir)?;
    Ok((s, std::mem::take(&mut t.metrics)))
}

/// Frozen components restored from a checkpoint.
pub struct Restored {
    pub config: TrainerConfig,
    pub critics: CriticEnsemble,
    pub actor: Actor,
    pub actor_params: ParamSet,
    pub limits: ActionLimits,
    pub env: CliffCar,
}

pub fn restore(ck: &Checkpoint) -> Result<Restored> {
    let config: TrainerConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let limits: ActionLimits = serde_json::from_value(ck.meta["limits"].clone())
        .map_err(|e| Error::Checkpoint(format!("limits: {e}")))?;
    let env = CliffCar::new(config.env.clone())?;
    let space = env.action_space();
    let mut rng = stream(config.seed, 0);
    let mut critics = build_critics(&config, &space, &mut rng)?;
    let mut members = Vec::new();
    let mut targets = Vec::new();
    for i in 0..config.ensemble_n {
        members.push(ck.param_set(&format!("critic.{i}"))?.clone());
        targets.push(ck.param_set(&format!("critic_target.{i}"))?.clone());
    }
    critics.set_members(members, targets)?;
    let actor = Actor {
        policy: SquashedGaussian::new(OBS_DIM, &config.actor_hidden, space.dim()),
        space,
    };
    let actor_params = ck.param_set("actor")?.clone();
    actor.policy.net.check(&actor_params)?;
    Ok(Restored {
        config,
        critics,
        actor,
        actor_params,
        limits,
        env,
    })
}

/// Maps an observation to a pre-limit action in environment units.
pub trait Policy {
    fn action(&self, obs: &[f64; OBS_DIM]) -> Result<[f64; 2]>;
}

impl<F: Fn(&[f64; OBS_DIM]) -> [f64; 2]> Policy for F {
    fn action(&self, obs: &[f64; OBS_DIM]) -> Result<[f64; 2]> {
        Ok(self(obs))
    }
}

/// `tanh(mean)` of the actor, rescaled to the hard bounds.
pub struct DeterministicActor<'a> {
    pub actor: &'a Actor,
    pub params: &'a ParamSet,
}

impl Policy for DeterministicActor<'_> {
    fn action(&self, obs: &[f64; OBS_DIM]) -> Result<[f64; 2]> {
        let s = Array2::from_shape_vec((1, OBS_DIM), obs.to_vec()).expect("shape");
        let unit = self.actor.policy.mean_action(self.params, &s)?;
        let a = self.actor.space.rescale(&unit);
        Ok([a[[0, 0]], a[[0, 1]]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean speed-made-good per step.
    pub avg_speed: f64,
    pub failures: u64,
    /// Mean undiscounted episode return.
    pub avg_return: f64,
}

/// Runs `n_episodes` episodes of at most `eval_episode_steps` steps each.
pub fn evaluate_policy(
    policy: &dyn Policy,
    limits: &ActionLimits,
    env: &CliffCar,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total_reward, mut steps, mut failures) = (0.0, 0u64, 0u64);
    for ep in 0..n_episodes {
        let mut s = env.reset(seed.wrapping_add(ep as u64 * 7919));
        for _ in 0..env.config.eval_episode_steps {
            let a = policy.action(&env.observe(&s))?;
            let pre = Array2::from_shape_vec((1, 2), a.to_vec()).expect("shape");
            let ap = apply_limits(&pre, limits)?;
            let r = env.step(&s, [ap[[0, 0]], ap[[0, 1]]], &CliffCar::draw(&mut rng));
            total_reward += r.reward;
            steps += 1;
            if r.failed {
                failures += 1;
                break;
            }
            s = r.next_state;
        }
    }
    Ok(EvalReport {
        avg_speed: if steps > 0 { total_reward / steps as f64 } else { 0.0 },
        failures,
        avg_return: if n_episodes > 0 {
            total_reward / n_episodes as f64
        } else {
            0.0
        },
    })
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<PathBuf> {
    let mut w = MetricsWriter::new(BufWriter::new(fs::File::create(path)?));
    for r in rows {
        w.record(r)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

/// Settings for fitting a critic ensemble on a tabular MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularFitConfig {
    pub gamma: f64,
    pub ensemble_n: usize,
    pub hidden: Vec<usize>,
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
    pub lr: f64,
    pub tau: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains a critic ensemble on transitions sampled from `m` under `policy`
/// (one row of action probabilities per state). States are one-hot encoded
/// and the action index is the single action input.
pub fn fit_tabular_critic(
    m: &TabularMDP,
    policy: &[Vec<f64>],
    cfg: &TabularFitConfig,
) -> Result<CriticEnsemble> {
    let ns = m.n_states();
    let na = m.n_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut e = CriticEnsemble::new(
        ns,
        &[(0.0, (na.max(2) - 1) as f64)],
        &cfg.hidden,
        AtomGrid::new(cfg.v_min, cfg.v_max, cfg.n_atoms)?,
        cfg.ensemble_n,
        0.1,
        &mut rng,
    )?;
    let mut opts: Vec<Adam> = e.members().iter().map(|p| Adam::new(p, cfg.lr, 0.0)).collect();
    let live: Vec<usize> = (0..ns).filter(|s| !m.terminal[*s]).collect();
    let loss_cfg = CriticLossConfig {
        gamma: cfg.gamma,
        entropy_in_coef: 0.0,
        entropy_ood_coef: 0.0,
    };
    let b = cfg.batch_size;
    for _ in 0..cfg.steps {
        let mut states = Array2::zeros((b, ns));
        let mut next_states = Array2::zeros((b, ns));
        let mut actions = Array2::zeros((b, 1));
        let mut next_actions = Array2::zeros((b, 1));
        let mut rewards = Array1::zeros(b);
        let mut terminal = Vec::with_capacity(b);
        for r in 0..b {
            let s = live[rng.random_range(0..live.len())];
            let a = rng.random_range(0..na);
            let o = m.sample(s, a, &mut rng);
            states[[r, s]] = 1.0;
            next_states[[r, o.next]] = 1.0;
            actions[[r, 0]] = a as f64;
            rewards[r] = o.reward;
            terminal.push(m.terminal[o.next]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut a2 = na - 1;
            for (k, p) in policy[o.next].iter().enumerate() {
                acc += p;
                if u < acc {
                    a2 = k;
                    break;
                }
            }
            next_actions[[r, 0]] = a2 as f64;
        }
        let batch = CriticBatch {
            states,
            actions,
            rewards,
            next_states,
            terminal,
        };
        let out = critic_loss(&e, &batch, &next_actions, None, &loss_cfg)?;
        for (i, g) in out.grads.iter().enumerate() {
            opts[i].step(e.member_mut(i), g)?;
        }
        e.polyak_update(cfg.tau)?;
    }
    Ok(e)
}

/// Mixture distribution of a tabular critic at `(s, a)`.
pub fn tabular_mixture(e: &CriticEnsemble, n_states: usize, s: usize, a: usize) -> Result<CategoricalDistribution> {
    let mut x = vec![0.0; n_states];
    x[s] = 1.0;
    let members = e.distributions(&x, &[a as f64])?;
    mixture(&members, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    fn tiny() -> TrainerConfig {
        TrainerConfig {
            total_steps: 400,
            warmup_steps: 100,
            utd_ratio: 0.5,
            batch_size: 16,
            metrics_every: 50,
            critic_hidden: vec![8],
            actor_hidden: vec![8],
            ensemble_n: 2,
            n_atoms: 11,
            v_min: -10.0,
            v_max: 50.0,
            eval_episodes: 1,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..250 {
            buf.push(i);
        }
        assert_eq!(buf.len(), 100);
        // FIFO eviction keeps the newest 100
        let mut kept: Vec<i32> = buf.iter().copied().collect();
        kept.sort();
        assert_eq!(kept, (150..250).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0u32; 100];
        for i in buf.sample_indices(&mut rng, 1_000_000) {
            counts[i] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() / 10_000.0 < 0.05, "{c}");
        }
    }

    #[test]
    fn config_round_trips_through_toml_shaped_json() {
        let c = TrainerConfig::desk();
        let v = serde_json::to_value(&c).unwrap();
        let back: TrainerConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        let partial: TrainerConfig = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        assert_eq!(partial.alpha.alpha(), 0.5);
        assert!(serde_json::from_str::<TrainerConfig>(r#"{"alpha": 1.5}"#).is_err());
        assert!(serde_json::from_str::<TrainerConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn ablations_degenerate_config() {
        let mut c = TrainerConfig::default();
        c.ablation = Ablation::parse("risk_neutral").unwrap();
        let e = c.effective();
        assert_eq!(e.alpha.alpha(), 0.0);
        assert_eq!(e.ensemble_n, 1);
        assert_eq!(e.entropy_in_coef + e.entropy_ood_coef, 0.0);
        assert!(e.limits_open());
        c.ablation = Ablation::parse("no_epistemic").unwrap();
        let e = c.effective();
        assert_eq!((e.ensemble_n, e.alpha.alpha()), (1, 0.9));
        assert!(!e.limits_open());
        assert!(Ablation::parse("nope").is_err());
    }

    #[test]
    fn same_seed_same_metrics() {
        let (s1, m1) = train(tiny(), None).unwrap();
        let (s2, m2) = train(tiny(), None).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        let mut other = tiny();
        other.seed = 1;
        let (_, m3) = train(other, None).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn metrics_are_consistent() {
        let mut c = tiny();
        c.ablation.no_limits = true;
        c.warmup_steps = 300;
        let mut t = Trainer::new(c).unwrap();
        t.run(None).unwrap();
        let failed = t.buffer.iter().filter(|x| x.failed).count() as u64;
        assert_eq!(failed, t.runner.failures);
        let mut prev = (0, 0);
        let mut fail_rows = 0;
        for r in &t.metrics {
            assert!(r.step >= prev.0 && r.cum_failures >= prev.1);
            if r.kind == "failure" {
                assert_eq!(r.cum_failures, prev.1 + 1);
                fail_rows += 1;
            }
            prev = (r.step, r.cum_failures);
            assert_eq!(r.v_plus, 1.0);
        }
        assert_eq!(fail_rows, t.runner.failures);
    }

    #[test]
    fn transitions_record_limited_actions() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.run(None).unwrap();
        for tr in t.buffer.iter() {
            assert!(tr.failed == tr.done);
            assert!(tr.a_applied[1] < tr.a_pre[1].max(t.limits.v_plus[0]) + 1e-12);
            assert_eq!(tr.a_applied[0], tr.a_pre[0]);
        }
    }

    #[test]
    fn limits_stay_inside_hard_bounds() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.run(None).unwrap();
        for r in &t.metrics {
            assert!(r.v_plus <= 1.0 && r.v_plus > r.v_minus);
        }
    }

    #[test]
    fn run_writes_artifacts_and_checkpoint_restores() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny()).unwrap();
        let s = t.run(Some(dir.path())).unwrap();
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), t.metrics.len());
        let summary: TrainSummary =
            serde_json::from_slice(&fs::read(dir.path().join("final_summary.json")).unwrap()).unwrap();
        assert_eq!(summary, s);
        let ck = Checkpoint::load(&dir.path().join("checkpoints/final.json")).unwrap();
        let r = restore(&ck).unwrap();
        assert_eq!(r.critics, t.critics);
        assert_eq!(r.actor_params, t.actor_params);
        assert_eq!(r.limits, t.limits);
    }

    #[test]
    fn zero_speed_policy_is_safe_and_still() {
        let env = CliffCar::new(CliffCarConfig::default()).unwrap();
        let still = |_: &[f64; OBS_DIM]| [0.5, 0.0];
        let r = evaluate_policy(&still, &ActionLimits::open(), &env, 3, 1).unwrap();
        assert_eq!(r.avg_speed, 0.0);
        assert_eq!(r.failures, 0);
        let again = evaluate_policy(&still, &ActionLimits::open(), &env, 3, 1).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn random_full_throttle_fails() {
        let env = CliffCar::new(CliffCarConfig::default()).unwrap();
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(3));
        let wild = |_: &[f64; OBS_DIM]| [rng.borrow_mut().random_range(-1.0..1.0), 1.0];
        let r = evaluate_policy(&wild, &ActionLimits::open(), &env, 5, 1).unwrap();
        assert!(r.failures > 0);
    }

    #[test]
    fn non_finite_update_aborts_with_checkpoint() {
        let mut c = tiny();
        c.critic_lr = 1e300;
        c.actor_lr = 1e300;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(c).unwrap();
        let err = t.run(Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(dir.path().join("checkpoints/abort.json").exists());
    }

    #[test]
    fn no_epistemic_critic_loss_is_plain_kl() {
        let mut c = tiny();
        c.ablation.no_epistemic = true;
        let mut t = Trainer::new(c).unwrap();
        while t.critic_updates == 0 {
            t.train_step().unwrap();
        }
        assert_eq!(t.critics.len(), 1);
        let r = t.row("periodic");
        assert_eq!(r.entropy_in, 0.0);
        assert_eq!(r.entropy_ood, 0.0);
        assert!((r.critic_loss - r.kl).abs() < 1e-12);
    }
}
