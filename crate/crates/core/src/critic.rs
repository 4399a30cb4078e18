//! Ensembles of categorical distributional critics.


use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnet::{softmax_rows, BoundParams, Mlp, ParamSet, Tape, Var};
use crate::riskmeasures::{cvar_parts, CategoricalDistribution};

/// Uniformly spaced return atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomGrid {
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
}

impl AtomGrid {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self> {
        if !(v_min < v_max) || n_atoms < 2 || !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::Config(format!(
                "atom grid needs v_min < v_max and at least 2 atoms, got [{v_min}, {v_max}] x {n_atoms}"
            )));
        }
        Ok(Self {
            v_min,
            v_max,
            n_atoms,
        })
    }

    pub fn delta(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n_atoms - 1) as f64
    }

    pub fn atoms(&self) -> Vec<f64> {
        let d = self.delta();
        (0..self.n_atoms)
            .map(|i| {
                if i + 1 == self.n_atoms {
                    self.v_max
                } else {
                    self.v_min + d * i as f64
                }
            })
            .collect()
    }

    pub fn distribution(&self, probs: Vec<f64>) -> Result<CategoricalDistribution> {
        CategoricalDistribution::new(self.atoms(), probs)
    }
}

/// Projects the mass of `r + gamma * z` for every source atom `z` onto `grid`,
/// adding into `out`. Mass landing between two grid atoms is split linearly;
/// mass outside the grid goes to the nearest edge atom.
pub fn project_into(
    grid: &AtomGrid,
    atoms: &[f64],
    probs: &[f64],
    r: f64,
    gamma: f64,
    out: &mut [f64],
) {
    let d = grid.delta();
    let last = grid.n_atoms - 1;
    for (z, p) in atoms.iter().zip(probs) {
        if *p == 0.0 {
            continue;
        }
        let tz = (r + gamma * z).clamp(grid.v_min, grid.v_max);
        let mut b = (tz - grid.v_min) / d;
        let nearest = b.round();
        if (b - nearest).abs() < 1e-9 {
            b = nearest;
        }
        let l = (b.floor() as usize).min(last);
        let u = (b.ceil() as usize).min(last);
        if l == u {
            out[l] += p;
        } else {
            let upper = p * (b - l as f64);
            out[u] += upper;
            out[l] += p - upper;
        }
    }
}

pub fn project_target(
    grid: &AtomGrid,
    source: &CategoricalDistribution,
    r: f64,
    gamma: f64,
) -> CategoricalDistribution {
    let mut out = vec![0.0; grid.n_atoms];
    project_into(grid, source.atoms(), source.probs(), r, gamma, &mut out);
    grid.distribution(out).expect("projection preserves mass")
}

/// Shannon entropy with `0 ln 0 = 0`.
pub fn entropy(d: &CategoricalDistribution) -> f64 {
    entropy_of(d.probs())
}

pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Members {
    One(usize),
    All,
}

/// N independently initialised categorical critics with delayed copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticEnsemble {
    pub net: Mlp,
    pub grid: AtomGrid,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Maps actions in environment units to roughly [-1, 1] before the network.
    action_scale: Vec<f64>,
    action_shift: Vec<f64>,
    members: Vec<ParamSet>,
    targets: Vec<ParamSet>,
}

impl CriticEnsemble {
    /// `final_scale` near zero makes the initial distributions near uniform.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_bounds: &[(f64, f64)],
        hidden: &[usize],
        grid: AtomGrid,
        n: usize,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let act_dim = action_bounds.len();
        let net = Mlp::new(obs_dim + act_dim, hidden, grid.n_atoms).with_final_scale(final_scale);
        let members: Vec<ParamSet> = (0..n).map(|_| net.init(rng)).collect();
        let (action_scale, action_shift) = action_bounds
            .iter()
            .map(|(lo, hi)| {
                let half = 0.5 * (hi - lo);
                (1.0 / half, -(hi + lo) / (2.0 * half))
            })
            .unzip();
        Ok(Self {
            net,
            grid,
            obs_dim,
            act_dim,
            action_scale,
            action_shift,
            targets: members.clone(),
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[ParamSet] {
        &self.members
    }

    pub fn targets(&self) -> &[ParamSet] {
        &self.targets
    }

    pub fn member_mut(&mut self, i: usize) -> &mut ParamSet {
        &mut self.members[i]
    }

    pub fn set_members(&mut self, members: Vec<ParamSet>, targets: Vec<ParamSet>) -> Result<()> {
        if members.len() != targets.len() || members.is_empty() {
            return Err(Error::Shape("members and targets differ in count".into()));
        }
        for p in members.iter().chain(&targets) {
            self.net.check(p)?;
        }
        self.members = members;
        self.targets = targets;
        Ok(())
    }

    /// Moves target `i` toward member `i` only.
    pub fn polyak_update(&mut self, tau: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            t.polyak_update(m, tau)?;
        }
        Ok(())
    }

    fn normalize_actions(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut out = a.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| v * self.action_scale[j] + self.action_shift[j]);
        }
        out
    }

    fn inputs(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
        if s.ncols() != self.obs_dim || a.ncols() != self.act_dim || s.nrows() != a.nrows() {
            return Err(Error::Shape(format!(
                "critic expects ({}, {}) columns with equal rows, got states {:?} actions {:?}",
                self.obs_dim,
                self.act_dim,
                s.dim(),
                a.dim()
            )));
        }
        Ok(concatenate(Axis(1), &[s.view(), self.normalize_actions(a).view()]).unwrap())
    }

    fn select(&self, which: Which) -> &[ParamSet] {
        match which {
            Which::Online => &self.members,
            Which::Target => &self.targets,
        }
    }

    /// Atom probabilities (rows x n_atoms) for the requested members.
    pub fn evaluate(
        &self,
        s: &Array2<f64>,
        a: &Array2<f64>,
        which: Which,
        members: Members,
    ) -> Result<Vec<Array2<f64>>> {
        let x = self.inputs(s, a)?;
        let sets = self.select(which);
        let idx: Vec<usize> = match members {
            Members::All => (0..sets.len()).collect(),
            Members::One(i) if i < sets.len() => vec![i],
            Members::One(i) => {
                return Err(Error::MemberIndex {
                    index: i,
                    len: sets.len(),
                })
            }
        };
        idx.into_iter()
            .map(|i| Ok(softmax_rows(&self.net.predict(&sets[i], &x)?)))
            .collect()
    }

    /// Distributions of every online member at a single (s, a).
    pub fn distributions(&self, s: &[f64], a: &[f64]) -> Result<Vec<CategoricalDistribution>> {
        let s = Array2::from_shape_vec((1, s.len()), s.to_vec()).map_err(shape_err)?;
        let a = Array2::from_shape_vec((1, a.len()), a.to_vec()).map_err(shape_err)?;
        self.evaluate(&s, &a, Which::Online, Members::All)?
            .into_iter()
            .map(|p| self.grid.distribution(p.row(0).to_vec()))
            .collect()
    }

    /// Mixture probabilities of all online members.
    pub fn mixture_probs(&self, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
        let all = self.evaluate(s, a, Which::Online, Members::All)?;
        let n = all.len() as f64;
        let mut it = all.into_iter();
        let mut acc = it.next().expect("non-empty ensemble");
        for p in it {
            acc += &p;
        }
        Ok(acc / n)
    }

    /// CVaR of the uniform mixture of online members, per row.
    pub fn ensemble_cvar(&self, s: &Array2<f64>, a: &Array2<f64>, alpha: f64) -> Result<Array1<f64>> {
        let mix = self.mixture_probs(s, a)?;
        let atoms = self.grid.atoms();
        Ok(mix
            .rows()
            .into_iter()
            .map(|r| cvar_parts(&atoms, r.as_slice().unwrap(), alpha))
            .collect())
    }

    /// Binds all online members as constants on `tape`.
    pub fn bind_members(&self, tape: &mut Tape) -> Vec<BoundParams> {
        self.members.iter().map(|m| m.bind(tape)).collect()
    }

    /// Log-probabilities of one member at `(states, actions)`; `actions` is in
    /// environment units and may carry gradient.
    pub fn log_probs_on_tape(
        &self,
        tape: &mut Tape,
        member: &BoundParams,
        states: Var,
        actions: Var,
    ) -> Result<Var> {
        let a = tape.affine_cols(actions, &self.action_scale, &self.action_shift);
        let x = tape.concat_cols(&[states, a]);
        let logits = self.net.forward(tape, member, x)?;
        Ok(tape.log_softmax(logits))
    }

    /// Differentiable mixture CVaR (rows x 1).
    pub fn ensemble_cvar_on_tape(
        &self,
        tape: &mut Tape,
        members: &[BoundParams],
        states: Var,
        actions: Var,
        alpha: f64,
    ) -> Result<Var> {
        let mut mix: Option<Var> = None;
        for m in members {
            let lp = self.log_probs_on_tape(tape, m, states, actions)?;
            let p = tape.exp(lp);
            mix = Some(match mix {
                None => p,
                Some(acc) => tape.add(acc, p),
            });
        }
        let mix = mix.ok_or(Error::EmptyEnsemble)?;
        let mix = tape.scale(mix, 1.0 / members.len() as f64);
        Ok(tape.cvar_rows(mix, self.grid.atoms().into(), alpha))
    }
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::Shape(e.to_string())
}

/// Replay minibatch in the form the critic consumes.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub states: Array2<f64>,
    /// Actions actually applied in the environment.
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    /// No bootstrapping from `next_states` when set.
    pub terminal: Vec<bool>,
}

impl CriticBatch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Actions at `states` used by the two entropy terms.
#[derive(Debug, Clone)]
pub struct EntropyActions {
    /// Sampled from the limited policy: entropy is pushed down here.
    pub limited: Array2<f64>,
    /// Sampled from the pre-limit policy: entropy is pushed up here.
    pub pre_limit: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticLossConfig {
    pub gamma: f64,
    pub entropy_in_coef: f64,
    pub entropy_ood_coef: f64,
}

#[derive(Debug, Clone)]
pub struct CriticLossOutput {
    /// Mean over members of KL + in-distribution entropy - OOD entropy terms.
    pub loss: f64,
    pub kl: f64,
    pub entropy_in: f64,
    pub entropy_ood: f64,
    /// Gradient of `loss` for every member, aligned with its parameter set.
    pub grads: Vec<Vec<Array2<f64>>>,
}

/// Projected distributional backup targets for every member (rows x atoms).
pub fn backup_targets(
    e: &CriticEnsemble,
    batch: &CriticBatch,
    next_actions: &Array2<f64>,
    gamma: f64,
) -> Result<Vec<Array2<f64>>> {
    let next = e.evaluate(&batch.next_states, next_actions, Which::Target, Members::All)?;
    let atoms = e.grid.atoms();
    Ok(next
        .into_iter()
        .map(|probs| {
            let mut out = Array2::zeros((batch.len(), e.grid.n_atoms));
            for (r, (row, mut orow)) in probs.rows().into_iter().zip(out.rows_mut()).enumerate() {
                let g = if batch.terminal[r] { 0.0 } else { gamma };
                project_into(
                    &e.grid,
                    &atoms,
                    &row.to_vec(),
                    batch.rewards[r],
                    g,
                    orow.as_slice_mut().unwrap(),
                );
            }
            out
        })
        .collect())
}

/// Ensemble critic loss: per member KL(projected target || prediction), plus
/// the entropy at limited-policy actions, minus the entropy at pre-limit
/// actions. `next_actions` are the backup actions at `next_states`.
pub fn critic_loss(
    e: &CriticEnsemble,
    batch: &CriticBatch,
    next_actions: &Array2<f64>,
    entropy_actions: Option<&EntropyActions>,
    cfg: &CriticLossConfig,
) -> Result<CriticLossOutput> {
    let b = batch.len();
    if batch.actions.nrows() != b || batch.rewards.len() != b || batch.terminal.len() != b {
        return Err(Error::Shape("critic batch fields differ in length".into()));
    }
    let targets = backup_targets(e, batch, next_actions, cfg.gamma)?;

    // Stack the three action sets so each member needs one forward pass.
    let mut states = vec![batch.states.view()];
    let mut actions = vec![batch.actions.view()];
    if let Some(ea) = entropy_actions {
        states.extend([batch.states.view(), batch.states.view()]);
        actions.extend([ea.limited.view(), ea.pre_limit.view()]);
    }
    let x = concatenate(
        Axis(1),
        &[
            concatenate(Axis(0), &states).map_err(shape_err)?.view(),
            e.normalize_actions(&concatenate(Axis(0), &actions).map_err(shape_err)?)
                .view(),
        ],
    )
    .map_err(shape_err)?;

    let n = e.len() as f64;
    let mut out = CriticLossOutput {
        loss: 0.0,
        kl: 0.0,
        entropy_in: 0.0,
        entropy_ood: 0.0,
        grads: Vec::with_capacity(e.len()),
    };
    for (member, target) in e.members.iter().zip(&targets) {
        let neg_t_log_t: f64 = target
            .iter()
            .filter(|t| **t > 0.0)
            .map(|t| t * t.ln())
            .sum::<f64>()
            / b as f64;
        let mut tape = Tape::new();
        let bound = member.bind(&mut tape);
        let xv = tape.input(x.clone());
        let logits = e.net.forward(&mut tape, &bound, xv)?;
        let lp = tape.log_softmax(logits);

        let lp_data = tape.slice_rows(lp, 0, b);
        let tv = tape.input(target.clone());
        let cross = tape.mul(tv, lp_data);
        let cross = tape.sum_all(cross);
        // KL = sum t ln t - sum t ln q, averaged over the batch.
        let kl = tape.scale(cross, -1.0 / b as f64);
        let kl = tape.add_scalar(kl, neg_t_log_t);
        let mut loss = kl;
        let (mut h_in, mut h_ood) = (0.0, 0.0);
        if entropy_actions.is_some() {
            let mean_entropy = |tape: &mut Tape, start: usize| {
                let l = tape.slice_rows(lp, start, start + b);
                let p = tape.exp(l);
                let pl = tape.mul(p, l);
                let s = tape.sum_all(pl);
                tape.scale(s, -1.0 / b as f64)
            };
            let ent_in = mean_entropy(&mut tape, b);
            let ent_ood = mean_entropy(&mut tape, 2 * b);
            h_in = tape.scalar(ent_in);
            h_ood = tape.scalar(ent_ood);
            let a = tape.scale(ent_in, cfg.entropy_in_coef);
            let c = tape.scale(ent_ood, -cfg.entropy_ood_coef);
            loss = tape.add(loss, a);
            loss = tape.add(loss, c);
        }
        let loss = tape.scale(loss, 1.0 / n);
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        out.loss += l;
        out.kl += tape.scalar(kl) / n;
        out.entropy_in += h_in / n;
        out.entropy_ood += h_ood / n;
        let mut g = tape.backward(loss);
        out.grads.push(bound.grads(&mut g));
    }
    Ok(out)
}

/// Mean of every member's distribution, rows x members.
pub fn member_means(e: &CriticEnsemble, s: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
    let atoms = Array1::from(e.grid.atoms());
    let all = e.evaluate(s, a, Which::Online, Members::All)?;
    let mut out = Array2::zeros((s.nrows(), all.len()));
    for (i, p) in all.iter().enumerate() {
        out.slice_mut(s![.., i]).assign(&p.dot(&atoms));
    }
    Ok(out)
}
