//! Risk measures over categorical return distributions.
//!
//! All measures use the lower-tail convention: a risk level `alpha` keeps the
//! worst `1 - alpha` of probability mass. `alpha = 0` keeps everything (CVaR
//! equals the mean) and `alpha -> 1` is maximally conservative.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;

/// Risk level `alpha` in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskLevel(f64);

impl RiskLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..1.0).contains(&alpha) {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidRiskLevel(alpha))
        }
    }

    pub fn neutral() -> Self {
        Self(0.0)
    }

    pub fn alpha(self) -> f64 {
        self.0
    }

    /// Probability mass retained in the worst-case tail.
    pub fn tail_mass(self) -> f64 {
        1.0 - self.0
    }
}

impl TryFrom<f64> for RiskLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RiskLevel> for f64 {
    fn from(r: RiskLevel) -> f64 {
        r.0
    }
}

/// Probability mass over a strictly increasing set of atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        validate(&atoms, &probs)?;
        Ok(Self { atoms, probs })
    }

    /// Builds a distribution after dividing `weights` by their sum.
    pub fn normalized(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights must have positive finite sum, got {total}"
            )));
        }
        let probs = weights.into_iter().map(|w| w / total).collect();
        Self::new(atoms, probs)
    }

    pub fn point_mass(at: f64) -> Self {
        Self {
            atoms: vec![at],
            probs: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(z, p)| z * p).sum()
    }

    /// CDF evaluated at every atom.
    pub fn cdf(&self) -> Vec<f64> {
        cumsum(&self.probs)
    }

    /// Value of the CDF at an arbitrary point.
    pub fn cdf_at(&self, z: f64) -> f64 {
        self.atoms
            .iter()
            .zip(&self.probs)
            .take_while(|(a, _)| **a <= z)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn is_point_mass(&self) -> bool {
        self.probs.iter().filter(|p| **p > 0.0).count() == 1
    }

    /// Draws one sample by inverse-CDF lookup.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (z, p) in self.atoms.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *z;
            }
        }
        *self.atoms.last().expect("validated non-empty")
    }
}

fn validate(atoms: &[f64], probs: &[f64]) -> Result<()> {
    if atoms.is_empty() {
        return Err(Error::InvalidDistribution("no atoms".into()));
    }
    if atoms.len() != probs.len() {
        return Err(Error::InvalidDistribution(format!(
            "{} atoms but {} probabilities",
            atoms.len(),
            probs.len()
        )));
    }
    if atoms.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite atom".into()));
    }
    if atoms.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidDistribution(
            "atoms must be strictly increasing".into(),
        ));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(
            "probabilities must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(())
}

fn cumsum(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

/// Worst-case tail masses: clip the CDF at `1 - alpha`, rescale, difference.
pub fn tail_probs(probs: &[f64], alpha: f64) -> Vec<f64> {
    let m = 1.0 - alpha;
    let mut prev = 0.0;
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            let clipped = acc.min(m) / m;
            let out = clipped - prev;
            prev = clipped;
            out
        })
        .collect()
}

/// CVaR of raw (atoms, probs) slices. Used by the tape op on batched rows.
pub fn cvar_parts(atoms: &[f64], probs: &[f64], alpha: f64) -> f64 {
    tail_probs(probs, alpha)
        .iter()
        .zip(atoms)
        .map(|(p, z)| p * z)
        .sum()
}

/// Gradient of [`cvar_parts`] with respect to `probs`.
///
/// At the clip point (`C_i == 1 - alpha`) the derivative of the clipped CDF is
/// taken from the constant branch, so atoms at or above VaR receive zero.
pub fn cvar_grad_parts(atoms: &[f64], probs: &[f64], alpha: f64, out: &mut [f64]) {
    let n = atoms.len();
    let m = 1.0 - alpha;
    let mut acc = 0.0;
    // d cvar / d C_i, then reverse cumulative sum gives d cvar / d p_j.
    for i in 0..n {
        acc += probs[i];
        let coef = if i + 1 < n {
            atoms[i] - atoms[i + 1]
        } else {
            atoms[i]
        };
        out[i] = if acc < m { coef / m } else { 0.0 };
    }
    for j in (0..n.saturating_sub(1)).rev() {
        out[j] += out[j + 1];
    }
}

pub fn cvar(d: &CategoricalDistribution, alpha: RiskLevel) -> f64 {
    cvar_parts(&d.atoms, &d.probs, alpha.alpha())
}

/// Gradient of CVaR with respect to the probability vector of `d`.
pub fn cvar_grad(d: &CategoricalDistribution, alpha: RiskLevel) -> Vec<f64> {
    let mut g = vec![0.0; d.len()];
    cvar_grad_parts(&d.atoms, &d.probs, alpha.alpha(), &mut g);
    g
}

/// Smallest atom whose CDF reaches `1 - alpha`.
pub fn var(d: &CategoricalDistribution, alpha: RiskLevel) -> f64 {
    let level = alpha.tail_mass() - 1e-12;
    let mut acc = 0.0;
    for (z, p) in d.atoms.iter().zip(&d.probs) {
        acc += p;
        if acc >= level {
            return *z;
        }
    }
    *d.atoms.last().expect("validated non-empty")
}

/// Renormalized worst-case `1 - alpha` slice of `d`. Atoms above the last one
/// carrying tail mass are dropped.
pub fn tail(d: &CategoricalDistribution, alpha: RiskLevel) -> CategoricalDistribution {
    let probs = tail_probs(&d.probs, alpha.alpha());
    let keep = probs.iter().rposition(|p| *p > 0.0).map_or(1, |i| i + 1);
    let mut probs = probs[..keep].to_vec();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    CategoricalDistribution {
        atoms: d.atoms[..keep].to_vec(),
        probs,
    }
}

/// One-dimensional earth mover's distance: the area between the two CDFs.
pub fn emd(x: &CategoricalDistribution, y: &CategoricalDistribution) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut fx, mut fy) = (0.0f64, 0.0f64);
    let mut total = 0.0;
    let mut last: Option<f64> = None;
    while i < x.len() || j < y.len() {
        let zx = x.atoms.get(i).copied().unwrap_or(f64::INFINITY);
        let zy = y.atoms.get(j).copied().unwrap_or(f64::INFINITY);
        let z = zx.min(zy);
        if let Some(prev) = last {
            total += (fx - fy).abs() * (z - prev);
        }
        if zx == z {
            fx += x.probs[i];
            i += 1;
        }
        if zy == z {
            fy += y.probs[j];
            j += 1;
        }
        last = Some(z);
    }
    total
}

/// Weighted mixture on the union of the member atom sets. `None` means
/// uniform weights.
pub fn mixture(
    ds: &[CategoricalDistribution],
    weights: Option<&[f64]>,
) -> Result<CategoricalDistribution> {
    if ds.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let uniform;
    let weights = match weights {
        Some(w) => {
            if w.len() != ds.len() {
                return Err(Error::Shape(format!(
                    "{} weights for {} distributions",
                    w.len(),
                    ds.len()
                )));
            }
            w
        }
        None => {
            uniform = vec![1.0 / ds.len() as f64; ds.len()];
            &uniform
        }
    };
    let mut points: Vec<(f64, f64)> = ds
        .iter()
        .zip(weights)
        .flat_map(|(d, w)| d.atoms.iter().zip(&d.probs).map(move |(z, p)| (*z, w * p)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut atoms: Vec<f64> = Vec::with_capacity(points.len());
    let mut probs: Vec<f64> = Vec::with_capacity(points.len());
    for (z, p) in points {
        if atoms.last() == Some(&z) {
            *probs.last_mut().unwrap() += p;
        } else {
            atoms.push(z);
            probs.push(p);
        }
    }
    CategoricalDistribution::new(atoms, probs)
}

/// Mean member CVaR minus the CVaR of the uniform mixture.
pub fn cvar_gap(ds: &[CategoricalDistribution], alpha: RiskLevel) -> Result<f64> {
    let mix = mixture(ds, None)?;
    let member_mean = ds.iter().map(|d| cvar(d, alpha)).sum::<f64>() / ds.len() as f64;
    Ok(member_mean - cvar(&mix, alpha))
}

/// Mean EMD between each member's tail and the mixture's tail.
pub fn tail_emd_mean(ds: &[CategoricalDistribution], alpha: RiskLevel) -> Result<f64> {
    let mix_tail = tail(&mixture(ds, None)?, alpha);
    Ok(ds
        .iter()
        .map(|d| emd(&mix_tail, &tail(d, alpha)))
        .sum::<f64>()
        / ds.len() as f64)
}

/// Gaussian mixture with `K` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
}

impl GaussianMixtureSpec {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, std_devs: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || std_devs.len() != k {
            return Err(Error::Shape("mixture component lists differ in length".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > SUM_TOL || weights.iter().any(|w| *w < 0.0)
        {
            return Err(Error::InvalidDistribution("mixture weights".into()));
        }
        if std_devs.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidDistribution("std-devs must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            std_devs,
        })
    }

    pub fn density(&self, z: f64) -> f64 {
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.std_devs)
            .map(|((w, m), s)| {
                let u = (z - m) / s;
                w * (-0.5 * u * u).exp() / (s * norm)
            })
            .sum()
    }

    /// Density sampled on `atoms` and renormalized.
    pub fn discretize(&self, atoms: &[f64]) -> Result<CategoricalDistribution> {
        let w = atoms.iter().map(|z| self.density(*z)).collect();
        CategoricalDistribution::normalized(atoms.to_vec(), w)
    }

    fn random_base<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Self {
        let logits: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let means = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let std_devs = (0..k)
            .map(|_| rng.random_range(0.5f64.ln()..2.0f64.ln()).exp())
            .collect();
        Self {
            weights: softmax(&logits),
            means,
            std_devs,
        }
    }

    /// Jitters means, log-std-devs and weight logits around `self`.
    fn perturbed<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Self {
        let mut jitter = |sd: f64| -> f64 {
            if scale == 0.0 {
                0.0
            } else {
                Normal::new(0.0, sd * scale).unwrap().sample(rng)
            }
        };
        let logits: Vec<f64> = self.weights.iter().map(|w| w.ln() + jitter(0.3)).collect();
        let means = self.means.iter().map(|m| m + jitter(0.5)).collect();
        let std_devs = self
            .std_devs
            .iter()
            .map(|s| (s.ln() + jitter(0.2)).exp())
            .collect();
        Self {
            weights: softmax(&logits),
            means,
            std_devs,
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Settings for the random Gaussian-mixture ensemble study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapExperimentConfig {
    pub n_trials: usize,
    /// Components per base mixture.
    pub k: usize,
    /// Ensemble members per trial.
    pub n: usize,
    pub seed: u64,
    pub alpha: RiskLevel,
    /// Multiplies every perturbation standard deviation; 0 gives identical members.
    pub perturbation_scale: f64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_atoms: usize,
}

impl Default for GapExperimentConfig {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            k: 3,
            n: 3,
            seed: 0,
            alpha: RiskLevel(0.9),
            perturbation_scale: 1.0,
            grid_min: -10.0,
            grid_max: 10.0,
            grid_atoms: 201,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub trial: usize,
    pub tail_emd_mean: f64,
    pub cvar_gap: f64,
}

pub fn run_gap_experiment(cfg: &GapExperimentConfig) -> Result<Vec<GapRow>> {
    if cfg.n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    if cfg.k == 0 || cfg.n == 0 || cfg.grid_atoms < 2 || cfg.grid_min >= cfg.grid_max {
        return Err(Error::Config("invalid gap experiment dimensions".into()));
    }
    let step = (cfg.grid_max - cfg.grid_min) / (cfg.grid_atoms - 1) as f64;
    let atoms: Vec<f64> = (0..cfg.grid_atoms)
        .map(|i| cfg.grid_min + step * i as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_trials)
        .map(|trial| {
            let base = GaussianMixtureSpec::random_base(&mut rng, cfg.k);
            let members = (0..cfg.n)
                .map(|_| {
                    base.perturbed(&mut rng, cfg.perturbation_scale)
                        .discretize(&atoms)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GapRow {
                trial,
                tail_emd_mean: tail_emd_mean(&members, cfg.alpha)?,
                cvar_gap: cvar_gap(&members, cfg.alpha)?,
            })
        })
        .collect()
}

pub const GAP_CSV_HEADER: &str = "trial,tail_emd_mean,cvar_gap";

pub fn write_gap_csv<W: Write>(mut w: W, rows: &[GapRow]) -> std::io::Result<()> {
    writeln!(w, "{GAP_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.trial, r.tail_emd_mean, r.cvar_gap)?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
