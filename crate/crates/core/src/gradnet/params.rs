use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Free scalar such as an action bound.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    value: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Array2<f64>) -> Self {
        Self {
            name: name.into(),
            kind,
            value,
        }
    }

    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }
}

/// Named arrays whose shapes are fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles for every entry of a [`ParamSet`], in order.
#[derive(Debug, Clone)]
pub struct BoundParams(pub Vec<Var>);

impl BoundParams {
    pub fn grads(&self, g: &mut Gradients) -> Vec<Array2<f64>> {
        self.0.iter().map(|v| g.take(*v)).collect()
    }
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        let set = Self { params };
        set.check_finite()?;
        Ok(set)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn value(&self, i: usize) -> &Array2<f64> {
        &self.params[i].value
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|p| p.value.dim()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every entry on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| tape.input(p.value.clone()))
                .collect(),
        )
    }

    /// Overwrites entry `i`, keeping its shape.
    pub fn set(&mut self, i: usize, value: Array2<f64>) -> Result<()> {
        let p = &mut self.params[i];
        if p.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.value.dim(),
                value.dim()
            )));
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(p.name.clone()));
        }
        p.value = value;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            if p.value.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        Ok(())
    }

    fn check_aligned(&self, other: &[Array2<f64>]) -> Result<()> {
        if other.len() != self.params.len()
            || self
                .params
                .iter()
                .zip(other)
                .any(|(p, o)| p.value.dim() != o.dim())
        {
            return Err(Error::Shape("arrays not aligned with parameter set".into()));
        }
        Ok(())
    }

    /// `self <- (1 - tau) * self + tau * online`.
    pub fn polyak_update(&mut self, online: &ParamSet, tau: f64) -> Result<()> {
        if self.shapes() != online.shapes() {
            return Err(Error::Shape("polyak_update on mismatched sets".into()));
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            t.value.zip_mut_with(&o.value, |t, o| *t = (1.0 - tau) * *t + tau * o);
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay on weights only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = params.shapes().into_iter().map(Array2::zeros).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Array2<f64>], &[Array2<f64>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) -> Result<()> {
        params.check_aligned(grads)?;
        if self.m.len() != grads.len() {
            return Err(Error::Shape("optimizer state not aligned with parameters".into()));
        }
        for (p, g) in params.params.iter().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, g), (m, v)) in params
            .params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.kind == ParamKind::Weight {
                lr * self.weight_decay
            } else {
                0.0
            };
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *w = *w * (1.0 - decay) - lr * update;
                });
        }
        Ok(())
    }
}
