use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ScoreOracle, Slot};
use crate::diffusion::{NoiseSchedule, Timestep};
use crate::error::{Error, Result};
use crate::vector::{all_finite, check_dim};

/// One diagonal-covariance Gaussian with a mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let c = GaussianComponent {
            weight,
            mean,
            variance,
        };
        c.validate()?;
        Ok(c)
    }

    /// Isotropic component with variance `var` in every dimension.
    pub fn isotropic(weight: f64, mean: Vec<f64>, var: f64) -> Result<Self> {
        let variance = vec![var; mean.len()];
        GaussianComponent::new(weight, mean, variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::Config(format!(
                "component weight must be positive, got {}",
                self.weight
            )));
        }
        if self.mean.is_empty() {
            return Err(Error::Config("component mean is empty".into()));
        }
        check_dim(self.mean.len(), &self.variance)?;
        if !all_finite(&self.mean) {
            return Err(Error::Config("component mean is not finite".into()));
        }
        if !self.variance.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Config(
                "component variances must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(&self.mean).zip(&self.variance) {
            let d = xi - mi;
            acc += (2.0 * PI * vi).ln() + d * d / vi;
        }
        -0.5 * acc
    }
}

/// Diffuses every component to time `t`: mean scales by `sqrt(alpha_bar)`,
/// variance maps to `alpha_bar * var + (1 - alpha_bar)`. Weights are kept.
pub fn marginal_at(
    mixture: &[GaussianComponent],
    t: Timestep,
    schedule: &NoiseSchedule,
) -> Vec<GaussianComponent> {
    diffuse(mixture, schedule.alpha_bar(t))
}

fn diffuse(mixture: &[GaussianComponent], alpha_bar: f64) -> Vec<GaussianComponent> {
    let a = alpha_bar.sqrt();
    mixture
        .iter()
        .map(|c| GaussianComponent {
            weight: c.weight,
            mean: c.mean.iter().map(|m| a * m).collect(),
            variance: c
                .variance
                .iter()
                .map(|v| alpha_bar * v + (1.0 - alpha_bar))
                .collect(),
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log sum_k w_k N(x; mu_k, diag(var_k))`, via log-sum-exp.
pub fn log_density(mixture: &[GaussianComponent], x: &[f64]) -> f64 {
    let terms: Vec<f64> = mixture
        .iter()
        .map(|c| c.weight.ln() + c.log_pdf(x))
        .collect();
    log_sum_exp(&terms)
}

/// Posterior component probabilities at `x`, computed in log space.
fn responsibilities(mixture: &[GaussianComponent], x: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = mixture
        .iter()
        .map(|c| c.weight.ln() + c.log_pdf(x))
        .collect();
    let lse = log_sum_exp(&logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// `grad_x log p(x)` for a diagonal mixture.
fn mixture_score(mixture: &[GaussianComponent], x: &[f64]) -> Vec<f64> {
    let r = responsibilities(mixture, x);
    let mut score = vec![0.0; x.len()];
    for (c, rk) in mixture.iter().zip(&r) {
        for (i, s) in score.iter_mut().enumerate() {
            *s += rk * (c.mean[i] - x[i]) / c.variance[i];
        }
    }
    score
}

fn mixture_dim(mixture: &[GaussianComponent]) -> Result<usize> {
    let first = mixture
        .first()
        .ok_or_else(|| Error::Config("mixture has no components".into()))?;
    for c in mixture {
        c.validate()?;
        check_dim(first.dim(), &c.mean)?;
    }
    Ok(first.dim())
}

/// Ground-truth distribution for each conditioning slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<Slot, Vec<GaussianComponent>>",
    into = "BTreeMap<Slot, Vec<GaussianComponent>>"
)]
pub struct GaussianMixtureScene {
    dim: usize,
    slots: BTreeMap<Slot, Vec<GaussianComponent>>,
}

impl GaussianMixtureScene {
    /// Builds a scene; every slot must be present, all components must share
    /// one dimension, and each slot's weights are normalized to sum to one.
    pub fn new(slots: impl IntoIterator<Item = (Slot, Vec<GaussianComponent>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (slot, comps) in slots {
            if map.insert(slot, comps).is_some() {
                return Err(Error::Config(format!("slot {slot} given twice")));
            }
        }
        let mut dim = None;
        for slot in Slot::ALL {
            let comps = map
                .get_mut(&slot)
                .ok_or_else(|| Error::Config(format!("scene is missing slot {slot}")))?;
            let d = mixture_dim(comps)
                .map_err(|e| Error::Config(format!("slot {slot}: {e}")))?;
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Config(format!(
                        "slot {slot} has dim {d}, other slots have {prev}"
                    )))
                }
                _ => {}
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            // already-normalized weights are kept bit-for-bit so serialized
            // scenes reload unchanged
            if (total - 1.0).abs() > 1e-12 {
                for c in comps.iter_mut() {
                    c.weight /= total;
                }
            }
        }
        Ok(GaussianMixtureScene {
            dim: dim.expect("four slots checked"),
            slots: map,
        })
    }

    /// Scene in which every slot holds the same mixture.
    pub fn uniform(mixture: Vec<GaussianComponent>) -> Result<Self> {
        GaussianMixtureScene::new(Slot::ALL.map(|slot| (slot, mixture.clone())))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mixture(&self, slot: Slot) -> &[GaussianComponent] {
        &self.slots[&slot]
    }

    /// Weighted mean of a slot's mixture.
    pub fn mean(&self, slot: Slot) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in self.mixture(slot) {
            for (mi, ci) in m.iter_mut().zip(&c.mean) {
                *mi += c.weight * ci;
            }
        }
        m
    }
}

impl TryFrom<BTreeMap<Slot, Vec<GaussianComponent>>> for GaussianMixtureScene {
    type Error = Error;

    fn try_from(map: BTreeMap<Slot, Vec<GaussianComponent>>) -> Result<Self> {
        GaussianMixtureScene::new(map)
    }
}

impl From<GaussianMixtureScene> for BTreeMap<Slot, Vec<GaussianComponent>> {
    fn from(scene: GaussianMixtureScene) -> Self {
        scene.slots
    }
}

/// Exact noise predictions for a [`GaussianMixtureScene`]:
/// `eps_hat = -sigma_t * grad log p_t(x_t | slot)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticOracle {
    scene: GaussianMixtureScene,
    schedule: NoiseSchedule,
}

impl AnalyticOracle {
    pub fn new(scene: GaussianMixtureScene, schedule: NoiseSchedule) -> Self {
        AnalyticOracle { scene, schedule }
    }

    pub fn scene(&self) -> &GaussianMixtureScene {
        &self.scene
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// The slot's mixture diffused to time `t`.
    pub fn marginal(&self, slot: Slot, t: Timestep) -> Vec<GaussianComponent> {
        marginal_at(self.scene.mixture(slot), t, &self.schedule)
    }

    pub fn responsibilities(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>> {
        check_dim(self.scene.dim, x_t)?;
        Ok(responsibilities(&self.marginal(slot, t), x_t))
    }

    /// `grad_x log p_t(x_t | slot)`.
    pub fn score(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>> {
        check_dim(self.scene.dim, x_t)?;
        if !all_finite(x_t) {
            return Err(Error::Domain("x_t has non-finite entries".into()));
        }
        Ok(mixture_score(&self.marginal(slot, t), x_t))
    }
}

impl ScoreOracle for AnalyticOracle {
    fn dim(&self) -> Option<usize> {
        Some(self.scene.dim)
    }

    fn predict_noise(&self, x_t: &[f64], t: Timestep, slot: Slot) -> Result<Vec<f64>> {
        let sigma = self.schedule.sigma(t);
        let score = self.score(x_t, t, slot)?;
        Ok(score.into_iter().map(|s| -sigma * s).collect())
    }
}
