//! Noise-schedule arithmetic and the forward diffusion process.
//!
//! Timesteps are continuous in `(0, 1)`. The cumulative signal level
//! `alpha_bar(t)` is read off a discrete linear-beta ladder by linear
//! interpolation, so `t = k / num_steps` lands exactly on rung `k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::check_dim;

/// Normalized diffusion time, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Timestep(f64);

impl Timestep {
    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 && t < 1.0 {
            Ok(Timestep(t))
        } else {
            Err(Error::Domain(format!("timestep {t} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Timestep {
    type Error = Error;

    fn try_from(t: f64) -> Result<Self> {
        Timestep::new(t)
    }
}

impl From<Timestep> for f64 {
    fn from(t: Timestep) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleParams {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    num_steps: usize,
}

/// Linear-beta noise schedule with a precomputed `alpha_bar` ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct NoiseSchedule {
    params: ScheduleParams,
    // ladder[k] = prod_{i < k} (1 - beta_i), ladder[0] = 1
    ladder: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear_beta(1e-4, 2e-2, 1000).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear_beta(beta_start: f64, beta_end: f64, num_steps: usize) -> Result<Self> {
        ScheduleParams {
            kind: ScheduleKind::LinearBeta,
            beta_start,
            beta_end,
            num_steps,
        }
        .try_into()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    pub fn beta_start(&self) -> f64 {
        self.params.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.params.beta_end
    }

    pub fn num_steps(&self) -> usize {
        self.params.num_steps
    }

    /// `beta_i` for rung `i` in `0..num_steps`.
    pub fn beta(&self, i: usize) -> f64 {
        let p = &self.params;
        if p.num_steps == 1 {
            return p.beta_start;
        }
        p.beta_start + (p.beta_end - p.beta_start) * i as f64 / (p.num_steps - 1) as f64
    }

    pub fn alpha_bar(&self, t: Timestep) -> f64 {
        let n = self.params.num_steps;
        let pos = t.value() * n as f64;
        let k = pos.floor() as usize;
        if k >= n {
            return self.ladder[n];
        }
        let frac = pos - k as f64;
        if frac == 0.0 {
            return self.ladder[k];
        }
        self.ladder[k] * (1.0 - frac) + self.ladder[k + 1] * frac
    }

    /// Noise level `sqrt(1 - alpha_bar(t))`.
    pub fn sigma(&self, t: Timestep) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// `sqrt(alpha_bar) * x + sqrt(1 - alpha_bar) * eps`.
    pub fn add_noise(&self, x: &[f64], t: Timestep, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x.len(), eps)?;
        let ab = self.alpha_bar(t);
        Ok(add_noise_with(ab, x, eps))
    }
}

pub(crate) fn add_noise_with(alpha_bar: f64, x: &[f64], eps: &[f64]) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x.iter().zip(eps).map(|(xi, ei)| a * xi + s * ei).collect()
}

impl TryFrom<ScheduleParams> for NoiseSchedule {
    type Error = Error;

    fn try_from(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            beta_start,
            beta_end,
            num_steps,
            ..
        } = params;
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if num_steps == 0 {
            return Err(Error::Config("noise schedule needs num_steps >= 1".into()));
        }
        let mut schedule = NoiseSchedule {
            params,
            ladder: Vec::with_capacity(num_steps + 1),
        };
        let mut acc = 1.0;
        schedule.ladder.push(acc);
        for i in 0..num_steps {
            acc *= 1.0 - schedule.beta(i);
            schedule.ladder.push(acc);
        }
        Ok(schedule)
    }
}

impl From<NoiseSchedule> for ScheduleParams {
    fn from(s: NoiseSchedule) -> Self {
        s.params
    }
}

pub fn validate_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if lo > 0.0 && lo <= hi && hi < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "timestep range ({lo}, {hi}) must satisfy 0 < t_min <= t_max < 1"
        )))
    }
}

/// Uniform timestep in `[t_min, t_max]`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> Result<Timestep> {
    validate_range(range)?;
    let (lo, hi) = range;
    let u: f64 = rng.random();
    // u < 1 keeps the sample at or below hi; clamp guards the rounding of lo + (hi - lo) * u
    Timestep::new((lo + (hi - lo) * u).clamp(lo, hi))
}
