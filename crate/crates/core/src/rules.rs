//! Distillation gradient rules.
//!
//! Each rule maps one [`GuidanceTerms`] bundle (four conditional noise
//! predictions at a shared `x_t` plus the injected noise) to an update
//! direction in state space. The optimizer descends along it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::Timestep;
use crate::error::{Error, Result};
use crate::vector::{all_finite, check_dim, lincomb, norm_sq, sub};

/// Noise predictions under the four conditions, plus the noise `eps` that
/// produced `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTerms {
    pub eps_tgt: Vec<f64>,
    pub eps_null: Vec<f64>,
    pub eps_gnp: Vec<f64>,
    pub eps_tnp: Vec<f64>,
    pub eps: Vec<f64>,
}

impl GuidanceTerms {
    pub fn dim(&self) -> usize {
        self.eps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for v in [&self.eps_tgt, &self.eps_null, &self.eps_gnp, &self.eps_tnp] {
            check_dim(d, v)?;
        }
        let finite = [
            &self.eps_tgt,
            &self.eps_null,
            &self.eps_gnp,
            &self.eps_tnp,
            &self.eps,
        ]
        .iter()
        .all(|v| all_finite(v));
        if finite {
            Ok(())
        } else {
            Err(Error::Domain("guidance terms contain non-finite values".into()))
        }
    }
}

/// Classifier-free guidance term `eps_tgt - eps_null`.
pub fn delta_cls(terms: &GuidanceTerms) -> Vec<f64> {
    sub(&terms.eps_tgt, &terms.eps_null)
}

/// SDS with CFG scale `s`: `(eps_null - eps) + s * (eps_tgt - eps_null)`.
pub fn delta_sds(terms: &GuidanceTerms, s: f64) -> Vec<f64> {
    let GuidanceTerms {
        eps_tgt,
        eps_null,
        eps,
        ..
    } = terms;
    (0..eps.len())
        .map(|i| (eps_null[i] - eps[i]) + s * (eps_tgt[i] - eps_null[i]))
        .collect()
}

/// Noise-free score distillation. The general negative prediction enters
/// only below the gate timestep.
pub fn delta_nfsd(terms: &GuidanceTerms, s: f64, t: Timestep, gate_t: f64) -> Vec<f64> {
    let gate = if t.value() < gate_t { 1.0 } else { 0.0 };
    let GuidanceTerms {
        eps_tgt,
        eps_null,
        eps_gnp,
        ..
    } = terms;
    (0..eps_tgt.len())
        .map(|i| s * (eps_tgt[i] - eps_null[i]) + (eps_null[i] - gate * eps_gnp[i]))
        .collect()
}

/// Classifier score distillation: `w1 * (tgt - null) + w2 * (null - gnp)`.
pub fn delta_csd(terms: &GuidanceTerms, w1: f64, w2: f64) -> Vec<f64> {
    let GuidanceTerms {
        eps_tgt,
        eps_null,
        eps_gnp,
        ..
    } = terms;
    (0..eps_tgt.len())
        .map(|i| w1 * (eps_tgt[i] - eps_null[i]) + w2 * (eps_null[i] - eps_gnp[i]))
        .collect()
}

/// Linear ramp of the CSD negative weight from `w2_init` down to zero over
/// `anneal_steps` steps.
pub fn anneal_w2(step: usize, w2_init: f64, anneal_steps: usize) -> f64 {
    if step >= anneal_steps {
        return 0.0;
    }
    w2_init * (anneal_steps - step) as f64 / anneal_steps as f64
}

/// Bridge: `w * (eps_tgt - eps_tnp)`.
pub fn delta_bridge(terms: &GuidanceTerms, w: f64) -> Vec<f64> {
    terms
        .eps_tgt
        .iter()
        .zip(&terms.eps_tnp)
        .map(|(a, b)| w * (a - b))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostKind {
    Gnp,
    Tnp,
}

/// The negative-prompt half of the shared rule structure:
/// `eps_null - eps_gnp` or `eps_null - eps_tnp`.
pub fn delta_post(terms: &GuidanceTerms, kind: PostKind) -> Vec<f64> {
    let neg = match kind {
        PostKind::Gnp => &terms.eps_gnp,
        PostKind::Tnp => &terms.eps_tnp,
    };
    sub(&terms.eps_null, neg)
}

/// TNP guidance with a fixed amount `a` of classifier guidance injected:
/// `(tgt - tnp) + a * (tgt - null)`.
pub fn delta_fixed_a(terms: &GuidanceTerms, a: f64) -> Vec<f64> {
    let GuidanceTerms {
        eps_tgt,
        eps_null,
        eps_tnp,
        ..
    } = terms;
    (0..eps_tgt.len())
        .map(|i| (eps_tgt[i] - eps_tnp[i]) + a * (eps_tgt[i] - eps_null[i]))
        .collect()
}

/// Shape objective `tgt - null` and texture objective `tgt - tnp`.
pub fn shape_texture_objectives(terms: &GuidanceTerms) -> (Vec<f64>, Vec<f64>) {
    (
        sub(&terms.eps_tgt, &terms.eps_null),
        sub(&terms.eps_tgt, &terms.eps_tnp),
    )
}

/// Decaying weight on the texture objective:
/// `max(alpha * (1 - step / beta), gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl FactorSchedule {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let s = FactorSchedule { alpha, beta, gamma };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let FactorSchedule { alpha, beta, gamma } = *self;
        let positive = [alpha, beta, gamma].iter().all(|v| v.is_finite() && *v > 0.0);
        if !positive {
            return Err(Error::Config(format!(
                "factor schedule needs alpha, beta, gamma > 0, got {alpha}, {beta}, {gamma}"
            )));
        }
        if gamma > alpha {
            return Err(Error::Config(format!(
                "factor floor gamma={gamma} exceeds start alpha={alpha}"
            )));
        }
        Ok(())
    }
}

pub fn factor(step: usize, sched: &FactorSchedule) -> f64 {
    // alpha * (beta - step) / beta is alpha * (1 - step / beta) with one
    // fewer rounding, so round inputs give exact outputs
    let ramp = sched.alpha * (sched.beta - step as f64) / sched.beta;
    ramp.max(sched.gamma)
}

/// Below this squared separation the two objectives are treated as equal.
pub const DEGENERATE_GAP_SQ: f64 = 1e-24;

/// Closed-form solution of `min_{mu in [0,1]} |mu * d_s + (1 - mu) * d_td|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgdaResult {
    pub mu: f64,
    /// Unclamped stationary point; `None` when degenerate.
    pub raw_mu: Option<f64>,
    pub combined: Vec<f64>,
    pub degenerate: bool,
}

pub fn solve_mu(delta_s: &[f64], delta_td: &[f64]) -> Result<MgdaResult> {
    check_dim(delta_s.len(), delta_td)?;
    let gap = sub(delta_td, delta_s);
    let gap_sq = norm_sq(&gap);
    let (mu, raw_mu, degenerate) = if gap_sq < DEGENERATE_GAP_SQ {
        (0.5, None, true)
    } else {
        let raw = crate::vector::dot(&gap, delta_td) / gap_sq;
        (raw.clamp(0.0, 1.0), Some(raw), false)
    };
    Ok(MgdaResult {
        mu,
        raw_mu,
        combined: lincomb(mu, delta_s, 1.0 - mu, delta_td),
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbsdOutput {
    pub combined: Vec<f64>,
    pub mgda: MgdaResult,
    pub factor: f64,
}

/// Target-balanced distillation: scale the texture objective by the
/// factor schedule, then take the min-norm point between it and the shape
/// objective.
pub fn delta_tbsd(terms: &GuidanceTerms, step: usize, sched: &FactorSchedule) -> TbsdOutput {
    delta_tbsd_with_factor(terms, factor(step, sched))
}

pub fn delta_tbsd_with_factor(terms: &GuidanceTerms, factor_value: f64) -> TbsdOutput {
    let (delta_s, delta_t) = shape_texture_objectives(terms);
    let delta_td: Vec<f64> = delta_t.iter().map(|v| factor_value * v).collect();
    let mgda = solve_mu(&delta_s, &delta_td).expect("objectives share the terms' dim");
    TbsdOutput {
        combined: mgda.combined.clone(),
        mgda,
        factor: factor_value,
    }
}

/// TBSD rewritten as TNP guidance plus a CFG term with coefficient
/// `1 / (1 - mu)`: `(null - tnp) + (tgt - null) / (1 - mu)`.
pub fn tbsd_cfg_form(terms: &GuidanceTerms, mu: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::Domain(format!(
            "CFG form needs mu in [0, 1), got {mu}"
        )));
    }
    let coef = cfg_coefficient(mu);
    let GuidanceTerms {
        eps_tgt,
        eps_null,
        eps_tnp,
        ..
    } = terms;
    Ok((0..eps_tgt.len())
        .map(|i| (eps_null[i] - eps_tnp[i]) + coef * (eps_tgt[i] - eps_null[i]))
        .collect())
}

pub fn cfg_coefficient(mu: f64) -> f64 {
    1.0 / (1.0 - mu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Sds,
    Nfsd,
    Csd,
    Bridge,
    FixedA,
    Tbsd,
}

impl RuleKind {
    pub const ALL: [RuleKind; 6] = [
        RuleKind::Sds,
        RuleKind::Nfsd,
        RuleKind::Csd,
        RuleKind::Bridge,
        RuleKind::FixedA,
        RuleKind::Tbsd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::Sds => "sds",
            RuleKind::Nfsd => "nfsd",
            RuleKind::Csd => "csd",
            RuleKind::Bridge => "bridge",
            RuleKind::FixedA => "fixed_a",
            RuleKind::Tbsd => "tbsd",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = RuleKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown rule `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Hyperparameter presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 1000-iteration image-space optimization settings.
    #[default]
    TwoD,
    /// Long-horizon settings (tens of thousands of iterations).
    LongRun,
}

/// A distillation rule and its scalar hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleConfig {
    Sds {
        s: f64,
    },
    Nfsd {
        s: f64,
        #[serde(default = "default_gate")]
        gate_t: f64,
    },
    Csd {
        w1: f64,
        w2_init: f64,
        anneal_steps: usize,
    },
    /// Runs SDS with scale `s` for `sds_warmup_steps`, then Bridge with `w`.
    Bridge {
        w: f64,
        s: f64,
        sds_warmup_steps: usize,
    },
    FixedA {
        a: f64,
    },
    Tbsd {
        alpha: f64,
        beta: f64,
        gamma: f64,
    },
}

fn default_gate() -> f64 {
    0.2
}

/// Which formula produced a step's direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sds,
    Nfsd,
    Csd,
    SdsWarmup,
    Bridge,
    FixedA,
    Tbsd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleOutput {
    pub delta: Vec<f64>,
    pub phase: Phase,
    pub mgda: Option<MgdaResult>,
    pub factor: Option<f64>,
    pub w2: Option<f64>,
}

impl RuleConfig {
    pub fn preset(kind: RuleKind, preset: Preset) -> Self {
        match (kind, preset) {
            (RuleKind::Sds, _) => RuleConfig::Sds { s: 100.0 },
            (RuleKind::Nfsd, _) => RuleConfig::Nfsd {
                s: 7.5,
                gate_t: default_gate(),
            },
            (RuleKind::Csd, Preset::TwoD) => RuleConfig::Csd {
                w1: 40.0,
                w2_init: 40.0,
                anneal_steps: 500,
            },
            (RuleKind::Csd, Preset::LongRun) => RuleConfig::Csd {
                w1: 1.0,
                w2_init: 1.0,
                anneal_steps: 20_000,
            },
            (RuleKind::Bridge, Preset::TwoD) => RuleConfig::Bridge {
                w: 25.0,
                s: 40.0,
                sds_warmup_steps: 500,
            },
            (RuleKind::Bridge, Preset::LongRun) => RuleConfig::Bridge {
                w: 25.0,
                s: 40.0,
                sds_warmup_steps: 20_000,
            },
            (RuleKind::FixedA, _) => RuleConfig::FixedA { a: 1.0 },
            (RuleKind::Tbsd, Preset::TwoD) => RuleConfig::Tbsd {
                alpha: 5.0,
                beta: 2000.0,
                gamma: 2.0,
            },
            (RuleKind::Tbsd, Preset::LongRun) => RuleConfig::Tbsd {
                alpha: 5.0,
                beta: 25_000.0,
                gamma: 2.0,
            },
        }
    }

    pub fn kind(&self) -> RuleKind {
        match self {
            RuleConfig::Sds { .. } => RuleKind::Sds,
            RuleConfig::Nfsd { .. } => RuleKind::Nfsd,
            RuleConfig::Csd { .. } => RuleKind::Csd,
            RuleConfig::Bridge { .. } => RuleKind::Bridge,
            RuleConfig::FixedA { .. } => RuleKind::FixedA,
            RuleConfig::Tbsd { .. } => RuleKind::Tbsd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{}: {name} must be positive, got {v}", self.kind())))
            }
        };
        match *self {
            RuleConfig::Sds { s } => positive("s", s),
            RuleConfig::Nfsd { s, gate_t } => {
                positive("s", s)?;
                if gate_t > 0.0 && gate_t < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("nfsd: gate_t must lie in (0, 1), got {gate_t}")))
                }
            }
            RuleConfig::Csd { w1, w2_init, .. } => {
                positive("w1", w1)?;
                if w2_init.is_finite() && w2_init >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("csd: w2_init must be >= 0, got {w2_init}")))
                }
            }
            RuleConfig::Bridge { w, s, .. } => {
                positive("w", w)?;
                positive("s", s)
            }
            RuleConfig::FixedA { a } => {
                if a.is_finite() && a >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("fixed_a: a must be >= 0, got {a}")))
                }
            }
            RuleConfig::Tbsd { alpha, beta, gamma } => {
                FactorSchedule::new(alpha, beta, gamma).map(|_| ())
            }
        }
    }

    pub fn factor_schedule(&self) -> Option<FactorSchedule> {
        match *self {
            RuleConfig::Tbsd { alpha, beta, gamma } => Some(FactorSchedule { alpha, beta, gamma }),
            _ => None,
        }
    }

    /// Direction for optimization step `step` (0-based) at timestep `t`.
    pub fn evaluate(&self, terms: &GuidanceTerms, step: usize, t: Timestep) -> RuleOutput {
        let plain = |delta, phase| RuleOutput {
            delta,
            phase,
            mgda: None,
            factor: None,
            w2: None,
        };
        match *self {
            RuleConfig::Sds { s } => plain(delta_sds(terms, s), Phase::Sds),
            RuleConfig::Nfsd { s, gate_t } => plain(delta_nfsd(terms, s, t, gate_t), Phase::Nfsd),
            RuleConfig::Csd {
                w1,
                w2_init,
                anneal_steps,
            } => {
                let w2 = anneal_w2(step, w2_init, anneal_steps);
                RuleOutput {
                    w2: Some(w2),
                    ..plain(delta_csd(terms, w1, w2), Phase::Csd)
                }
            }
            RuleConfig::Bridge {
                w,
                s,
                sds_warmup_steps,
            } => {
                if step < sds_warmup_steps {
                    plain(delta_sds(terms, s), Phase::SdsWarmup)
                } else {
                    plain(delta_bridge(terms, w), Phase::Bridge)
                }
            }
            RuleConfig::FixedA { a } => plain(delta_fixed_a(terms, a), Phase::FixedA),
            RuleConfig::Tbsd { alpha, beta, gamma } => {
                let out = delta_tbsd(terms, step, &FactorSchedule { alpha, beta, gamma });
                RuleOutput {
                    delta: out.combined,
                    phase: Phase::Tbsd,
                    mgda: Some(out.mgda),
                    factor: Some(out.factor),
                    w2: None,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn terms2(tgt: [f64; 2], null: [f64; 2], gnp: [f64; 2], tnp: [f64; 2], eps: [f64; 2]) -> GuidanceTerms {
        GuidanceTerms {
            eps_tgt: tgt.to_vec(),
            eps_null: null.to_vec(),
            eps_gnp: gnp.to_vec(),
            eps_tnp: tnp.to_vec(),
            eps: eps.to_vec(),
        }
    }

    fn arb_terms(dim: usize) -> impl Strategy<Value = GuidanceTerms> {
        let v = move || proptest::collection::vec(-3.0f64..3.0, dim);
        (v(), v(), v(), v(), v()).prop_map(|(a, b, c, d, e)| GuidanceTerms {
            eps_tgt: a,
            eps_null: b,
            eps_gnp: c,
            eps_tnp: d,
            eps: e,
        })
    }

    // min of |mu a + (1 - mu) b|^2 over a 1e-4 grid, by direct evaluation
    fn grid_min(a: &[f64], b: &[f64]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=10_000 {
            let mu = k as f64 * 1e-4;
            let n: f64 = a.iter().zip(b).map(|(x, y)| (mu * x + (1.0 - mu) * y).powi(2)).sum();
            if n < best.0 {
                best = (n, mu);
            }
        }
        best
    }

    #[test]
    fn cls_examples() {
        let same = terms2([1.0, 2.0], [1.0, 2.0], [0.0; 2], [0.0; 2], [0.0; 2]);
        assert_eq!(delta_cls(&same), vec![0.0, 0.0]);
        let t = terms2([1.0, 0.0], [0.0, 1.0], [0.0; 2], [0.0; 2], [0.0; 2]);
        assert_eq!(delta_cls(&t), vec![1.0, -1.0]);
    }

    #[test]
    fn sds_examples() {
        let t = terms2([1.5, -0.5], [0.25, 2.0], [9.0; 2], [9.0; 2], [0.75, 1.0]);
        assert_eq!(delta_sds(&t, 1.0), vec![1.5 - 0.75, -0.5 - 1.0]);
        let residual = terms2([1.5, -0.5], [0.25, 2.0], [0.0; 2], [0.0; 2], [0.25, 2.0]);
        let cls = delta_cls(&residual);
        assert_eq!(delta_sds(&residual, 7.0), vec![7.0 * cls[0], 7.0 * cls[1]]);
    }

    #[test]
    fn nfsd_gate() {
        let t = terms2([2.0, 1.0], [0.5, 0.5], [0.25, -1.0], [0.0; 2], [0.0; 2]);
        let s = 7.5;
        let late = delta_nfsd(&t, s, Timestep::new(0.5).unwrap(), 0.2);
        let cls = delta_cls(&t);
        assert_eq!(late, vec![s * cls[0] + 0.5, s * cls[1] + 0.5]);
        // gate boundary: t == gate_t is "off"
        assert_eq!(delta_nfsd(&t, s, Timestep::new(0.2).unwrap(), 0.2), late);

        let cancel = terms2([2.0, 1.0], [0.5, 0.5], [0.5, 0.5], [0.0; 2], [0.0; 2]);
        let early = delta_nfsd(&cancel, s, Timestep::new(0.1).unwrap(), 0.2);
        let cls = delta_cls(&cancel);
        assert_eq!(early, vec![s * cls[0], s * cls[1]]);
    }

    #[test]
    fn csd_examples() {
        let t = terms2([2.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0; 2], [0.0; 2]);
        assert_eq!(delta_csd(&t, 1.0, 1.0), vec![2.0, 0.0]);
        assert_eq!(delta_csd(&t, 3.0, 0.0), vec![3.0, 0.0]);
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_w2(0, 40.0, 500), 40.0);
        assert_eq!(anneal_w2(250, 40.0, 500), 20.0);
        assert_eq!(anneal_w2(500, 40.0, 500), 0.0);
        assert_eq!(anneal_w2(10_000, 40.0, 500), 0.0);
        assert_eq!(anneal_w2(0, 40.0, 0), 0.0);
    }

    #[test]
    fn bridge_and_fixed_a() {
        let t = terms2([1.0, 2.0], [0.3, 0.1], [0.0; 2], [1.0, 2.0], [0.0; 2]);
        assert_eq!(delta_bridge(&t, 25.0), vec![0.0, 0.0]);
        let t = terms2([1.0, 2.0], [0.3, 0.1], [0.0; 2], [0.5, -1.0], [0.0; 2]);
        assert_eq!(delta_fixed_a(&t, 0.0), delta_bridge(&t, 1.0));
    }

    #[test]
    fn fixed_a_direction_converges_to_cls() {
        let t = terms2([1.0, 2.0], [0.3, 0.1], [0.0; 2], [-0.5, 4.0], [0.0; 2]);
        let cls = delta_cls(&t);
        let mut last = -1.0;
        for a in [1.0, 10.0, 1e3, 1e6] {
            let cos = crate::vector::cosine(&delta_fixed_a(&t, a), &cls).unwrap();
            assert!(cos >= last);
            last = cos;
        }
        assert!(last > 1.0 - 1e-9);
    }

    #[test]
    fn post_examples() {
        let t = terms2([0.0; 2], [0.4, 0.2], [0.4, 0.2], [1.0, 1.0], [0.0; 2]);
        assert_eq!(delta_post(&t, PostKind::Gnp), vec![0.0, 0.0]);
        assert_eq!(delta_post(&t, PostKind::Tnp), vec![0.4 - 1.0, 0.2 - 1.0]);
    }

    #[test]
    fn objectives_coincide_when_null_equals_tnp() {
        let t = terms2([1.0, 2.0], [0.3, 0.1], [0.0; 2], [0.3, 0.1], [0.0; 2]);
        let (s, tx) = shape_texture_objectives(&t);
        assert_eq!(s, tx);
        let out = delta_tbsd_with_factor(&t, 1.0);
        assert!(out.mgda.degenerate);
        assert_eq!(out.combined, s);
    }

    #[test]
    fn factor_examples() {
        let s = FactorSchedule::new(5.0, 25_000.0, 2.0).unwrap();
        assert_eq!(factor(0, &s), 5.0);
        assert_eq!(factor(10_000, &s), 3.0);
        assert_eq!(factor(25_000, &s), 2.0);
        assert_eq!(factor(1_000_000, &s), 2.0);
        assert!(FactorSchedule::new(1.0, 10.0, 2.0).is_err());
        assert!(FactorSchedule::new(5.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn solve_mu_examples() {
        let r = solve_mu(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.mu, 0.5);
        assert_eq!(r.combined, vec![0.5, 0.5]);
        let (_, grid_mu) = grid_min(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((grid_mu - 0.5).abs() < 1e-9);

        let r = solve_mu(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.mu, 1.0);
        assert_eq!(r.combined, vec![0.0, 0.0]);
        assert_eq!(grid_min(&[0.0, 0.0], &[3.0, 4.0]).1, 1.0);

        let r = solve_mu(&[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_eq!(r.raw_mu, Some(2.0));
        assert_eq!(r.mu, 1.0);
        assert_eq!(r.combined, vec![1.0, 0.0]);
        assert_eq!(grid_min(&[1.0, 0.0], &[2.0, 0.0]).1, 1.0);

        let v = [0.3, -1.2, 7.0];
        let r = solve_mu(&v, &v).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.mu, 0.5);
        assert_eq!(r.raw_mu, None);
        assert_eq!(r.combined, v.to_vec());

        assert!(solve_mu(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cfg_form_examples() {
        let t = terms2([1.0, 2.0], [0.3, 0.1], [0.0; 2], [-0.5, 4.0], [0.0; 2]);
        let (_, delta_t) = shape_texture_objectives(&t);
        let at_zero = tbsd_cfg_form(&t, 0.0).unwrap();
        for (a, b) in at_zero.iter().zip(&delta_t) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(cfg_coefficient(0.9), 1.0 / (1.0 - 0.9));
        assert!((cfg_coefficient(0.9) - 10.0).abs() < 1e-14);
        assert!(matches!(tbsd_cfg_form(&t, 1.0), Err(Error::Domain(_))));
        assert!(tbsd_cfg_form(&t, -0.1).is_err());
    }

    #[test]
    fn rule_config_serde() {
        let r: RuleConfig = serde_json::from_str(r#"{"kind":"tbsd","alpha":5,"beta":2000,"gamma":2}"#).unwrap();
        assert_eq!(r, RuleConfig::preset(RuleKind::Tbsd, Preset::TwoD));
        let r: RuleConfig = serde_json::from_str(r#"{"kind":"nfsd","s":7.5}"#).unwrap();
        assert_eq!(r, RuleConfig::Nfsd { s: 7.5, gate_t: 0.2 });
        assert!(serde_json::from_str::<RuleConfig>(r#"{"kind":"sds","s":1,"extra":2}"#).is_err());
        assert!(serde_json::from_str::<RuleConfig>(r#"{"kind":"vsd"}"#).is_err());
        for kind in RuleKind::ALL {
            for preset in [Preset::TwoD, Preset::LongRun] {
                let cfg = RuleConfig::preset(kind, preset);
                cfg.validate().unwrap();
                let json = serde_json::to_string(&cfg).unwrap();
                assert_eq!(serde_json::from_str::<RuleConfig>(&json).unwrap(), cfg);
            }
        }
        assert!("fixed_a".parse::<RuleKind>().is_ok());
        assert!("vsd".parse::<RuleKind>().is_err());
    }

    #[test]
    fn rule_validation() {
        assert!(RuleConfig::Sds { s: 0.0 }.validate().is_err());
        assert!(RuleConfig::Nfsd { s: 1.0, gate_t: 1.0 }.validate().is_err());
        assert!(RuleConfig::Csd { w1: 1.0, w2_init: -1.0, anneal_steps: 0 }.validate().is_err());
        assert!(RuleConfig::FixedA { a: f64::NAN }.validate().is_err());
        assert!(RuleConfig::Tbsd { alpha: 1.0, beta: 1.0, gamma: 2.0 }.validate().is_err());
    }

    #[test]
    fn evaluate_dispatches_phases() {
        let t = terms2([1.0, 2.0], [0.3, 0.1], [0.2, 0.2], [-0.5, 4.0], [0.1, 0.1]);
        let tt = Timestep::new(0.5).unwrap();
        let bridge = RuleConfig::Bridge { w: 25.0, s: 40.0, sds_warmup_steps: 500 };
        let warm = bridge.evaluate(&t, 499, tt);
        assert_eq!(warm.phase, Phase::SdsWarmup);
        assert_eq!(warm.delta, delta_sds(&t, 40.0));
        let late = bridge.evaluate(&t, 500, tt);
        assert_eq!(late.phase, Phase::Bridge);
        assert_eq!(late.delta, delta_bridge(&t, 25.0));

        let csd = RuleConfig::preset(RuleKind::Csd, Preset::TwoD).evaluate(&t, 250, tt);
        assert_eq!(csd.w2, Some(20.0));
        assert_eq!(csd.delta, delta_csd(&t, 40.0, 20.0));

        let tb = RuleConfig::preset(RuleKind::Tbsd, Preset::TwoD).evaluate(&t, 0, tt);
        assert_eq!(tb.factor, Some(5.0));
        let mgda = tb.mgda.unwrap();
        assert_eq!(tb.delta, mgda.combined);
    }

    proptest! {
        #[test]
        fn min_norm_beats_grid(
            a in proptest::collection::vec(-2.0f64..2.0, 2..16),
            b_seed in proptest::collection::vec(-2.0f64..2.0, 16),
        ) {
            let b = &b_seed[..a.len()];
            let r = solve_mu(&a, b).unwrap();
            let (grid, grid_mu) = grid_min(&a, b);
            let n = norm_sq(&r.combined);
            prop_assert!(n <= grid + 1e-9);
            if !r.degenerate && grid_mu > 0.0 && grid_mu < 1.0 && norm_sq(&sub(b, &a)) > 1e-6 {
                prop_assert!((r.mu - grid_mu).abs() <= 1e-3, "closed {} grid {}", r.mu, grid_mu);
            }
            prop_assert!(n.sqrt() <= norm_sq(&a).sqrt() + 1e-12);
            prop_assert!(n.sqrt() <= norm_sq(b).sqrt() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.mu));
        }

        #[test]
        fn mu_is_scale_equivariant(
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 4),
            c in 1e-3f64..1e3,
        ) {
            let r1 = solve_mu(&a, &b).unwrap();
            let r2 = solve_mu(&crate::vector::scale(c, &a), &crate::vector::scale(c, &b)).unwrap();
            prop_assume!(!r1.degenerate && !r2.degenerate);
            prop_assert!((r1.mu - r2.mu).abs() <= 1e-12 * r1.mu.abs().max(1.0));
        }

        #[test]
        fn factor_is_monotone_with_floor(s1 in 0usize..60_000, s2 in 0usize..60_000) {
            let sched = FactorSchedule::new(5.0, 25_000.0, 2.0).unwrap();
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(factor(lo, &sched) >= factor(hi, &sched));
            prop_assert!(factor(hi, &sched) >= 2.0);
        }

        #[test]
        fn tbsd_combined_reevaluates(terms in arb_terms(5), step in 0usize..5000) {
            let sched = FactorSchedule::new(5.0, 2000.0, 2.0).unwrap();
            let out = delta_tbsd(&terms, step, &sched);
            let f = out.factor;
            let mu = out.mgda.mu;
            for i in 0..5 {
                let ds = terms.eps_tgt[i] - terms.eps_null[i];
                let dt = terms.eps_tgt[i] - terms.eps_tnp[i];
                let want = mu * ds + (1.0 - mu) * (f * dt);
                prop_assert!((out.combined[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn rules_match_reevaluation(terms in arb_terms(6), s in 0.5f64..100.0, w in 0.5f64..50.0) {
            let t01 = Timestep::new(0.1).unwrap();
            let nfsd = delta_nfsd(&terms, s, t01, 0.2);
            let csd = delta_csd(&terms, w, w);
            let fixed = delta_fixed_a(&terms, 1.0);
            let post = delta_post(&terms, PostKind::Tnp);
            for i in 0..6 {
                let (tg, nu, gn, tn, e) = (terms.eps_tgt[i], terms.eps_null[i], terms.eps_gnp[i], terms.eps_tnp[i], terms.eps[i]);
                let tol = |v: f64| 1e-12 * v.abs().max(1.0) * (s + w);
                prop_assert!((nfsd[i] - (s * tg - s * nu + nu - gn)).abs() <= tol(nfsd[i]));
                prop_assert!((csd[i] - (w * tg - w * gn)).abs() <= tol(csd[i]));
                prop_assert!((fixed[i] - (2.0 * tg - tn - nu)).abs() <= tol(fixed[i]));
                prop_assert_eq!(post[i], nu - tn);
                let _ = e;
            }
        }
    }
}
