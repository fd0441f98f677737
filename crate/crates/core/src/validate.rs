//! Built-in self-checks: analytic score vs finite differences, the closed-form
//! mu vs a grid search, and the algebraic identities between rule forms.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::diffusion::{NoiseSchedule, Timestep};
use crate::optim::{seeded_rng, Rng};
use crate::oracle::mixture::{log_density, marginal_at};
use crate::oracle::{AnalyticOracle, GaussianComponent, GaussianMixtureScene, ScoreOracle, Slot};
use crate::rules::{
    delta_bridge, delta_sds, delta_tbsd_with_factor, solve_mu, tbsd_cfg_form, GuidanceTerms,
};
use crate::vector::{lincomb, norm, norm_sq, sub};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<16} max_err={:.3e} tol={:.1e} trials={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.trials
        )
    }
}

fn report(name: &'static str, max_error: f64, tolerance: f64, trials: usize) -> CheckReport {
    CheckReport {
        name,
        passed: max_error <= tolerance,
        max_error,
        tolerance,
        trials,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Test hook: shifts the solver's mu by 1e-2 before it is checked.
    pub inject_mu_fault: bool,
}

pub fn gaussian_vec(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn random_terms(rng: &mut Rng, dim: usize) -> GuidanceTerms {
    GuidanceTerms {
        eps_tgt: gaussian_vec(rng, dim, 1.0),
        eps_null: gaussian_vec(rng, dim, 1.0),
        eps_gnp: gaussian_vec(rng, dim, 1.0),
        eps_tnp: gaussian_vec(rng, dim, 1.0),
        eps: gaussian_vec(rng, dim, 1.0),
    }
}

/// Random diagonal mixture with 1 to 3 components, shared by all slots.
pub fn random_scene(rng: &mut Rng, dim: usize) -> GaussianMixtureScene {
    let k = rng.random_range(1..=3);
    let comps = (0..k)
        .map(|_| {
            let mean = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let var = (0..dim).map(|_| rng.random_range(0.05..2.0)).collect();
            GaussianComponent::new(rng.random_range(0.2..1.0), mean, var).unwrap()
        })
        .collect();
    GaussianMixtureScene::uniform(comps).unwrap()
}

/// Spacing between adjacent doubles at magnitude `x`.
pub fn ulp(x: f64) -> f64 {
    let a = x.abs();
    if a == 0.0 {
        return f64::from_bits(1);
    }
    f64::from_bits(a.to_bits() + 1) - a
}

/// Five-point central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let at = |p: &mut Vec<f64>, d: f64| {
                p[i] = x[i] + d;
                f(p)
            };
            let g = (-at(&mut p, 2.0 * h) + 8.0 * at(&mut p, h) - 8.0 * at(&mut p, -h) + at(&mut p, -2.0 * h))
                / (12.0 * h);
            p[i] = x[i];
            g
        })
        .collect()
}

/// Analytic noise prediction vs `-sigma * grad log p_t` by finite differences.
pub fn check_fd_score(rng: &mut Rng, trials: usize) -> CheckReport {
    let schedule = NoiseSchedule::default();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let dim = rng.random_range(1..=6);
        let scene = random_scene(rng, dim);
        let t = Timestep::new(rng.random_range(0.02..0.98)).unwrap();
        let marginal = marginal_at(scene.mixture(Slot::Target), t, &schedule);
        let c = &marginal[rng.random_range(0..marginal.len())];
        let x: Vec<f64> = c
            .mean
            .iter()
            .zip(&c.variance)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + 1.5 * v.sqrt() * z
            })
            .collect();
        let min_sd = marginal
            .iter()
            .flat_map(|c| c.variance.iter())
            .fold(f64::INFINITY, |a, &v| a.min(v.sqrt()));
        let fd = fd_gradient(|p| log_density(&marginal, p), &x, 1e-3 * min_sd);
        let sigma = schedule.sigma(t);
        let want: Vec<f64> = fd.iter().map(|g| -sigma * g).collect();
        let oracle = AnalyticOracle::new(scene, schedule.clone());
        let got = oracle.predict_noise(&x, t, Slot::Target).unwrap();
        let err = norm(&sub(&got, &want)) / norm(&want).max(1e-12);
        worst = worst.max(err);
    }
    report("fd_score", worst, 1e-5, trials)
}

/// Minimizes `|mu a + (1 - mu) b|^2` over a uniform mu grid with spacing
/// `step`, using the expansion in dot products.
pub fn grid_min(a: &[f64], b: &[f64], step: f64) -> (f64, f64) {
    let aa = norm_sq(a);
    let bb = norm_sq(b);
    let ab = crate::vector::dot(a, b);
    let n = (1.0 / step).round() as usize;
    let mut best = (0.0, f64::INFINITY);
    for k in 0..=n {
        let mu = k as f64 / n as f64;
        let val = mu * mu * aa + 2.0 * mu * (1.0 - mu) * ab + (1.0 - mu) * (1.0 - mu) * bb;
        if val < best.1 {
            best = (mu, val);
        }
    }
    best
}

pub fn check_mu_grid(rng: &mut Rng, trials: usize, inject_fault: bool) -> CheckReport {
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let dim = if k % 2 == 0 { 2 } else { 16 };
        let a = gaussian_vec(rng, dim, 1.0);
        let b = gaussian_vec(rng, dim, 1.0);
        let res = solve_mu(&a, &b).unwrap();
        let mu = if inject_fault { (res.mu + 1e-2).min(1.0) } else { res.mu };
        let (grid_mu, grid_val) = grid_min(&a, &b, 1e-4);
        let interior = res.raw_mu.is_some_and(|r| r > 1e-3 && r < 1.0 - 1e-3);
        if interior {
            worst = worst.max((mu - grid_mu).abs());
        }
        let closed_val = norm_sq(&lincomb(mu, &a, 1.0 - mu, &b));
        // objective excess over the grid optimum, scaled to the tolerance
        let excess = (closed_val - grid_val).max(0.0) / (1.0 + grid_val);
        worst = worst.max(excess * 1e6);
    }
    report("mu_vs_grid", worst, 1e-3, trials)
}

/// Largest componentwise gap between `a` and `b` in ulps of `scale[i]`.
pub fn max_ulps(a: &[f64], b: &[f64], scale: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scale)
        .map(|((x, y), s)| (x - y).abs() / ulp(*s))
        .fold(0.0, f64::max)
}

pub fn check_bridge_identity(rng: &mut Rng, trials: usize) -> CheckReport {
    let w = 25.0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let terms = random_terms(rng, 8);
        let direct = delta_bridge(&terms, w);
        let n = terms.dim();
        let expanded: Vec<f64> = (0..n)
            .map(|i| {
                w * (terms.eps_tgt[i] - terms.eps_null[i]) + w * (terms.eps_null[i] - terms.eps_tnp[i])
            })
            .collect();
        // largest intermediate: either partial product of the expansion
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let shape = w * (terms.eps_tgt[i] - terms.eps_null[i]);
                let rest = w * (terms.eps_null[i] - terms.eps_tnp[i]);
                shape.abs().max(rest.abs()).max(direct[i].abs())
            })
            .collect();
        worst = worst.max(max_ulps(&direct, &expanded, &scale));
    }
    report("bridge_identity", worst, 4.0, trials)
}

pub fn check_sds_telescoping(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let terms = random_terms(rng, 8);
        let got = delta_sds(&terms, 1.0);
        let want = sub(&terms.eps_tgt, &terms.eps);
        let scale: Vec<f64> = (0..terms.dim())
            .map(|i| {
                let a = terms.eps_null[i] - terms.eps[i];
                let b = terms.eps_tgt[i] - terms.eps_null[i];
                a.abs().max(b.abs()).max(want[i].abs())
            })
            .collect();
        worst = worst.max(max_ulps(&got, &want, &scale));
    }
    report("sds_telescoping", worst, 4.0, trials)
}

pub fn check_cfg_form(rng: &mut Rng, trials: usize) -> CheckReport {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < trials {
        let terms = random_terms(rng, 8);
        let out = delta_tbsd_with_factor(&terms, 1.0);
        let mu = out.mgda.mu;
        let Ok(cfg) = tbsd_cfg_form(&terms, mu) else {
            // mu == 1 has no CFG form
            continue;
        };
        let want: Vec<f64> = out.combined.iter().map(|c| c / (1.0 - mu)).collect();
        worst = worst.max(norm(&sub(&cfg, &want)) / norm(&want).max(f64::MIN_POSITIVE));
        done += 1;
    }
    report("cfg_form", worst, 1e-12, trials)
}

/// Runs every check with its own RNG stream derived from `opts.seed`.
pub fn run_all(opts: ValidateOptions) -> Vec<CheckReport> {
    let rng = |k: u64| seeded_rng(opts.seed.wrapping_mul(31).wrapping_add(k));
    vec![
        check_fd_score(&mut rng(1), 100),
        check_mu_grid(&mut rng(2), 200, opts.inject_mu_fault),
        check_bridge_identity(&mut rng(3), 1000),
        check_sds_telescoping(&mut rng(4), 1000),
        check_cfg_form(&mut rng(5), 1000),
    ]
}
