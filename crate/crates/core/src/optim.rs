//! The outer distillation loop.
//!
//! Each step samples `(t, eps)`, noises the rendered state, queries all four
//! conditions at that one `x_t`, evaluates the configured rule and pulls the
//! direction back to parameter space for an AdamW update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise_with, sample_timestep, validate_range, NoiseSchedule, Timestep};
use crate::error::{Error, Result};
use crate::harness::{self, RunRecord};
use crate::oracle::remote::{Endpoint, RemoteOracle};
use crate::oracle::{gather_terms, AnalyticOracle, GaussianMixtureScene, PromptSet, ScoreOracle, Slot};
use crate::rules::{shape_texture_objectives, Phase, RuleConfig};
use crate::vector::{all_finite, check_dim, cosine, norm};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps parameters to the rendered state `x`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "ParamTable")]
pub enum Parameterization {
    /// `x = theta`.
    #[default]
    Identity,
    /// `x = matrix * theta + offset`, `matrix` given as `state_dim` rows of
    /// length `param_dim`.
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

// unit variants of internally tagged enums ignore extra keys, so decoding
// goes through brace variants
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ParamTable {
    Identity {},
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
}

impl From<ParamTable> for Parameterization {
    fn from(t: ParamTable) -> Self {
        match t {
            ParamTable::Identity {} => Parameterization::Identity,
            ParamTable::Affine { matrix, offset } => Parameterization::Affine { matrix, offset },
        }
    }
}

impl Parameterization {
    /// Checks shapes against the state dimension and returns `param_dim`.
    pub fn param_dim(&self, state_dim: usize) -> Result<usize> {
        match self {
            Parameterization::Identity => Ok(state_dim),
            Parameterization::Affine { matrix, offset } => {
                check_dim(state_dim, offset)?;
                if matrix.len() != state_dim {
                    return Err(Error::shape(state_dim, matrix.len()));
                }
                let cols = matrix.first().map_or(0, Vec::len);
                if cols == 0 {
                    return Err(Error::Config("affine matrix has no columns".into()));
                }
                for row in matrix {
                    check_dim(cols, row)?;
                }
                Ok(cols)
            }
        }
    }

    pub fn render(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            Parameterization::Identity => Ok(theta.to_vec()),
            Parameterization::Affine { matrix, offset } => {
                let cols = matrix.first().map_or(0, Vec::len);
                check_dim(cols, theta)?;
                Ok(matrix
                    .iter()
                    .zip(offset)
                    .map(|(row, o)| crate::vector::dot(row, theta) + o)
                    .collect())
            }
        }
    }

    /// `J^T v` for the render Jacobian `J`.
    pub fn pullback(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Parameterization::Identity => Ok(v.to_vec()),
            Parameterization::Affine { matrix, .. } => {
                check_dim(matrix.len(), v)?;
                let cols = matrix.first().map_or(0, Vec::len);
                let mut out = vec![0.0; cols];
                for (row, vi) in matrix.iter().zip(v) {
                    for (o, a) in out.iter_mut().zip(row) {
                        *o += a * vi;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Timestep weighting `w(t)` applied to every step's gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    SigmaSquared,
}

impl Weighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: Timestep) -> f64 {
        match self {
            Weighting::Constant => 1.0,
            Weighting::SigmaSquared => 1.0 - schedule.alpha_bar(t),
        }
    }
}

/// Initial parameters. `Gaussian` is centered on the null slot's mean for
/// identity parameterizations and on zero otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "InitTable")]
pub enum Init {
    Zeros,
    Gaussian { scale: f64 },
    Explicit { values: Vec<f64> },
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum InitTable {
    Zeros {},
    Gaussian { scale: f64 },
    Explicit { values: Vec<f64> },
}

impl From<InitTable> for Init {
    fn from(t: InitTable) -> Self {
        match t {
            InitTable::Zeros {} => Init::Zeros,
            InitTable::Gaussian { scale } => Init::Gaussian { scale },
            InitTable::Explicit { values } => Init::Explicit { values },
        }
    }
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian { scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, dim: usize) -> Self {
        OptimizerState {
            config,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step: 0,
        }
    }

    /// One update: decay `theta` by `lr * weight_decay`, then take the
    /// bias-corrected Adam step along `grad`.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim(self.first_moment.len(), theta)?;
        check_dim(theta.len(), grad)?;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            theta[i] *= 1.0 - lr * weight_decay;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Remote oracle endpoint plus the prompts it should condition on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteScene {
    pub endpoint: String,
    pub dim: usize,
    pub prompts: PromptSet,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

/// Where score predictions come from. Deserializes from the bare string
/// `"canonical"` or from a table tagged by `kind`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSpec {
    #[default]
    Canonical,
    Mixture { slots: GaussianMixtureScene },
    Remote(RemoteScene),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SceneTable {
    // braces so that extra keys are rejected
    Canonical {},
    Mixture { slots: GaussianMixtureScene },
    Remote(RemoteScene),
}

impl<'de> Deserialize<'de> for SceneSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::{self, MapAccess, Visitor};

        struct SceneVisitor;

        impl<'de> Visitor<'de> for SceneVisitor {
            type Value = SceneSpec;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"canonical\" or a scene table with a `kind` key")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<SceneSpec, E> {
                match v {
                    "canonical" => Ok(SceneSpec::Canonical),
                    other => Err(E::unknown_variant(other, &["canonical"])),
                }
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<SceneSpec, A::Error> {
                let table = SceneTable::deserialize(de::value::MapAccessDeserializer::new(map))?;
                Ok(match table {
                    SceneTable::Canonical {} => SceneSpec::Canonical,
                    SceneTable::Mixture { slots } => SceneSpec::Mixture { slots },
                    SceneTable::Remote(r) => SceneSpec::Remote(r),
                })
            }
        }

        d.deserialize_any(SceneVisitor)
    }
}

impl SceneSpec {
    /// The analytic scene, when this spec has one.
    pub fn analytic_scene(&self) -> Option<GaussianMixtureScene> {
        match self {
            SceneSpec::Canonical => Some(harness::build_canonical_testbed()),
            SceneSpec::Mixture { slots } => Some(slots.clone()),
            SceneSpec::Remote(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SceneSpec::Canonical => harness::CANONICAL_DIM,
            SceneSpec::Mixture { slots } => slots.dim(),
            SceneSpec::Remote(r) => r.dim,
        }
    }

    pub fn build_oracle(&self, schedule: &NoiseSchedule) -> Result<Box<dyn ScoreOracle + Send + Sync>> {
        match self {
            SceneSpec::Remote(r) => {
                let endpoint = Endpoint::parse(&r.endpoint)?;
                let timeout = r
                    .timeout_secs
                    .map_or(RemoteOracle::DEFAULT_TIMEOUT, std::time::Duration::from_secs);
                let oracle = RemoteOracle::connect_with_timeout(
                    &endpoint,
                    r.prompts.clone(),
                    Some(r.dim),
                    timeout,
                )?;
                Ok(Box::new(oracle))
            }
            other => {
                let scene = other.analytic_scene().expect("analytic");
                Ok(Box::new(AnalyticOracle::new(scene, schedule.clone())))
            }
        }
    }
}

fn default_range() -> (f64, f64) {
    (0.02, 0.98)
}

fn default_record_every() -> usize {
    1
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub rule: RuleConfig,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_range")]
    pub timestep_range: (f64, f64),
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub parameterization: Parameterization,
    #[serde(default)]
    pub init: Init,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

impl RunConfig {
    /// Canonical-testbed run with default settings.
    pub fn new(rule: RuleConfig, steps: usize, seed: u64) -> Self {
        RunConfig {
            label: None,
            rule,
            steps,
            seed,
            timestep_range: default_range(),
            weighting: Weighting::default(),
            scene: SceneSpec::Canonical,
            parameterization: Parameterization::Identity,
            init: Init::default(),
            record_every: 1,
            optimizer: AdamConfig::default(),
            schedule: NoiseSchedule::default(),
        }
    }

    /// Label used in sweep tables: the explicit label or the rule name.
    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.rule.kind().as_str().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        validate_range(self.timestep_range)?;
        let param_dim = self.parameterization.param_dim(self.scene.dim())?;
        match &self.init {
            Init::Explicit { values } => check_dim(param_dim, values)?,
            Init::Gaussian { scale } if !(scale.is_finite() && *scale >= 0.0) => {
                return Err(Error::Config(format!("init scale must be >= 0, got {scale}")))
            }
            _ => {}
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn initial_theta(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let param_dim = self.parameterization.param_dim(self.scene.dim())?;
        Ok(match &self.init {
            Init::Zeros => vec![0.0; param_dim],
            Init::Explicit { values } => values.clone(),
            Init::Gaussian { scale } => {
                let center = match (&self.parameterization, self.scene.analytic_scene()) {
                    (Parameterization::Identity, Some(scene)) => scene.mean(Slot::Null),
                    _ => vec![0.0; param_dim],
                };
                center
                    .into_iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(rng);
                        c + scale * z
                    })
                    .collect()
            }
        })
    }
}

/// Diagnostics for one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub t: f64,
    pub phase: Phase,
    pub weight: f64,
    pub delta_norm: f64,
    pub grad_norm: f64,
    /// Cosine between the shape (`tgt - null`) and texture (`tgt - tnp`)
    /// objectives; absent when either is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cos_st: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
}

/// One distillation step at iteration `step`, updating `theta` and `opt`
/// in place.
pub fn distill_step<O: ScoreOracle + ?Sized>(
    config: &RunConfig,
    oracle: &O,
    theta: &mut [f64],
    opt: &mut OptimizerState,
    rng: &mut Rng,
    step: usize,
) -> Result<StepTrace> {
    if !all_finite(theta) {
        return Err(Error::Domain(format!("theta is not finite at step {step}")));
    }
    let schedule = &config.schedule;
    let t = sample_timestep(rng, config.timestep_range)?;
    let x = config.parameterization.render(theta)?;
    let eps: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let alpha_bar = schedule.alpha_bar(t);
    let x_t = add_noise_with(alpha_bar, &x, &eps);

    let terms = gather_terms(oracle, &x_t, t, &eps)?;
    terms.validate()?;
    let out = config.rule.evaluate(&terms, step, t);

    let weight = config.weighting.weight(schedule, t);
    let mut grad = config.parameterization.pullback(&out.delta)?;
    for g in &mut grad {
        *g *= weight;
    }
    if !all_finite(&out.delta) || !all_finite(&grad) {
        return Err(Error::NonFinite {
            step,
            dump: format!(
                "t={}, |x_t|={}, |eps_tgt|={}, |eps_null|={}, |eps_gnp|={}, |eps_tnp|={}, delta={:?}",
                t.value(),
                norm(&x_t),
                norm(&terms.eps_tgt),
                norm(&terms.eps_null),
                norm(&terms.eps_gnp),
                norm(&terms.eps_tnp),
                out.delta
            ),
        });
    }
    opt.update(theta, &grad)?;

    let (delta_s, delta_t) = shape_texture_objectives(&terms);
    Ok(StepTrace {
        step,
        t: t.value(),
        phase: out.phase,
        weight,
        delta_norm: norm(&out.delta),
        grad_norm: norm(&grad),
        cos_st: cosine(&delta_s, &delta_t),
        mu: out.mgda.as_ref().map(|m| m.mu),
        raw_mu: out.mgda.as_ref().and_then(|m| m.raw_mu),
        degenerate: out.mgda.as_ref().map(|m| m.degenerate),
        factor: out.factor,
        w2: out.w2,
    })
}

/// Builds the configured oracle and runs to completion.
pub fn run(config: &RunConfig) -> Result<RunRecord> {
    config.validate()?;
    let oracle = config.scene.build_oracle(&config.schedule)?;
    run_with_oracle(config, &*oracle)
}

pub fn run_with_oracle<O: ScoreOracle + ?Sized>(config: &RunConfig, oracle: &O) -> Result<RunRecord> {
    config.validate()?;
    let timer = harness::Stopwatch::start();
    let mut rng = seeded_rng(config.seed);
    let initial_theta = config.initial_theta(&mut rng)?;
    let mut theta = initial_theta.clone();
    let mut opt = OptimizerState::new(config.optimizer, theta.len());
    let mut traces = Vec::with_capacity(config.steps.div_ceil(config.record_every));
    for step in 0..config.steps {
        let trace = distill_step(config, oracle, &mut theta, &mut opt, &mut rng, step).map_err(|e| {
            Error::Step {
                step,
                source: Box::new(e),
            }
        })?;
        if step % config.record_every == 0 {
            traces.push(trace);
        }
    }
    let mut record = RunRecord {
        config: config.clone(),
        seed: config.seed,
        traces,
        initial_theta,
        final_theta: theta,
        summary: None,
        wall_clock_secs: 0.0,
    };
    record.summary = harness::summarize(&record);
    record.wall_clock_secs = timer.elapsed_secs();
    Ok(record)
}
