//! Canonical testbed, metrics, field scans, sweeps and run persistence.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Timestep};
use crate::error::{Error, Result};
use crate::optim::{self, RunConfig, SceneSpec, StepTrace};
use crate::oracle::{gather_terms, GaussianComponent, GaussianMixtureScene, ScoreOracle, Slot};
use crate::rules::{delta_bridge, delta_cls, delta_post, delta_tbsd_with_factor, PostKind};
use crate::vector::norm_over;

pub const CANONICAL_DIM: usize = 8;
pub const SHAPE_DIMS: [usize; 2] = [0, 1];
pub const TEXTURE_DIMS: [usize; 6] = [2, 3, 4, 5, 6, 7];
pub const TARGET_SHAPE: [f64; 2] = [2.0, 2.0];

pub const SCHEMA_VERSION: &str = "1";

/// Eight-dimensional scene: two shape dims where Target and TNP agree, six
/// texture dims where Target is bimodal at `±1` and TNP sits between the
/// modes.
pub fn build_canonical_testbed() -> GaussianMixtureScene {
    let with_texture = |tex: f64| {
        let mut m = vec![tex; CANONICAL_DIM];
        m[0] = TARGET_SHAPE[0];
        m[1] = TARGET_SHAPE[1];
        m
    };
    let mut gnp_var = vec![0.05; CANONICAL_DIM];
    gnp_var[0] = 4.0;
    gnp_var[1] = 4.0;
    let comp = GaussianComponent::isotropic;
    GaussianMixtureScene::new([
        (
            Slot::Target,
            vec![
                comp(0.5, with_texture(1.0), 0.05).unwrap(),
                comp(0.5, with_texture(-1.0), 0.05).unwrap(),
            ],
        ),
        (Slot::Null, vec![comp(1.0, vec![0.0; CANONICAL_DIM], 4.0).unwrap()]),
        (
            Slot::GeneralNegative,
            vec![GaussianComponent::new(1.0, vec![0.0; CANONICAL_DIM], gnp_var).unwrap()],
        ),
        (Slot::TargetNegative, vec![comp(1.0, with_texture(0.0), 0.05).unwrap()]),
    ])
    .expect("canonical testbed is valid")
}

/// Final-state quality on the canonical testbed. `shape_error` is a proxy
/// for shape distortion: distance of the shape dims from the target's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub shape_error: f64,
    pub texture_error: f64,
    /// Mean `mu` over the last tenth of recorded steps (TBSD only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_mu_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_factor: Option<f64>,
    /// Share of recorded steps with `cos(delta_s, delta_t) > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_cos_fraction: Option<f64>,
    pub final_grad_norm: f64,
}

/// Shape and texture errors of a rendered canonical-testbed state.
pub fn state_errors(x: &[f64]) -> Result<(f64, f64)> {
    crate::vector::check_dim(CANONICAL_DIM, x)?;
    let shape = SHAPE_DIMS
        .iter()
        .zip(TARGET_SHAPE)
        .map(|(&i, m)| (x[i] - m).powi(2))
        .sum::<f64>()
        .sqrt();
    let scene = build_canonical_testbed();
    let mut texture = f64::INFINITY;
    for c in scene.mixture(Slot::Target) {
        let d = TEXTURE_DIMS
            .iter()
            .map(|&i| (x[i] - c.mean[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        // strict: ties go to the first component
        if d < texture {
            texture = d;
        }
    }
    Ok((shape, texture))
}

/// Metrics for a record whose scene is `testbed`, which must be the
/// canonical testbed.
pub fn compute_metrics(record: &RunRecord, testbed: &GaussianMixtureScene) -> Result<Metrics> {
    let canonical = build_canonical_testbed();
    if *testbed != canonical {
        return Err(Error::Config("metrics are defined on the canonical testbed only".into()));
    }
    if record.config.scene.analytic_scene().as_ref() != Some(testbed) {
        return Err(Error::Config("record was not produced on the canonical testbed".into()));
    }
    let x = record.config.parameterization.render(&record.final_theta)?;
    let (shape_error, texture_error) = state_errors(&x)?;

    let traces = &record.traces;
    let tail = &traces[traces.len() - traces.len().div_ceil(10).min(traces.len())..];
    let mus: Vec<f64> = tail.iter().filter_map(|r| r.mu).collect();
    let final_mu_mean = (!mus.is_empty()).then(|| mus.iter().sum::<f64>() / mus.len() as f64);
    let cos: Vec<f64> = traces.iter().filter_map(|r| r.cos_st).collect();
    let positive_cos_fraction = (!cos.is_empty())
        .then(|| cos.iter().filter(|&&c| c > 0.0).count() as f64 / cos.len() as f64);
    Ok(Metrics {
        shape_error,
        texture_error,
        final_mu_mean,
        final_factor: traces.last().and_then(|r| r.factor),
        positive_cos_fraction,
        final_grad_norm: traces.last().map_or(0.0, |r| r.grad_norm),
    })
}

/// Metrics when the record's scene is canonical, otherwise `None`.
pub fn summarize(record: &RunRecord) -> Option<Metrics> {
    match record.config.scene {
        SceneSpec::Canonical => compute_metrics(record, &build_canonical_testbed()).ok(),
        _ => None,
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub seed: u64,
    pub traces: Vec<StepTrace>,
    pub initial_theta: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub summary: Option<Metrics>,
    pub wall_clock_secs: f64,
}

pub(crate) struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub(crate) fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub(crate) fn elapsed_secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

// ---------------------------------------------------------------------------
// Field scans

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Cls,
    PostGnp,
    PostTnp,
    Bridge,
    Tbsd,
}

impl FieldKind {
    pub const ALL: [FieldKind; 5] = [
        FieldKind::Cls,
        FieldKind::PostGnp,
        FieldKind::PostTnp,
        FieldKind::Bridge,
        FieldKind::Tbsd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Cls => "cls",
            FieldKind::PostGnp => "post_gnp",
            FieldKind::PostTnp => "post_tnp",
            FieldKind::Bridge => "bridge",
            FieldKind::Tbsd => "tbsd",
        }
    }
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FieldKind::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = FieldKind::ALL.iter().map(|f| f.as_str()).collect();
                Error::Config(format!("unknown field {s:?}; valid fields: {}", valid.join(", ")))
            })
    }
}

/// A 2-D slice of `x_t` space: dims `i`, `j` sweep `range` at `resolution`
/// points each, all other coordinates held at `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrid {
    pub dims: (usize, usize),
    pub range: (f64, f64),
    pub resolution: usize,
    pub anchor: Vec<f64>,
}

impl ScanGrid {
    pub fn validate(&self) -> Result<()> {
        let d = self.anchor.len();
        let (i, j) = self.dims;
        if i == j || i >= d || j >= d {
            return Err(Error::Config(format!(
                "scan dims ({i}, {j}) must be distinct and below {d}"
            )));
        }
        if self.resolution < 2 {
            return Err(Error::Config("scan resolution must be >= 2".into()));
        }
        let (lo, hi) = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("scan range ({lo}, {hi}) is not increasing")));
        }
        Ok(())
    }

    pub fn coordinate(&self, k: usize) -> f64 {
        let (lo, hi) = self.range;
        if k + 1 == self.resolution {
            hi
        } else {
            lo + (hi - lo) * k as f64 / (self.resolution - 1) as f64
        }
    }
}

/// Diffused mean of `slot` at `t`: the default scan anchor.
pub fn diffused_mean(scene: &GaussianMixtureScene, schedule: &NoiseSchedule, slot: Slot, t: Timestep) -> Vec<f64> {
    let s = schedule.alpha_bar(t).sqrt();
    scene.mean(slot).into_iter().map(|m| s * m).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldNode {
    pub u: f64,
    pub v: f64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldScan {
    pub field: FieldKind,
    pub t: f64,
    pub dims: (usize, usize),
    pub nodes: Vec<FieldNode>,
}

impl FieldScan {
    /// Mean over nodes of the vector's norm restricted to `dims`.
    pub fn mean_norm_over(&self, dims: &[usize]) -> f64 {
        let total: f64 = self
            .nodes
            .iter()
            .map(|n| norm_over(&n.vector, dims.iter().copied()))
            .sum();
        total / self.nodes.len() as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let dim = self.nodes.first().map_or(0, |n| n.vector.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["u".to_string(), "v".to_string()];
        header.extend((0..dim).map(|k| format!("vec_{k}")));
        let csv_err = |e: csv::Error| Error::Format {
            path: "field.csv".into(),
            message: e.to_string(),
        };
        w.write_record(&header).map_err(csv_err)?;
        for n in &self.nodes {
            let mut row = vec![n.u.to_string(), n.v.to_string()];
            row.extend(n.vector.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("field.csv", e))?;
        Ok(())
    }
}

/// Evaluates a guidance field on every node of `grid`. Bridge uses `w = 1`
/// and TBSD uses factor 1 so the scan shows the raw direction.
pub fn field_scan<O: ScoreOracle + ?Sized>(
    oracle: &O,
    t: Timestep,
    grid: &ScanGrid,
    field: FieldKind,
) -> Result<FieldScan> {
    grid.validate()?;
    let (i, j) = grid.dims;
    let zeros = vec![0.0; grid.anchor.len()];
    let mut nodes = Vec::with_capacity(grid.resolution * grid.resolution);
    for iu in 0..grid.resolution {
        for iv in 0..grid.resolution {
            let (u, v) = (grid.coordinate(iu), grid.coordinate(iv));
            let mut x = grid.anchor.clone();
            x[i] = u;
            x[j] = v;
            let terms = gather_terms(oracle, &x, t, &zeros)?;
            let vector = match field {
                FieldKind::Cls => delta_cls(&terms),
                FieldKind::PostGnp => delta_post(&terms, PostKind::Gnp),
                FieldKind::PostTnp => delta_post(&terms, PostKind::Tnp),
                FieldKind::Bridge => delta_bridge(&terms, 1.0),
                FieldKind::Tbsd => delta_tbsd_with_factor(&terms, 1.0).combined,
            };
            nodes.push(FieldNode { u, v, vector });
        }
    }
    Ok(FieldScan {
        field,
        t: t.value(),
        dims: grid.dims,
        nodes,
    })
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub config_index: usize,
    pub label: String,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
    /// The failure came from the score oracle.
    pub oracle_failure: bool,
}

impl SweepCell {
    pub fn metrics(&self) -> Option<&Metrics> {
        self.record.as_ref().and_then(|r| r.summary.as_ref())
    }
}

/// Mean and sample standard deviation of final metrics for one label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub shape_error_mean: f64,
    pub shape_error_std: f64,
    pub texture_error_mean: f64,
    pub texture_error_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_mu_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub cells: Vec<SweepCell>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SummaryTable {
    /// Groups in first-appearance order of their labels.
    pub fn groups(&self) -> Vec<GroupSummary> {
        let mut labels: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !labels.contains(&c.label.as_str()) {
                labels.push(&c.label);
            }
        }
        labels
            .into_iter()
            .map(|label| {
                let cells: Vec<&SweepCell> = self.cells.iter().filter(|c| c.label == label).collect();
                let ms: Vec<&Metrics> = cells.iter().filter_map(|c| c.metrics()).collect();
                let shape: Vec<f64> = ms.iter().map(|m| m.shape_error).collect();
                let tex: Vec<f64> = ms.iter().map(|m| m.texture_error).collect();
                let mus: Vec<f64> = ms.iter().filter_map(|m| m.final_mu_mean).collect();
                let (shape_error_mean, shape_error_std) = mean_std(&shape);
                let (texture_error_mean, texture_error_std) = mean_std(&tex);
                GroupSummary {
                    label: label.to_string(),
                    runs: cells.len(),
                    failures: cells.iter().filter(|c| c.error.is_some()).count(),
                    shape_error_mean,
                    shape_error_std,
                    texture_error_mean,
                    texture_error_std,
                    final_mu_mean: (!mus.is_empty()).then(|| mean_std(&mus).0),
                }
            })
            .collect()
    }

    pub fn group(&self, label: &str) -> Option<GroupSummary> {
        self.groups().into_iter().find(|g| g.label == label)
    }

    /// Columns: rule, seed, shape_error, texture_error, final_mu_mean, error.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Format {
            path: "summary_table.csv".into(),
            message: e.to_string(),
        };
        w.write_record(["rule", "seed", "shape_error", "texture_error", "final_mu_mean", "error"])
            .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            let m = c.metrics();
            w.write_record([
                c.label.clone(),
                c.seed.to_string(),
                opt(m.map(|m| m.shape_error)),
                opt(m.map(|m| m.texture_error)),
                opt(m.and_then(|m| m.final_mu_mean)),
                c.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("summary_table.csv", e))?;
        Ok(())
    }
}

/// Runs every `(config, seed)` pair on up to `jobs` threads (default: all
/// cores). Cells come back ordered by config index, then seed index; a
/// failing cell records its error and the sweep carries on.
pub fn sweep(configs: &[RunConfig], seeds: &[u64], jobs: Option<usize>) -> Result<SummaryTable> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one config and one seed".into()));
    }
    let pairs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run_cell = |&(ci, seed): &(usize, u64)| {
        let mut cfg = configs[ci].clone();
        cfg.seed = seed;
        let label = cfg.label();
        match optim::run(&cfg) {
            Ok(record) => SweepCell {
                config_index: ci,
                label,
                seed,
                record: Some(record),
                error: None,
                oracle_failure: false,
            },
            Err(e) => SweepCell {
                config_index: ci,
                label,
                seed,
                record: None,
                oracle_failure: e.is_oracle(),
                error: Some(e.to_string()),
            },
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = pool.install(|| pairs.par_iter().map(run_cell).collect());
    Ok(SummaryTable { cells })
}

// ---------------------------------------------------------------------------
// Persistence

pub const RUN_FILES: [&str; 4] = ["config.json", "trace.jsonl", "final_state.json", "summary.json"];

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    schema_version: String,
    config: RunConfig,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    schema_version: String,
    #[serde(flatten)]
    trace: StepTrace,
}

#[derive(Serialize, Deserialize)]
struct FinalStateFile {
    schema_version: String,
    seed: u64,
    initial_theta: Vec<f64>,
    final_theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    schema_version: String,
    wall_clock_secs: f64,
    metrics: Option<Metrics>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn check_version(path: &Path, found: &str) -> Result<()> {
    if found == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Format {
            path: path.into(),
            message: format!("schema version {found:?}, expected {SCHEMA_VERSION:?}"),
        })
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Writes the four run files into `dir`, creating it if needed. Existing run
/// files are only replaced when `overwrite` is set.
pub fn persist(record: &RunRecord, dir: &Path, overwrite: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !overwrite {
        for name in RUN_FILES {
            let p = dir.join(name);
            if p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::AlreadyExists, "run file already exists"),
                ));
            }
        }
    }
    let v = || SCHEMA_VERSION.to_string();
    write_json(
        &dir.join("config.json"),
        &ConfigFile {
            schema_version: v(),
            config: record.config.clone(),
        },
    )?;

    let path = dir.join("trace.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for trace in &record.traces {
        let line = TraceLine {
            schema_version: v(),
            trace: trace.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_json(
        &dir.join("final_state.json"),
        &FinalStateFile {
            schema_version: v(),
            seed: record.seed,
            initial_theta: record.initial_theta.clone(),
            final_theta: record.final_theta.clone(),
        },
    )?;
    write_json(
        &dir.join("summary.json"),
        &SummaryFile {
            schema_version: v(),
            wall_clock_secs: record.wall_clock_secs,
            metrics: record.summary.clone(),
        },
    )
}

pub fn load(dir: &Path) -> Result<RunRecord> {
    for name in RUN_FILES {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing {name}")),
            ));
        }
    }
    let path = dir.join("config.json");
    let cfg: ConfigFile = read_json(&path)?;
    check_version(&path, &cfg.schema_version)?;

    let path = dir.join("trace.jsonl");
    let mut traces = Vec::new();
    for (n, line) in BufReader::new(open(&path)?).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.clone(),
            message: format!("line {}: {e}", n + 1),
        })?;
        check_version(&path, &row.schema_version)?;
        traces.push(row.trace);
    }

    let path = dir.join("final_state.json");
    let state: FinalStateFile = read_json(&path)?;
    check_version(&path, &state.schema_version)?;
    let path = dir.join("summary.json");
    let summary: SummaryFile = read_json(&path)?;
    check_version(&path, &summary.schema_version)?;

    Ok(RunRecord {
        config: cfg.config,
        seed: state.seed,
        traces,
        initial_theta: state.initial_theta,
        final_theta: state.final_theta,
        summary: summary.metrics,
        wall_clock_secs: summary.wall_clock_secs,
    })
}
