use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use distill_lab::harness::{self, diffused_mean, field_scan, FieldKind, ScanGrid, RUN_FILES};
use distill_lab::oracle::remote::{serve_connection, serve_listener};
use distill_lab::optim::{self, SceneSpec};
use distill_lab::rules::RuleKind;
use distill_lab::validate::{self, ValidateOptions};
use distill_lab::{AnalyticOracle, Error, Metrics, Slot, Timestep};
use serde::Serialize;

mod config;

use config::{load_config, CliConfig};

/// Score-distillation laboratory.
#[derive(Parser)]
#[command(name = "distill-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write its run directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (defaults to [output].directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Run every (rule, seed) pair and write summary_table.csv.
    Sweep {
        config: PathBuf,
        /// Comma-separated rule names.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        rules: Vec<String>,
        /// Comma-separated seeds or ranges such as 0-9.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Run the built-in numerical self-checks.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Evaluate a guidance field on a 2-D slice and write field.csv.
    FieldScan {
        config: PathBuf,
        /// One of cls, post_gnp, post_tnp, bridge, tbsd.
        #[arg(long)]
        field: String,
        #[arg(long)]
        t: f64,
        /// The two swept dimensions, e.g. 2,3.
        #[arg(long)]
        dims: String,
        #[arg(long, default_value_t = 21)]
        res: usize,
        /// Coordinate range for both axes, e.g. -3,3.
        #[arg(long, default_value = "-3,3", allow_hyphen_values = true)]
        range: String,
        /// Comma-separated anchor point (default: diffused target mean).
        #[arg(long, allow_hyphen_values = true)]
        anchor: Option<String>,
        /// Output file or directory (field.csv is written inside a directory).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Serve the config's analytic scene over the oracle wire protocol.
    Serve {
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7070", conflicts_with = "stdio")]
        listen: String,
        /// Answer on stdin/stdout instead of a socket.
        #[arg(long)]
        stdio: bool,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_oracle() {
            3
        } else {
            match e.root() {
                Error::Config(_) | Error::Format { .. } | Error::Shape { .. } | Error::Condition(_) => 2,
                Error::Io { source, .. } if source.kind() == io::ErrorKind::AlreadyExists => 2,
                _ => 1,
            }
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<u8, Failure>;

fn load(path: &Path) -> Result<CliConfig, Failure> {
    match load_config(path) {
        Ok(c) => Ok(c),
        // an unreadable config is a usage problem
        Err(e @ Error::Io { .. }) => Err(Failure::usage(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &CliConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| cfg.output.directory.clone())
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set [output].directory"))
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), Failure> {
    let occupied = if path.is_dir() {
        fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(Failure::usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunLine<'a> {
    label: String,
    rule: &'a str,
    seed: u64,
    steps: usize,
    out: String,
    wall_clock_secs: f64,
    #[serde(flatten)]
    metrics: Option<&'a Metrics>,
}

fn cmd_run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, force: bool) -> CmdResult {
    let file = load(&config)?;
    let mut cfg = file.to_run_config(None)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir(out, &file)?;
    if !force && RUN_FILES.iter().any(|f| dir.join(f).exists()) {
        return Err(Failure::usage(format!(
            "{} already holds a run; pass --force to overwrite",
            dir.display()
        )));
    }
    let record = optim::run(&cfg)?;
    harness::persist(&record, &dir, force)?;
    let line = RunLine {
        label: cfg.label(),
        rule: cfg.rule.kind().as_str(),
        seed: cfg.seed,
        steps: cfg.steps,
        out: dir.display().to_string(),
        wall_clock_secs: record.wall_clock_secs,
        metrics: record.summary.as_ref(),
    };
    println!("{}", serde_json::to_string(&line).expect("summary serializes"));
    Ok(0)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::usage(format!("bad --seeds `{text}`: use e.g. 0,1,2 or 0-9"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn cmd_sweep(
    config: PathBuf,
    rules: Vec<String>,
    seeds: String,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    force: bool,
) -> CmdResult {
    let file = load(&config)?;
    let rules: Vec<&str> = rules.iter().map(|r| r.trim()).filter(|r| !r.is_empty()).collect();
    if rules.is_empty() {
        return Err(Failure::usage("--rules needs at least one rule name"));
    }
    let seeds = parse_seeds(&seeds)?;
    let mut configs = Vec::new();
    for name in &rules {
        let kind: RuleKind = name.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
        let mut cfg = file.to_run_config(Some(file.rule_for(kind)))?;
        cfg.label = None;
        configs.push(cfg);
    }
    let dir = output_dir(out, &file)?;
    refuse_overwrite(&dir, force)?;
    fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::Io { path: dir.clone(), source: e }))?;

    let table = harness::sweep(&configs, &seeds, jobs)?;
    for cell in &table.cells {
        if let Some(rec) = &cell.record {
            harness::persist(rec, &dir.join(format!("{}_seed{}", cell.label, cell.seed)), force)?;
        }
    }
    let csv_path = dir.join("summary_table.csv");
    let file_out = fs::File::create(&csv_path).map_err(|e| Failure::from(Error::Io { path: csv_path.clone(), source: e }))?;
    table.write_csv(io::BufWriter::new(file_out))?;
    for g in table.groups() {
        println!("{}", serde_json::to_string(&g).expect("group serializes"));
    }
    let ok = table.cells.iter().filter(|c| c.error.is_none()).count();
    for c in table.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("{} seed {}: {}", c.label, c.seed, c.error.as_deref().unwrap_or_default());
    }
    if ok > 0 {
        Ok(0)
    } else {
        Err(Failure {
            code: if table.cells.iter().any(|c| c.oracle_failure) { 3 } else { 1 },
            message: "every sweep cell failed".into(),
        })
    }
}

fn cmd_validate(seed: u64, inject_fault: Option<String>) -> CmdResult {
    let inject_mu_fault = match inject_fault.as_deref() {
        None => false,
        Some("mu") => true,
        Some(other) => return Err(Failure::usage(format!("unknown fault `{other}`"))),
    };
    let reports = validate::run_all(ValidateOptions { seed, inject_mu_fault });
    for r in &reports {
        println!("{r}");
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}

fn parse_floats(flag: &str, s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("bad --{flag} `{s}`: expected comma-separated numbers")))
}

#[allow(clippy::too_many_arguments)]
fn cmd_field_scan(
    config: PathBuf,
    field: String,
    t: f64,
    dims: String,
    res: usize,
    range: String,
    anchor: Option<String>,
    out: PathBuf,
    force: bool,
) -> CmdResult {
    let field: FieldKind = field.parse().map_err(|e: Error| Failure::usage(e.to_string()))?;
    let t = Timestep::new(t).map_err(|e| Failure::usage(e.to_string()))?;
    let d: Vec<usize> = dims
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("bad --dims `{dims}`: expected i,j")))?;
    let [i, j] = d[..] else {
        return Err(Failure::usage(format!("bad --dims `{dims}`: expected exactly two dims")));
    };
    let r = parse_floats("range", &range)?;
    let [lo, hi] = r[..] else {
        return Err(Failure::usage("--range needs two numbers"));
    };
    let file = load(&config)?;
    let scene = file.scene.clone().unwrap_or_default();
    let schedule = file.schedule.clone().unwrap_or_default();
    let anchor = match anchor {
        Some(a) => parse_floats("anchor", &a)?,
        None => match scene.analytic_scene() {
            Some(s) => diffused_mean(&s, &schedule, Slot::Target, t),
            None => return Err(Failure::usage("remote scenes need an explicit --anchor")),
        },
    };
    if anchor.len() != scene.dim() {
        return Err(Failure::usage(format!(
            "anchor has {} entries, scene dim is {}",
            anchor.len(),
            scene.dim()
        )));
    }
    let grid = ScanGrid {
        dims: (i, j),
        range: (lo, hi),
        resolution: res,
        anchor,
    };
    grid.validate()?;
    let path = if out.extension().is_some_and(|e| e == "csv") {
        out
    } else {
        out.join("field.csv")
    };
    refuse_overwrite(&path, force)?;
    let oracle = scene.build_oracle(&schedule)?;
    let scan = field_scan(&*oracle, t, &grid, field)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::from(Error::Io { path: parent.into(), source: e }))?;
    }
    let f = fs::File::create(&path).map_err(|e| Failure::from(Error::Io { path: path.clone(), source: e }))?;
    scan.write_csv(io::BufWriter::new(f))?;
    eprintln!("wrote {} ({} nodes)", path.display(), scan.nodes.len());
    Ok(0)
}

fn cmd_serve(config: Option<PathBuf>, listen: String, stdio: bool) -> CmdResult {
    let (scene, schedule) = match &config {
        Some(p) => {
            let f = load(p)?;
            (f.scene.unwrap_or_default(), f.schedule.unwrap_or_default())
        }
        None => (SceneSpec::Canonical, Default::default()),
    };
    let scene = scene
        .analytic_scene()
        .ok_or_else(|| Failure::usage("serve needs an analytic scene (canonical or mixture)"))?;
    let oracle = Arc::new(AnalyticOracle::new(scene, schedule));
    let io_fail = |e: io::Error| Failure {
        code: 1,
        message: e.to_string(),
    };
    if stdio {
        let stdin = io::stdin();
        serve_connection(&*oracle, BufReader::new(stdin.lock()), io::stdout().lock()).map_err(io_fail)?;
        return Ok(0);
    }
    let listener = TcpListener::bind(&listen).map_err(io_fail)?;
    eprintln!("listening on {}", listener.local_addr().map_err(io_fail)?);
    let _ = io::stderr().flush();
    serve_listener(oracle, listener).map_err(io_fail)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            force,
        } => cmd_run(config, seed, out, force),
        Command::Sweep {
            config,
            rules,
            seeds,
            out,
            jobs,
            force,
        } => cmd_sweep(config, rules, seeds, out, jobs, force),
        Command::Validate { seed, inject_fault } => cmd_validate(seed, inject_fault),
        Command::FieldScan {
            config,
            field,
            t,
            dims,
            res,
            range,
            anchor,
            out,
            force,
        } => cmd_field_scan(config, field, t, dims, res, range, anchor, out, force),
        Command::Serve { config, listen, stdio } => cmd_serve(config, listen, stdio),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
