//! Browser bindings for the demo page. Every export returns a JSON string;
//! the `*_json` functions hold the logic so they can be tested natively.

use distill_lab::harness::{
    build_canonical_testbed, diffused_mean, field_scan, FieldKind, ScanGrid, SHAPE_DIMS, TEXTURE_DIMS,
};
use distill_lab::optim::run;
use distill_lab::rules::{factor, solve_mu};
use distill_lab::{AnalyticOracle, FactorSchedule, NoiseSchedule, RuleConfig, RunConfig, Slot, Timestep};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Longest run the explorer will start.
const MAX_EXPLORER_STEPS: usize = 5000;

fn norm_over(v: &[f64], dims: &[usize]) -> f64 {
    dims.iter().map(|&d| v[d] * v[d]).sum::<f64>().sqrt()
}

/// Scan `field` on the canonical scene around the diffused Target mean.
pub fn field_scan_json(
    field: &str,
    t: f64,
    dim_u: usize,
    dim_v: usize,
    resolution: usize,
    lo: f64,
    hi: f64,
) -> Result<String, String> {
    let kind: FieldKind = field.parse().map_err(|e: distill_lab::Error| e.to_string())?;
    let t = Timestep::new(t).map_err(|e| e.to_string())?;
    let scene = build_canonical_testbed();
    let schedule = NoiseSchedule::default();
    let grid = ScanGrid {
        dims: (dim_u, dim_v),
        range: (lo, hi),
        resolution,
        anchor: diffused_mean(&scene, &schedule, Slot::Target, t),
    };
    grid.validate().map_err(|e| e.to_string())?;
    let oracle = AnalyticOracle::new(scene, schedule);
    let scan = field_scan(&oracle, t, &grid, kind).map_err(|e| e.to_string())?;
    let nodes: Vec<_> = scan
        .nodes
        .iter()
        .map(|n| {
            json!({
                "u": n.u,
                "v": n.v,
                "du": n.vector[dim_u],
                "dv": n.vector[dim_v],
                "shape": norm_over(&n.vector, &SHAPE_DIMS),
                "texture": norm_over(&n.vector, &TEXTURE_DIMS),
            })
        })
        .collect();
    Ok(json!({ "field": kind.as_str(), "t": t.value(), "nodes": nodes }).to_string())
}

/// Min-norm weighting between a shape and a (scaled) texture direction.
pub fn solve_mu_json(delta_s: &[f64], delta_td: &[f64]) -> Result<String, String> {
    let r = solve_mu(delta_s, delta_td).map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

/// `samples` evenly spaced points of the factor schedule over `steps`.
pub fn factor_curve_json(alpha: f64, beta: f64, gamma: f64, steps: usize, samples: usize) -> Result<String, String> {
    let sched = FactorSchedule::new(alpha, beta, gamma).map_err(|e| e.to_string())?;
    let samples = samples.max(2);
    let points: Vec<_> = (0..samples)
        .map(|i| {
            let step = i * steps / (samples - 1);
            json!([step, factor(step, &sched)])
        })
        .collect();
    Ok(json!({ "points": points }).to_string())
}

/// A short TBSD run on the canonical scene: per-step μ and factor plus
/// final metrics.
pub fn tbsd_run_json(alpha: f64, beta: f64, gamma: f64, steps: usize, seed: u64) -> Result<String, String> {
    if steps == 0 || steps > MAX_EXPLORER_STEPS {
        return Err(format!("steps must be in 1..={MAX_EXPLORER_STEPS}"));
    }
    let rule = RuleConfig::Tbsd { alpha, beta, gamma };
    let cfg = RunConfig::new(rule, steps, seed);
    let record = run(&cfg).map_err(|e| e.to_string())?;
    let mu: Vec<Option<f64>> = record.traces.iter().map(|tr| tr.mu).collect();
    let fac: Vec<Option<f64>> = record.traces.iter().map(|tr| tr.factor).collect();
    Ok(json!({
        "mu": mu,
        "factor": fac,
        "metrics": record.summary,
        "final_theta": record.final_theta,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn scan(field: &str, t: f64, dim_u: usize, dim_v: usize, resolution: usize, lo: f64, hi: f64) -> Result<String, JsError> {
    field_scan_json(field, t, dim_u, dim_v, resolution, lo, hi).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn min_norm(delta_s: Vec<f64>, delta_td: Vec<f64>) -> Result<String, JsError> {
    solve_mu_json(&delta_s, &delta_td).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn factor_curve(alpha: f64, beta: f64, gamma: f64, steps: usize, samples: usize) -> Result<String, JsError> {
    factor_curve_json(alpha, beta, gamma, steps, samples).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tbsd_run(alpha: f64, beta: f64, gamma: f64, steps: usize, seed: u64) -> Result<String, JsError> {
    tbsd_run_json(alpha, beta, gamma, steps, seed).map_err(|e| JsError::new(&e))
}
