use std::fs;

use distill_lab::harness::{load, persist, RunRecord, Metrics};
use distill_lab::optim::{run, Init, RunConfig, StepTrace, Weighting};
use distill_lab::rules::{Phase, Preset, RuleConfig, RuleKind};
use proptest::prelude::*;

fn float() -> impl Strategy<Value = f64> {
    prop_oneof![
        prop::num::f64::NORMAL,
        prop::num::f64::SUBNORMAL,
        prop::num::f64::ZERO,
        -10.0f64..10.0,
    ]
}

fn phase() -> impl Strategy<Value = Phase> {
    prop::sample::select(vec![
        Phase::Sds,
        Phase::Nfsd,
        Phase::Csd,
        Phase::SdsWarmup,
        Phase::Bridge,
        Phase::FixedA,
        Phase::Tbsd,
    ])
}

fn trace() -> impl Strategy<Value = StepTrace> {
    (
        any::<u32>(),
        (float(), phase(), float(), float(), float()),
        prop::option::of(float()),
        prop::option::of(0.0f64..=1.0),
        prop::option::of(float()),
        prop::option::of(any::<bool>()),
        prop::option::of(float()),
        prop::option::of(float()),
    )
        .prop_map(|(step, (t, phase, weight, dn, gn), cos_st, mu, raw_mu, degenerate, factor, w2)| StepTrace {
            step: step as usize,
            t,
            phase,
            weight,
            delta_norm: dn,
            grad_norm: gn,
            cos_st,
            mu,
            raw_mu,
            degenerate,
            factor,
            w2,
        })
}

fn record() -> impl Strategy<Value = RunRecord> {
    (
        any::<u64>(),
        prop::sample::select(RuleKind::ALL.to_vec()),
        prop::collection::vec(trace(), 0..20),
        prop::collection::vec(float(), 8),
        prop::collection::vec(float(), 8),
        prop::option::of((float(), float(), prop::option::of(float()))),
        float(),
        any::<bool>(),
    )
        .prop_map(|(seed, kind, traces, init, fin, summary, wall, sigma)| {
            let mut config = RunConfig::new(RuleConfig::preset(kind, Preset::LongRun), 1 + traces.len(), seed);
            config.label = Some(format!("rec-{seed}"));
            config.init = Init::Explicit { values: init.clone() };
            if sigma {
                config.weighting = Weighting::SigmaSquared;
            }
            RunRecord {
                config,
                seed,
                traces,
                initial_theta: init,
                final_theta: fin,
                summary: summary.map(|(s, tx, mu)| Metrics {
                    shape_error: s.abs(),
                    texture_error: tx.abs(),
                    final_mu_mean: mu,
                    final_factor: None,
                    positive_cos_fraction: Some(0.5),
                    final_grad_norm: 1.0,
                }),
                wall_clock_secs: wall.abs(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn persist_then_load_is_identity(rec in record()) {
        let dir = tempfile::tempdir().unwrap();
        persist(&rec, dir.path(), false).unwrap();
        let back = load(dir.path()).unwrap();
        prop_assert_eq!(back, rec);
    }
}

#[test]
fn real_run_round_trips() {
    let mut cfg = RunConfig::new(RuleConfig::preset(RuleKind::Tbsd, Preset::TwoD), 37, 5);
    cfg.record_every = 4;
    let rec = run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    persist(&rec, dir.path(), false).unwrap();
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 37usize.div_ceil(4));
    assert!(trace.lines().all(|l| l.starts_with("{\"schema_version\":\"1\"")));
    assert_eq!(load(dir.path()).unwrap(), rec);
}

#[test]
fn same_config_writes_identical_trace_files() {
    let cfg = RunConfig::new(RuleConfig::preset(RuleKind::Tbsd, Preset::TwoD), 200, 11);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    persist(&run(&cfg).unwrap(), a.path(), false).unwrap();
    persist(&run(&cfg).unwrap(), b.path(), false).unwrap();
    for f in ["trace.jsonl", "final_state.json", "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
