use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use distill_lab::harness::build_canonical_testbed;
use distill_lab::optim::{run, run_with_oracle, RemoteScene, RunConfig, SceneSpec};
use distill_lab::oracle::remote::{serve_connection, serve_listener, Endpoint, OracleRequest, OracleResponse, RemoteOracle};
use distill_lab::oracle::PromptSet;
use distill_lab::rules::{Preset, RuleConfig, RuleKind};
use distill_lab::{AnalyticOracle, Error, NoiseSchedule, ScoreOracle, Slot, Timestep};

fn analytic() -> AnalyticOracle {
    AnalyticOracle::new(build_canonical_testbed(), NoiseSchedule::default())
}

fn spawn_analytic_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let oracle = Arc::new(analytic());
    thread::spawn(move || serve_listener(oracle, listener));
    addr
}

/// Serves one connection with a custom responder that sees each batch of
/// `batch` requests at once.
fn spawn_custom<F>(batch: usize, respond: F) -> String
where
    F: Fn(Vec<OracleRequest>) -> Vec<String> + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        loop {
            let mut reqs = Vec::new();
            for _ in 0..batch {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    return;
                }
                reqs.push(serde_json::from_str(&line).unwrap());
            }
            for line in respond(reqs) {
                if writer.write_all(format!("{line}\n").as_bytes()).is_err() {
                    return;
                }
            }
        }
    });
    addr
}

fn connect(addr: &str, dim: Option<usize>) -> RemoteOracle {
    RemoteOracle::connect(&Endpoint::Tcp(addr.into()), PromptSet::new("a red apple"), dim).unwrap()
}

fn probe_point() -> (Vec<f64>, Timestep) {
    (vec![0.3, -1.2, 0.7, 0.1, -0.4, 2.2, 1e-300, -3.5], Timestep::new(0.37).unwrap())
}

#[test]
fn remote_predictions_are_bit_identical() {
    let addr = spawn_analytic_server();
    let remote = connect(&addr, Some(8));
    remote.healthcheck().unwrap();
    let (x, t) = probe_point();
    let local = analytic();
    let got = remote.predict_slots(&x, t, &Slot::ALL).unwrap();
    for (slot, g) in Slot::ALL.iter().zip(&got) {
        assert_eq!(g, &local.predict_noise(&x, t, *slot).unwrap());
    }
}

#[test]
fn remote_run_matches_analytic_run() {
    let addr = spawn_analytic_server();
    let rule = RuleConfig::preset(RuleKind::Tbsd, Preset::TwoD);
    let local = run(&RunConfig::new(rule, 60, 2)).unwrap();
    let mut cfg = RunConfig::new(rule, 60, 2);
    cfg.scene = SceneSpec::Remote(RemoteScene {
        endpoint: format!("tcp://{addr}"),
        dim: 8,
        prompts: PromptSet::new("a red apple"),
        timeout_secs: Some(10),
    });
    let remote = run(&cfg).unwrap();
    assert_eq!(local.initial_theta, remote.initial_theta);
    assert_eq!(local.traces, remote.traces);
    assert_eq!(local.final_theta, remote.final_theta);
    assert!(remote.summary.is_none());
}

#[test]
fn out_of_order_responses_are_matched_by_id() {
    let addr = spawn_custom(4, |reqs| {
        let oracle = analytic();
        reqs.into_iter()
            .rev()
            .map(|r| {
                let eps = oracle.predict_noise(&r.x_t, Timestep::new(r.t).unwrap(), r.slot).unwrap();
                serde_json::to_string(&OracleResponse::Eps { id: r.id, eps }).unwrap()
            })
            .collect()
    });
    let remote = connect(&addr, Some(8));
    let (x, t) = probe_point();
    let got = remote.predict_slots(&x, t, &Slot::ALL).unwrap();
    let local = analytic();
    for (slot, g) in Slot::ALL.iter().zip(&got) {
        assert_eq!(g, &local.predict_noise(&x, t, *slot).unwrap());
    }
}

#[test]
fn requests_carry_slot_text() {
    let (tx, rx) = std::sync::mpsc::channel();
    let addr = spawn_custom(4, move |reqs| {
        tx.send(reqs.clone()).unwrap();
        reqs.into_iter()
            .map(|r| {
                let eps = vec![0.0; r.x_t.len()];
                serde_json::to_string(&OracleResponse::Eps { id: r.id, eps }).unwrap()
            })
            .collect()
    });
    let remote = connect(&addr, None);
    let (x, t) = probe_point();
    remote.predict_slots(&x, t, &Slot::ALL).unwrap();
    let reqs = rx.recv().unwrap();
    let texts: Vec<&str> = reqs.iter().map(|r| r.text.as_str()).collect();
    let frag = distill_lab::oracle::DEFAULT_NEGATIVE_FRAGMENT;
    assert_eq!(texts[0], "a red apple");
    assert_eq!(texts[1], "");
    assert_eq!(texts[2], frag);
    assert_eq!(texts[3], format!("a red apple, {frag}"));
    assert!(reqs.iter().all(|r| r.t == 0.37 && r.x_t == x));
}

#[test]
fn error_response_names_the_slot() {
    let addr = spawn_custom(4, |reqs| {
        reqs.into_iter()
            .map(|r| {
                if r.slot == Slot::TargetNegative {
                    serde_json::to_string(&OracleResponse::Error { id: r.id, error: "boom".into() }).unwrap()
                } else {
                    serde_json::to_string(&OracleResponse::Eps { id: r.id, eps: vec![0.0; 8] }).unwrap()
                }
            })
            .collect()
    });
    let remote = connect(&addr, Some(8));
    let (x, t) = probe_point();
    match remote.predict_slots(&x, t, &Slot::ALL) {
        Err(Error::Oracle { slot, message }) => {
            assert_eq!(slot, Slot::TargetNegative);
            assert!(message.contains("boom"));
        }
        other => panic!("expected oracle error, got {other:?}"),
    }
}

#[test]
fn dim_mismatch_is_an_oracle_error() {
    let addr = spawn_custom(4, |reqs| {
        reqs.into_iter()
            .map(|r| serde_json::to_string(&OracleResponse::Eps { id: r.id, eps: vec![0.0; 3] }).unwrap())
            .collect()
    });
    let remote = connect(&addr, Some(8));
    let (x, t) = probe_point();
    let err = remote.predict_slots(&x, t, &Slot::ALL).unwrap_err();
    assert!(err.is_oracle(), "{err}");
}

#[test]
fn server_closing_mid_batch_fails_cleanly() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut line = String::new();
        BufReader::new(&stream).read_line(&mut line).unwrap();
        drop(stream);
    });
    let remote = connect(&addr, Some(8));
    let (x, t) = probe_point();
    assert!(remote.predict_slots(&x, t, &Slot::ALL).unwrap_err().is_oracle());
}

#[test]
fn dead_endpoint_is_an_oracle_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut cfg = RunConfig::new(RuleConfig::Sds { s: 100.0 }, 5, 0);
    cfg.scene = SceneSpec::Remote(RemoteScene {
        endpoint: format!("127.0.0.1:{port}"),
        dim: 8,
        prompts: PromptSet::new("x"),
        timeout_secs: Some(2),
    });
    let err = run(&cfg).unwrap_err();
    assert!(err.is_oracle(), "{err}");
}

#[test]
fn run_errors_wrap_the_failing_step() {
    let addr = spawn_custom(4, |reqs| {
        reqs.into_iter()
            .map(|r| serde_json::to_string(&OracleResponse::Error { id: r.id, error: "down".into() }).unwrap())
            .collect()
    });
    let remote = connect(&addr, Some(8));
    let cfg = RunConfig::new(RuleConfig::Sds { s: 100.0 }, 5, 0);
    let err = run_with_oracle(&cfg, &remote).unwrap_err();
    assert!(matches!(err, Error::Step { step: 0, .. }));
    assert!(err.is_oracle());
}

#[test]
fn server_answers_probes_and_malformed_lines() {
    let input = concat!(
        r#"{"id":"p","x_t":[],"t":0.5,"slot":"null","text":""}"#,
        "\n",
        r#"{"id":"bad","x_t":[1.0],"t":0.5,"slot":"nope","text":""}"#,
        "\n",
        "not json\n",
        r#"{"id":"late","x_t":[0.0,0.0,0.0,0.0,0.0,0.0,0.0,0.0],"t":1.5,"slot":"target","text":""}"#,
        "\n",
    );
    let mut out = Vec::new();
    serve_connection(&analytic(), input.as_bytes(), &mut out).unwrap();
    let lines: Vec<OracleResponse> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0], OracleResponse::Eps { id: "p".into(), eps: vec![] });
    assert!(matches!(&lines[1], OracleResponse::Error { id, .. } if id == "bad"));
    assert!(matches!(&lines[2], OracleResponse::Error { id, .. } if id.is_empty()));
    assert!(matches!(&lines[3], OracleResponse::Error { id, .. } if id == "late"));
}

#[test]
fn healthcheck_over_raw_socket() {
    let addr = spawn_analytic_server();
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(b"{\"id\":\"h\",\"x_t\":[],\"t\":0.5,\"slot\":\"target\",\"text\":\"\"}\n")
        .unwrap();
    let mut line = String::new();
    BufReader::new(&s).read_line(&mut line).unwrap();
    assert_eq!(line.trim(), r#"{"id":"h","eps":[]}"#);
}
