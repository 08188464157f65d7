use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use riskloom_core::gateway::{ChatExchange, ChatGateway, GatewayErrorKind, HttpConfig, HttpGateway};
use riskloom_core::scoring::{
    DecisionPolicy, Lexicon, RemoteScorer, RiskScorer, ScoreError, ScoringClient,
};
use riskloom_core::stream::{run_stream, StreamSimulator};

#[derive(Clone)]
struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn reply(status: u16, body: &str) -> Reply {
    Reply {
        status,
        body: body.to_string(),
        delay: Duration::ZERO,
    }
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

struct Request {
    head: String,
    body: serde_json::Value,
}

/// Answers each connection with the next scripted reply; the last reply
/// repeats once the script runs out.
struct Server {
    url: String,
    requests: Arc<Mutex<Vec<Request>>>,
    peak: Arc<AtomicUsize>,
}

fn serve(script: Vec<Reply>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let peak = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let (req_log, peak_c) = (requests.clone(), peak.clone());
    thread::spawn(move || {
        let script = Arc::new(script);
        let next = Arc::new(AtomicUsize::new(0));
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let i = next.fetch_add(1, Ordering::SeqCst);
            let r = script[i.min(script.len() - 1)].clone();
            let (req_log, peak, active) = (req_log.clone(), peak_c.clone(), active.clone());
            thread::spawn(move || {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                handle(stream, &r, &req_log);
                active.fetch_sub(1, Ordering::SeqCst);
            });
        }
    });
    Server { url, requests, peak }
}

fn handle(stream: TcpStream, r: &Reply, log: &Mutex<Vec<Request>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut head = String::new();
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if line == "\r\n" {
            break;
        }
        head.push_str(&line);
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    log.lock().unwrap().push(Request {
        head,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    });
    thread::sleep(r.delay);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        r.status,
        r.body.len(),
        r.body
    );
}

fn gateway(url: &str, f: impl FnOnce(&mut HttpConfig)) -> HttpGateway {
    let mut cfg = HttpConfig::new(url);
    cfg.backoff_base = Duration::from_millis(5);
    f(&mut cfg);
    HttpGateway::new(cfg)
}

fn exchange() -> ChatExchange {
    ChatExchange::new("You are helpful.", "Say hi.")
}

#[test]
fn passes_fixture_text_through() {
    let s = serve(vec![reply(200, &completion("fixture text"))]);
    let gw = gateway(&s.url, |c| c.api_key = Some("k123".into()));
    let out = gw.complete(&exchange()).unwrap();
    assert_eq!(out.text, "fixture text");
    assert_eq!(out.retries, 0);
    let reqs = s.requests.lock().unwrap();
    assert!(reqs[0].head.starts_with("POST /chat/completions "));
    assert!(reqs[0].head.to_lowercase().contains("authorization: bearer k123"));
    assert_eq!(reqs[0].body["model"], riskloom_core::gateway::DEFAULT_MODEL);
    assert_eq!(reqs[0].body["messages"][0]["role"], "system");
    assert_eq!(reqs[0].body["messages"][1]["content"], "Say hi.");
}

#[test]
fn unauthorized_is_auth_failure_without_retry() {
    let s = serve(vec![reply(401, "{}")]);
    let err = gateway(&s.url, |_| {}).complete(&exchange()).unwrap_err();
    assert_eq!(err.kind, GatewayErrorKind::AuthFailure);
    assert_eq!(err.retries, 0);
    assert_eq!(s.requests.lock().unwrap().len(), 1);
}

#[test]
fn two_transient_failures_then_success() {
    let s = serve(vec![reply(503, "{}"), reply(502, "{}"), reply(200, &completion("ok"))]);
    let out = gateway(&s.url, |c| c.max_retries = 3).complete(&exchange()).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(out.retries, 2);
    assert_eq!(s.requests.lock().unwrap().len(), 3);
}

#[test]
fn rate_limit_exhausts_retry_cap() {
    let s = serve(vec![reply(429, "{}")]);
    let err = gateway(&s.url, |c| c.max_retries = 2).complete(&exchange()).unwrap_err();
    assert_eq!(err.kind, GatewayErrorKind::RateLimited);
    assert_eq!(err.retries, 2);
    assert_eq!(s.requests.lock().unwrap().len(), 3);
}

#[test]
fn slow_service_times_out() {
    let s = serve(vec![Reply {
        delay: Duration::from_millis(1500),
        ..reply(200, &completion("late"))
    }]);
    let gw = gateway(&s.url, |c| {
        c.timeout = Duration::from_millis(200);
        c.max_retries = 0;
    });
    let err = gw.complete(&exchange()).unwrap_err();
    assert_eq!(err.kind, GatewayErrorKind::Timeout, "{err}");
}

#[test]
fn empty_content_is_bad_response_not_empty_text() {
    for body in [completion(""), r#"{"choices": []}"#.to_string(), "not json".to_string()] {
        let s = serve(vec![reply(200, &body)]);
        let err = gateway(&s.url, |_| {}).complete(&exchange()).unwrap_err();
        assert_eq!(err.kind, GatewayErrorKind::BadResponse, "{body}");
    }
}

#[test]
fn refused_connection_is_transport() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = gateway(&url, |c| c.max_retries = 1).complete(&exchange()).unwrap_err();
    assert_eq!(err.kind, GatewayErrorKind::Transport);
    assert_eq!(err.retries, 1);
}

#[test]
fn in_flight_limit_is_respected() {
    let s = serve(vec![Reply {
        delay: Duration::from_millis(50),
        ..reply(200, &completion("ok"))
    }]);
    let gw = Arc::new(gateway(&s.url, |c| c.max_in_flight = 2));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let gw = gw.clone();
            thread::spawn(move || gw.complete(&exchange()).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(s.peak.load(Ordering::SeqCst) <= 2);
    assert_eq!(s.requests.lock().unwrap().len(), 8);
}

#[test]
fn remote_scorer_clamps_and_posts_text() {
    let s = serve(vec![reply(200, r#"{"score": 1.7}"#), reply(200, r#"{"score": -0.2}"#)]);
    let scorer = RemoteScorer::new(s.url.clone(), Duration::from_secs(5), 4);
    assert_eq!(scorer.score("[MSG] [USER] TARGET hi").unwrap(), 1.0);
    assert_eq!(scorer.score("x").unwrap(), 0.0);
    assert_eq!(s.requests.lock().unwrap()[0].body["text"], "[MSG] [USER] TARGET hi");
}

#[test]
fn remote_scorer_errors_are_typed() {
    let s = serve(vec![reply(500, "{}")]);
    let scorer = RemoteScorer::new(s.url.clone(), Duration::from_secs(5), 1);
    assert!(matches!(scorer.score("x"), Err(ScoreError::BadResponse { .. })));

    let s = serve(vec![reply(200, r#"{"value": 0.3}"#)]);
    let scorer = RemoteScorer::new(s.url.clone(), Duration::from_secs(5), 1);
    assert!(matches!(scorer.score("x"), Err(ScoreError::BadResponse { .. })));

    let s = serve(vec![Reply {
        delay: Duration::from_millis(1500),
        ..reply(200, r#"{"score": 0.5}"#)
    }]);
    let scorer = RemoteScorer::new(s.url.clone(), Duration::from_millis(200), 1);
    assert!(matches!(scorer.score("x"), Err(ScoreError::Timeout { .. })));
}

#[test]
fn stream_run_against_remote_scorer_with_fallback() {
    let s = serve(vec![reply(200, r#"{"score": 0.8}"#), reply(503, "{}")]);
    let remote = RemoteScorer::new(s.url.clone(), Duration::from_secs(5), 1);
    let lexicon = Lexicon::new([("hopeless".to_string(), 2.0)]).unwrap();
    let mut client = ScoringClient::new(Box::new(remote), DecisionPolicy::default())
        .with_fallback(Box::new(lexicon));
    let mut sim = StreamSimulator::new([
        ("a".to_string(), vec!["[MSG] [USER] TARGET fine".to_string(), "[MSG] [USER] TARGET hopeless".to_string()]),
    ])
    .unwrap();
    let log = run_stream(&mut sim, &mut client).unwrap();
    let scores: Vec<f64> = log.records().iter().map(|r| r.score).collect();
    assert_eq!(scores[0], 0.8);
    assert!((scores[1] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(log.first_positive()["a"], Some(1));
}
