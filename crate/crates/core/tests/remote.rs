//! Remote client against an in-process HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dle_core::dle::{enumerate, BranchPolicy, Budget, EarlyStopConfig};
use dle_core::model::{LanguageModel, ModelError, RemoteClient, RemoteConfig, RemoteErrorKind};
use dle_core::truncation::TruncationRule;
use serde_json::{json, Value};

struct Request {
    headers: Vec<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Request) -> (u16, String, Duration) + Send + Sync;

struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Request>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut headers = Vec::new();
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().ok()?;
        }
        headers.push(line);
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        headers,
        body: serde_json::from_slice(&body).ok()?,
    })
}

fn serve(handler: Arc<Handler>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (handler, h, s) = (handler.clone(), h.clone(), s.clone());
            thread::spawn(move || {
                let Some(req) = read_request(&mut stream) else { return };
                let n = h.fetch_add(1, Ordering::SeqCst);
                let (status, body, delay) = handler(n, &req);
                s.lock().unwrap().push(req);
                thread::sleep(delay);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    Stub { url, hits, seen }
}

fn top_logprobs(pairs: &[(&str, f64)]) -> String {
    let map: serde_json::Map<String, Value> = pairs.iter().map(|(t, lp)| (t.to_string(), json!(lp))).collect();
    json!({"choices": [{"text": pairs[0].0, "logprobs": {"top_logprobs": [map]}}]}).to_string()
}

fn fast_config(url: &str) -> RemoteConfig {
    let mut c = RemoteConfig::new(url);
    c.initial_backoff = Duration::from_millis(1);
    c.timeout = Duration::from_secs(5);
    c
}

#[test]
fn renormalizes_top_logprobs_and_sends_expected_request() {
    let stub = serve(Arc::new(|_, _| (200, top_logprobs(&[("x", -0.5), (" y", -1.5)]), Duration::ZERO)));
    let mut config = fast_config(&stub.url);
    config.api_key = Some("secret".into());
    let client = RemoteClient::new(config, 5).unwrap();
    let prompt = LanguageModel::<f64>::tokenize(&client, "hello world").unwrap();
    let d = LanguageModel::<f64>::next_distribution(&client, &prompt, &[]).unwrap();

    let x = LanguageModel::<f64>::tokenize(&client, "x").unwrap()[0];
    let (ex, ey) = ((-0.5f64).exp(), (-1.5f64).exp());
    assert!((d.prob(x) - ex / (ex + ey)).abs() < 1e-12);
    assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((client.min_raw_mass() - (ex + ey)).abs() < 1e-12);

    let seen = stub.seen.lock().unwrap();
    let req = &seen[0];
    assert_eq!(req.body["prompt"], "hello world");
    assert_eq!(req.body["max_tokens"], 1);
    assert_eq!(req.body["logprobs"], 5);
    assert!(req.headers.iter().any(|h| h == "Authorization: Bearer secret" || h == "authorization: Bearer secret"));
}

#[test]
fn top_one_is_a_point_mass() {
    let stub = serve(Arc::new(|_, _| (200, top_logprobs(&[("x", -0.5), ("y", -1.5)]), Duration::ZERO)));
    let client = RemoteClient::new(fast_config(&stub.url), 1).unwrap();
    let d = LanguageModel::<f64>::next_distribution(&client, &[], &[]).unwrap();
    let x = LanguageModel::<f64>::tokenize(&client, "x").unwrap()[0];
    assert_eq!(d.prob(x), 1.0);
}

#[test]
fn retries_transient_status_then_succeeds() {
    let stub = serve(Arc::new(|n, _| {
        if n < 2 {
            (503, "busy".into(), Duration::ZERO)
        } else {
            (200, top_logprobs(&[("z", -0.1)]), Duration::ZERO)
        }
    }));
    let client = RemoteClient::new(fast_config(&stub.url), 3).unwrap();
    assert!(LanguageModel::<f64>::next_distribution(&client, &[], &[]).is_ok());
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_configured_retries() {
    let stub = serve(Arc::new(|_, _| (503, "busy".into(), Duration::ZERO)));
    let mut config = fast_config(&stub.url);
    config.max_retries = 2;
    let client = RemoteClient::new(config, 3).unwrap();
    match client.remote_next_distribution::<f64>(&[], &[]) {
        Err(e) => {
            assert_eq!(e.kind, RemoteErrorKind::Status(503));
            assert_eq!(e.attempts, 3);
        }
        Ok(_) => panic!("expected failure"),
    }
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = serve(Arc::new(|_, _| (400, "bad".into(), Duration::ZERO)));
    let client = RemoteClient::new(fast_config(&stub.url), 3).unwrap();
    let err = LanguageModel::<f64>::next_distribution(&client, &[], &[]).unwrap_err();
    assert!(matches!(err, ModelError::Remote(ref e) if e.kind == RemoteErrorKind::Status(400)));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn timeout_after_retries() {
    let stub = serve(Arc::new(|_, _| (200, top_logprobs(&[("x", -0.1)]), Duration::from_millis(600))));
    let mut config = fast_config(&stub.url);
    config.timeout = Duration::from_millis(100);
    config.max_retries = 1;
    let client = RemoteClient::new(config, 3).unwrap();
    match client.remote_next_distribution::<f64>(&[], &[]) {
        Err(e) => {
            assert_eq!(e.kind, RemoteErrorKind::Timeout);
            assert_eq!(e.attempts, 2);
        }
        Ok(_) => panic!("expected timeout"),
    }
}

#[test]
fn enumeration_over_http() {
    // prompt text -> top logprobs; the eos string ends a completion
    let stub = serve(Arc::new(|_, req| {
        let body = match req.body["prompt"].as_str().unwrap() {
            "Q:" => top_logprobs(&[(" yes", (0.6f64).ln()), (" no", (0.4f64).ln())]),
            _ => top_logprobs(&[("<|endoftext|>", -1e-6)]),
        };
        (200, body, Duration::ZERO)
    }));
    let client = RemoteClient::new(fast_config(&stub.url), 4).unwrap();
    let prompt = LanguageModel::<f64>::tokenize(&client, "Q:").unwrap();
    let rule = TruncationRule::<f64>::TopK(2);
    let r = enumerate(&client, &rule, &prompt, BranchPolicy::ProbFirst, Budget::leaves(4), EarlyStopConfig::disabled()).unwrap();
    let texts: Vec<String> = r.leaves.iter().map(|l| LanguageModel::<f64>::detokenize(&client, &l.tokens)).collect();
    assert_eq!(texts, vec![" yes", " no"]);
    assert!((r.leaves[0].q() - 0.6).abs() < 1e-9);
    assert!(r.frontier_exhausted);
}
