use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cso::error::Error;
use cso::prm::{remote_score, RemoteOptions, RemoteScorer, ScoreSource, StepScorer};
use cso::rng::{stream, Purpose};
use cso::world::{self, WorldConfig, WorldState};

/// One scripted reply: status, body and a delay before answering.
#[derive(Clone)]
struct Reply {
    status: u16,
    body: &'static str,
    delay: Duration,
}

fn ok(body: &'static str) -> Reply {
    Reply { status: 200, body, delay: Duration::ZERO }
}

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<String>>>,
}

fn read_request(stream: &mut TcpStream) -> String {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    String::from_utf8(body).unwrap()
}

/// Serve `script` in order, one connection per reply; the last reply repeats.
fn serve(script: Vec<Reply>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/score", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&requests);
    thread::spawn(move || {
        for (i, conn) in listener.incoming().enumerate() {
            let Ok(mut stream) = conn else { break };
            let body = read_request(&mut stream);
            seen.lock().unwrap().push(body);
            let r = script[i.min(script.len() - 1)].clone();
            thread::sleep(r.delay);
            let reason = if r.status == 200 { "OK" } else { "Error" };
            let resp = format!(
                "HTTP/1.1 {} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                r.status,
                r.body.len(),
                r.body
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    Stub { url, requests }
}

fn fast() -> RemoteOptions {
    RemoteOptions { timeout: Duration::from_millis(500), retry_budget: 3, backoff: Duration::from_millis(5), ..Default::default() }
}

#[test]
fn valid_reply_is_returned_and_request_carries_payload() {
    let stub = serve(vec![ok(r#"{"score": 0.72}"#)]);
    let reply = remote_score(&stub.url, "state text", "invoke(tool1, arg2)", &fast()).unwrap();
    assert_eq!(reply.score.value, 0.72);
    assert_eq!(reply.score.source, ScoreSource::Remote);
    assert_eq!((reply.attempts, reply.clamped_from), (1, None));
    let req: serde_json::Value = serde_json::from_str(&stub.requests.lock().unwrap()[0]).unwrap();
    assert_eq!(req["state"], "state text");
    assert_eq!(req["action"], "invoke(tool1, arg2)");
    assert!(req["rubric_prompt"].as_str().unwrap().contains("35"));
}

#[test]
fn out_of_range_score_is_clamped() {
    let stub = serve(vec![ok(r#"{"score": 1.7}"#)]);
    let reply = remote_score(&stub.url, "s", "a", &fast()).unwrap();
    assert_eq!(reply.score.value, 1.0);
    assert_eq!(reply.clamped_from, Some(1.7));
}

#[test]
fn server_errors_are_retried() {
    let err = Reply { status: 503, body: "{}", delay: Duration::ZERO };
    let stub = serve(vec![err.clone(), err, ok(r#"{"score": 0.4}"#)]);
    let reply = remote_score(&stub.url, "s", "a", &fast()).unwrap();
    assert_eq!(reply.attempts, 3);
    assert_eq!(reply.score.value, 0.4);
}

#[test]
fn exhausted_budget_reports_failure() {
    let stub = serve(vec![Reply { status: 500, body: "{}", delay: Duration::ZERO }]);
    let e = remote_score(&stub.url, "s", "a", &fast()).unwrap_err();
    assert!(matches!(e, Error::RemoteFailed { attempts: 3, .. }), "{e}");
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[test]
fn slow_server_times_out() {
    let stub = serve(vec![Reply { status: 200, body: r#"{"score": 0.5}"#, delay: Duration::from_millis(400) }]);
    let opts = RemoteOptions { timeout: Duration::from_millis(100), retry_budget: 2, ..fast() };
    let e = remote_score(&stub.url, "s", "a", &opts).unwrap_err();
    assert!(matches!(e, Error::RemoteTimeout { attempts: 2 }), "{e}");
}

#[test]
fn malformed_reply_fails_without_retry() {
    for body in [r#"{"value": 0.5}"#, "not json", r#"{"score": "high"}"#] {
        let stub = serve(vec![ok(body)]);
        let e = remote_score(&stub.url, "s", "a", &fast()).unwrap_err();
        assert!(matches!(e, Error::MalformedResponse(_)), "{body}: {e}");
        assert_eq!(stub.requests.lock().unwrap().len(), 1);
    }
}

#[test]
fn empty_renderings_are_rejected() {
    assert!(matches!(remote_score("http://127.0.0.1:9/", "", "a", &fast()), Err(Error::InvalidArgument(_))));
}

#[test]
fn scorer_renders_state_with_window() {
    let stub = serve(vec![ok(r#"{"score": 0.9}"#)]);
    let task = &world::generate_tasks(1, [0.0, 1.0, 0.0], &WorldConfig::default(), 3).unwrap()[0];
    let mut s = WorldState::initial(task);
    for _ in 0..3 {
        s = world::transition(task, &s, world::oracle_action(task, &s)).unwrap().1;
    }
    let scorer = RemoteScorer::new(stub.url.clone(), fast(), Some(1), 2);
    let mut r = stream(0, Purpose::PrmPolicy, &[]);
    let v = scorer.score(task, &s, world::oracle_action(task, &s), &mut r).unwrap();
    assert_eq!(v.value, 0.9);
    let req: serde_json::Value = serde_json::from_str(&stub.requests.lock().unwrap()[0]).unwrap();
    assert_eq!(req["state"], s.context(task).render(Some(1)));
}
