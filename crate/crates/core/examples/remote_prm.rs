//! Score a step through the remote PRM protocol against a local stub
//! server that answers every request with a fixed score.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use cso::error::Result;
use cso::prm::{RemoteOptions, RemoteScorer, StepScorer};
use cso::rng::{stream, Purpose};
use cso::world::{self, WorldConfig, WorldState};

fn stub() -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let url = format!("http://{}/score", listener.local_addr()?);
    std::thread::spawn(move || {
        for mut conn in listener.incoming().flatten() {
            let mut reader = BufReader::new(conn.try_clone().expect("clone"));
            let mut len = 0;
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap_or(0) > 0 && line != "\r\n" {
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                line.clear();
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            println!("stub received: {}", String::from_utf8_lossy(&body).chars().take(120).collect::<String>());
            let reply = r#"{"score": 0.8}"#;
            let _ = write!(conn, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}", reply.len());
        }
    });
    Ok(url)
}

fn main() -> Result<()> {
    let url = stub()?;
    let task = &world::generate_tasks(1, [1.0, 0.0, 0.0], &WorldConfig::default(), 1)?[0];
    let s = WorldState::initial(task);
    let options = RemoteOptions { timeout: Duration::from_secs(2), ..Default::default() };
    let scorer = RemoteScorer::new(url, options, None, 4);
    let mut rng = stream(0, Purpose::PrmPolicy, &[]);
    let score = scorer.score(task, &s, world::oracle_action(task, &s), &mut rng)?;
    println!("remote score {:.2} from {:?}", score.value, score.source);
    Ok(())
}
