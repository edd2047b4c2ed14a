//! A human-labeled run driven over a real socket.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::Duration;

use gflowhf::harness::{run_experiment, Algorithm, LabelerKind, RunConfig, RunHandle, Schedule};
use gflowhf_cli::service;
use serde_json::Value;

fn http(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    let code = reply[9..12].parse().unwrap();
    let (_, payload) = reply.split_once("\r\n\r\n").unwrap();
    (code, serde_json::from_str(payload).unwrap())
}

#[test]
fn human_run_completes_through_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk(Algorithm::DdpgHf, LabelerKind::Human, 2, dir.path());
    cfg.schedule = Schedule {
        total_timesteps: 360,
        start_training_timestep: 120,
        eval_interval: 120,
    };
    cfg.criteria.eval_episodes = 5;
    cfg.reward.hidden = vec![8];
    cfg.ddpg.actor_hidden = vec![8];
    cfg.ddpg.critic_hidden = vec![8];
    cfg.ddpg.batch_size = 8;
    let handle = RunHandle::new();
    let addr = service::spawn(handle.clone(), "127.0.0.1:0").unwrap();
    let trainer = {
        let handle = handle.clone();
        thread::spawn(move || run_experiment(&cfg, &handle).map(|o| o.metrics.len()))
    };

    let mut rounds = 0;
    loop {
        let (_, status) = http(addr, "GET", "/api/status", "");
        if status["waiting_for_labels"] == true {
            let (code, pending) = http(addr, "GET", "/api/pending", "");
            assert_eq!(code, 200);
            let labels: Vec<Value> = pending
                .as_array()
                .unwrap()
                .iter()
                .map(|p| serde_json::json!({"episode_id": p["episode_id"], "grade": 2}))
                .collect();
            assert_eq!(labels.len(), 10);
            let body = Value::Array(labels).to_string();
            assert_eq!(http(addr, "POST", "/api/labels", &body).0, 200);
            assert_eq!(http(addr, "POST", "/api/labels", &body).0, 409);
            rounds += 1;
        }
        if trainer.is_finished() {
            break;
        }
        thread::sleep(Duration::from_millis(2));
    }
    assert_eq!(trainer.join().unwrap().unwrap(), 4);
    assert_eq!(rounds, 3);
    let (_, metrics) = http(addr, "GET", "/api/metrics", "");
    assert_eq!(metrics.as_array().unwrap().len(), 4);
    let (_, status) = http(addr, "GET", "/api/status", "");
    assert_eq!(status["n_labels"], 30);
    assert_eq!(status["finished"], true);
}
