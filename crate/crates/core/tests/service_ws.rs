//! End-to-end check of the websocket protocol against a live service.

use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use online_shield::service::{serve, ControlMode, ServiceConfig};
use online_shield::snake::SMALL_SNAKE_MAP;
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(mode: ControlMode) -> SocketAddr {
    let config = ServiceConfig {
        map: SMALL_SNAKE_MAP.into(),
        horizon: 8,
        delta: 1.0,
        tick: Duration::from_millis(2),
        mode,
        ..Default::default()
    };
    let (tx, rx) = tokio::sync::oneshot::channel();
    tokio::spawn(serve(config, "127.0.0.1:0".parse().unwrap(), Some(tx)));
    rx.await.unwrap()
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next_json(ws: &mut Ws) -> Option<Value> {
    loop {
        let m = tokio::time::timeout(Duration::from_millis(300), ws.next()).await.ok()??.ok()?;
        if let Message::Text(t) = m {
            return Some(serde_json::from_str(t.as_str()).unwrap());
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

/// Newest frame after draining whatever is queued.
async fn settle(ws: &mut Ws) -> Value {
    let mut last = None;
    while let Some(v) = next_json(ws).await {
        last = Some(v);
    }
    last.expect("no frame")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn human_session_over_websocket() {
    let addr = start(ControlMode::Human).await;
    let mut ws = connect(addr).await;
    let first = next_json(&mut ws).await.unwrap();
    assert_eq!(first["type"], "frame");
    assert_eq!(first["decision"], true);
    assert!(!first["tasks"].as_array().unwrap().is_empty());

    // Malformed input is answered, the loop keeps going.
    ws.send(Message::Text("not json".into())).await.unwrap();
    let err = next_json(&mut ws).await.unwrap();
    assert_eq!(err["type"], "error");
    assert_eq!(err["error"], "bad_command");

    let mut blocked_seen = false;
    let mut frame = first;
    for _ in 0..2000 {
        if frame["status"] != "running" {
            send(&mut ws, json!({"type": "reset", "payload": {"seed": frame["tick"].as_u64().unwrap() + 17}})).await;
            frame = settle(&mut ws).await;
            continue;
        }
        assert_eq!(frame["decision"], true, "human mode pauses at decisions");
        let tasks = frame["tasks"].as_array().unwrap().clone();
        let values: Vec<f64> = tasks.iter().map(|t| t["value"].as_f64().unwrap()).collect();
        let best = values.iter().cloned().fold(f64::INFINITY, f64::min);
        for (t, v) in tasks.iter().zip(&values) {
            assert_eq!(t["allowed"].as_bool().unwrap(), *v <= best);
        }
        if let Some(i) = tasks.iter().position(|t| t["allowed"] == false) {
            blocked_seen = true;
            let tick = frame["tick"].clone();
            send(&mut ws, json!({"type": "choose", "task": i})).await;
            let reply = next_json(&mut ws).await.unwrap();
            assert_eq!(reply, json!({"type": "error", "error": "blocked", "task": i}));
            // Still paused on the same decision.
            assert!(next_json(&mut ws).await.is_none());
            send(&mut ws, json!({"type": "pause"})).await;
            let paused = next_json(&mut ws).await.unwrap();
            assert_eq!(paused["tick"], tick);
            assert_eq!(paused["decision"], true);
            break;
        }
        let i = tasks.iter().position(|t| t["allowed"] == true).unwrap();
        send(&mut ws, json!({"type": "choose", "payload": {"task": i}})).await;
        frame = settle(&mut ws).await;
    }
    assert!(blocked_seen, "no blocked corridor met");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn viewers_receive_recomputed_frames() {
    let addr = start(ControlMode::Random).await;
    let mut driver = connect(addr).await;
    let mut viewer = connect(addr).await;
    next_json(&mut driver).await.unwrap();
    let mut ticks = Vec::new();
    while ticks.len() < 60 {
        let f = next_json(&mut viewer).await.expect("frames keep coming");
        if f["status"] != "running" {
            send(&mut driver, json!({"type": "reset", "seed": ticks.len()})).await;
            continue;
        }
        ticks.push((f["tick"].as_u64().unwrap(), f["decision"].as_bool().unwrap()));
    }
    // An adversary decision produces an extra frame for the same tick ahead of the
    // round's own frame.
    assert!(ticks.windows(2).any(|w| w[0].0 == w[1].0 && !w[0].1));
    send(&mut driver, json!({"type": "set_mode", "mode": "human"})).await;
    let f = settle(&mut viewer).await;
    assert_eq!(f["decision"], true);
}
