//! Live game service for the demonstrator: one shared Snake game, JSON frames pushed
//! to every websocket client, commands from clients queued into the game loop.

use std::net::SocketAddr;
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tokio::sync::broadcast;

use crate::arena::{Arena, LocId, TaskId};
use crate::rl::{select_task, QFunction, RlError, ShieldDriver};
use crate::shield::{risk_band, Shield, ShieldError};
use crate::snake::{new_game, SnakeConfig, SnakeError, SnakeGame, SnakeMap, ADVERSARY, AVATAR};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Snake(#[from] SnakeError),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Who picks the avatar's corridors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    /// The game pauses at each decision until a client sends `choose`.
    Human,
    /// Greedy policy of the configured Q-function, restricted by the shield.
    Rl,
    /// Uniform among the allowed tasks.
    Random,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub map: String,
    pub horizon: u32,
    pub delta: f64,
    pub tick: Duration,
    pub seed: u64,
    pub mode: ControlMode,
    pub q: QFunction,
    pub snake: SnakeConfig,
    /// 0 means unlimited.
    pub budget_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            map: crate::snake::SNAKE_MAP.to_string(),
            horizon: 15,
            delta: 1.0,
            tick: Duration::from_millis(200),
            seed: 1,
            mode: ControlMode::Human,
            q: QFunction::default(),
            snake: SnakeConfig::default(),
            budget_ms: 0,
        }
    }
}

pub type Xy = [i32; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameApples {
    pub avatar: Vec<Xy>,
    pub adversary: Vec<Xy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub avatar: i64,
    pub adversary: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTask {
    pub path: Vec<Xy>,
    pub value: f64,
    pub band: String,
    pub allowed: bool,
}

/// Snapshot pushed to clients. Outside decisions `tasks` shows the look-ahead
/// valuation for the avatar's next decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u32,
    pub avatar: Vec<Xy>,
    pub adversary: Vec<Xy>,
    pub apples: FrameApples,
    pub scores: FrameScores,
    pub decision: bool,
    pub tasks: Vec<FrameTask>,
    pub status: String,
}

/// Everything the server sends, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(Frame),
    Error {
        error: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    /// Index into the current frame's task list.
    Choose { task: usize },
    SetDelta { delta: f64 },
    SetMode { mode: ControlMode },
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
    Pause,
    Resume,
}

/// Parses a command given either flat (`{"type":"choose","task":1}`) or in the
/// envelope form (`{"type":"choose","payload":{"task":1}}` or `"payload":1`).
pub fn parse_command(text: &str) -> Result<Command, Rejection> {
    let bad = |m: String| Rejection::new("bad_command", None, Some(m));
    let value: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(bad("expected a JSON object".into()));
    };
    if let Some(payload) = obj.remove("payload") {
        let kind = obj.get("type").and_then(Value::as_str).unwrap_or_default();
        match payload {
            Value::Object(fields) => obj.extend(fields),
            Value::Null => {}
            scalar => {
                let key = match kind {
                    "choose" => "task",
                    "set_delta" => "delta",
                    "set_mode" => "mode",
                    "reset" => "seed",
                    _ => return Err(bad(format!("unexpected payload for '{kind}'"))),
                };
                obj.insert(key.into(), scalar);
            }
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| bad(e.to_string()))
}

/// A refused command, reported only to the client that sent it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub error: &'static str,
    pub task: Option<usize>,
    pub message: Option<String>,
}

impl Rejection {
    fn new(error: &'static str, task: Option<usize>, message: Option<String>) -> Self {
        Self { error, task, message }
    }

    pub fn to_message(&self) -> ServerMessage {
        ServerMessage::Error {
            error: self.error.into(),
            task: self.task,
            message: self.message.clone(),
        }
    }
}

/// The game loop's state, independent of any transport.
pub struct GameSession {
    map: SnakeMap,
    config: ServiceConfig,
    game: SnakeGame,
    driver: ShieldDriver,
    mode: ControlMode,
    paused: bool,
    rng: ChaCha8Rng,
}

impl GameSession {
    pub fn new(config: ServiceConfig) -> Result<Self, ServiceError> {
        if config.horizon == 0 {
            return Err(ServiceError::Config("horizon must be at least 1".into()));
        }
        let map = SnakeMap::parse(&config.map)?;
        let game = new_game(&map, config.seed, config.snake.clone())?;
        let driver = ShieldDriver::with_budget(config.horizon, config.delta, config.budget_ms)?;
        let mut s = Self {
            map,
            mode: config.mode,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            game,
            driver,
            paused: false,
        };
        s.refresh_decision()?;
        Ok(s)
    }

    pub fn game(&self) -> &SnakeGame {
        &self.game
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn delta(&self) -> f64 {
        self.driver.online.delta
    }

    pub fn shield(&self) -> Option<&Shield> {
        self.driver.online.current()
    }

    /// Whether the loop is idle until a human picks a corridor.
    pub fn waiting_for_choice(&self) -> bool {
        self.mode == ControlMode::Human && self.game.is_running() && self.game.at_decision()
    }

    fn refresh_decision(&mut self) -> Result<(), ServiceError> {
        if self.game.is_running() && self.game.at_decision() {
            self.driver.at_decision(&self.game)?;
        }
        Ok(())
    }

    /// Tasks in frame order: the available tasks at a decision, the look-ahead
    /// valuation's tasks otherwise.
    fn frame_tasks(&self) -> Vec<TaskId> {
        if !self.game.is_running() {
            return Vec::new();
        }
        let mut ts = if self.game.at_decision() {
            self.game.available_tasks()
        } else {
            self.shield().map(|s| s.valuation.tasks().collect()).unwrap_or_default()
        };
        ts.sort();
        ts
    }

    pub fn frame(&self) -> Frame {
        let arena = self.game.arena();
        let p = self.game.payload();
        let shield = self.shield();
        let tasks = self
            .frame_tasks()
            .into_iter()
            .filter_map(|t| {
                let s = shield?;
                let value = s.valuation.value(t)?;
                Some(FrameTask {
                    path: xys(arena, arena.task(t).path()),
                    value,
                    band: risk_band(value).as_str().into(),
                    allowed: s.allows(t),
                })
            })
            .collect();
        let scores = self.game.scores();
        Frame {
            tick: self.game.tick(),
            avatar: xys(arena, &p.bodies[AVATAR]),
            adversary: xys(arena, &p.bodies[ADVERSARY]),
            apples: FrameApples {
                avatar: xys(arena, &p.apples[AVATAR]),
                adversary: xys(arena, &p.apples[ADVERSARY]),
            },
            scores: FrameScores {
                avatar: scores[AVATAR],
                adversary: scores[ADVERSARY],
            },
            decision: self.game.is_running() && self.game.at_decision(),
            tasks,
            status: self.game.status().as_str().into(),
        }
    }

    /// Applies a client command. Accepted commands yield the frames to broadcast.
    pub fn handle(&mut self, cmd: Command) -> Result<Vec<Frame>, Rejection> {
        let internal = |e: ServiceError| Rejection::new("internal", None, Some(e.to_string()));
        match cmd {
            Command::Choose { task } => {
                if !self.game.is_running() || !self.game.at_decision() {
                    return Err(Rejection::new("not_at_decision", Some(task), None));
                }
                let tasks = self.frame_tasks();
                let Some(&t) = tasks.get(task) else {
                    return Err(Rejection::new("invalid_task", Some(task), None));
                };
                if !self.shield().is_some_and(|s| s.allows(t)) {
                    return Err(Rejection::new("blocked", Some(task), None));
                }
                self.commit(t).map_err(internal)?;
            }
            Command::SetDelta { delta } => {
                self.driver
                    .online
                    .set_delta(delta)
                    .map_err(|e| Rejection::new("invalid_delta", None, Some(e.to_string())))?;
            }
            Command::SetMode { mode } => self.mode = mode,
            Command::Reset { seed } => {
                let seed = seed.unwrap_or(self.config.seed);
                let delta = self.delta();
                self.game = new_game(&self.map, seed, self.config.snake.clone())
                    .map_err(|e| internal(e.into()))?;
                self.driver = ShieldDriver::with_budget(self.config.horizon, delta, self.config.budget_ms).map_err(|e| internal(e.into()))?;
                self.rng = ChaCha8Rng::seed_from_u64(seed);
                self.refresh_decision().map_err(internal)?;
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
        }
        Ok(vec![self.frame()])
    }

    fn commit(&mut self, t: TaskId) -> Result<(), ServiceError> {
        self.game.choose(t)?;
        self.driver.after_choice(&self.game)?;
        Ok(())
    }

    /// One round of the game loop. Returns a frame after the adversary's decision
    /// (with the recomputed shield) and one for the finished round.
    pub fn tick(&mut self) -> Result<Vec<Frame>, ServiceError> {
        if self.paused || !self.game.is_running() || self.waiting_for_choice() {
            return Ok(Vec::new());
        }
        if self.game.at_decision() {
            let shield = self.shield().cloned();
            let epsilon = match self.mode {
                ControlMode::Random => 1.0,
                _ => 0.0,
            };
            let t = select_task(&self.config.q, &self.game, shield.as_ref(), epsilon, &mut self.rng);
            self.commit(t)?;
        }
        let mut frames = Vec::new();
        let ev = self.game.step()?;
        if let Some(observed) = ev.adversary_decision {
            if self.game.is_running() {
                self.driver.after_adversary_decision(&self.game, &observed)?;
                frames.push(self.frame());
            }
        }
        self.refresh_decision()?;
        frames.push(self.frame());
        Ok(frames)
    }
}

fn xys(arena: &Arena, locs: &[LocId]) -> Vec<Xy> {
    locs.iter()
        .filter_map(|&v| arena.coord(v))
        .map(|(x, y)| [x, y])
        .collect()
}

struct Inbound {
    text: String,
    reply: tokio::sync::mpsc::UnboundedSender<String>,
}

/// Shared by all client connections.
#[derive(Clone)]
pub struct ServiceHandle {
    commands: mpsc::Sender<Inbound>,
    frames: broadcast::Sender<String>,
    latest: Arc<Mutex<String>>,
}

/// Starts the game loop on its own thread. Shield computations run inline, so the
/// loop blocks at a decision until its shield is ready.
pub fn spawn_game_loop(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let tick = config.tick;
    let mut session = GameSession::new(config)?;
    let (commands, rx) = mpsc::channel::<Inbound>();
    let (frames, _) = broadcast::channel(256);
    let latest = Arc::new(Mutex::new(ServerMessage::Frame(session.frame()).to_json()));
    let handle = ServiceHandle {
        commands,
        frames: frames.clone(),
        latest: latest.clone(),
    };
    let publish = move |fs: Vec<Frame>| {
        for f in fs {
            let text = ServerMessage::Frame(f).to_json();
            *latest.lock().expect("frame lock") = text.clone();
            let _ = frames.send(text);
        }
    };
    std::thread::spawn(move || {
        let mut next = Instant::now() + tick;
        loop {
            match rx.recv_timeout(next.saturating_duration_since(Instant::now())) {
                Ok(Inbound { text, reply }) => {
                    match parse_command(&text).and_then(|c| session.handle(c)) {
                        Ok(fs) => publish(fs),
                        Err(r) => {
                            let _ = reply.send(r.to_message().to_json());
                        }
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    next = Instant::now() + tick;
                    match session.tick() {
                        Ok(fs) => publish(fs),
                        Err(e) => {
                            tracing::error!("game loop: {e}");
                            session.paused = true;
                        }
                    }
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
    });
    Ok(handle)
}

pub fn router(handle: ServiceHandle) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(handle)
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(handle): State<ServiceHandle>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client_session(socket, handle))
}

async fn client_session(socket: WebSocket, handle: ServiceHandle) {
    let (mut sink, mut stream) = socket.split();
    let mut frames = handle.frames.subscribe();
    let (reply, mut replies) = tokio::sync::mpsc::unbounded_channel::<String>();
    let first = handle.latest.lock().expect("frame lock").clone();
    if sink.send(Message::Text(first.into())).await.is_err() {
        return;
    }
    loop {
        let out = tokio::select! {
            f = frames.recv() => match f {
                Ok(text) => text,
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => break,
            },
            Some(r) = replies.recv() => r,
            m = stream.next() => match m {
                Some(Ok(Message::Text(t))) => {
                    let inbound = Inbound { text: t.to_string(), reply: reply.clone() };
                    if handle.commands.send(inbound).is_err() {
                        break;
                    }
                    continue;
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => continue,
            },
        };
        if sink.send(Message::Text(out.into())).await.is_err() {
            break;
        }
    }
}

/// Binds `addr` and serves until the listener fails. Returns the bound address
/// through `bound` once listening.
pub async fn serve(
    config: ServiceConfig,
    addr: SocketAddr,
    bound: Option<tokio::sync::oneshot::Sender<SocketAddr>>,
) -> Result<(), ServiceError> {
    let handle = spawn_game_loop(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tracing::info!("serving on ws://{local}/ws");
    if let Some(tx) = bound {
        let _ = tx.send(local);
    }
    axum::serve(listener, router(handle)).await?;
    Ok(())
}
