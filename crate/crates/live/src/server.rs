//! HTTP and websocket front end. Each session lives in its own task and is
//! the only writer of its game; connections talk to it over channels.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use pursuit_core::grid::Point;
use pursuit_core::navigation::ControlCommand;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tokio::time::{sleep_until, Instant};
use tower_http::services::ServeDir;

use crate::protocol::{ClientMessage, ErrorCode, MapInfo, Pace, ServerMessage, Status, ViewRole};
use crate::session::{Ack, Session, SessionError};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Served at `/` (the browser client bundle).
    pub static_dir: PathBuf,
    /// Append-only per-session logs, when set.
    pub log_dir: Option<PathBuf>,
    /// How long a session waits for its player to come back.
    pub disconnect_grace: Duration,
    /// How long a finished session keeps answering before it is dropped.
    pub finished_ttl: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            static_dir: PathBuf::from("web/dist"),
            log_dir: None,
            disconnect_grace: Duration::from_secs(60),
            finished_ttl: Duration::from_secs(300),
        }
    }
}

type Outbox = mpsc::UnboundedSender<ServerMessage>;

enum SessionMsg {
    Join { conn: u64, role: ViewRole, outbox: Outbox },
    Leave { conn: u64 },
    Command { conn: u64, cmd: ControlCommand },
    Goal { conn: u64, goal: Point },
    Pause { conn: u64 },
    Resume { conn: u64 },
}

#[derive(Clone)]
struct SessionHandle {
    tx: mpsc::UnboundedSender<SessionMsg>,
    status: watch::Receiver<Status>,
}

#[derive(Default)]
struct Registry {
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

impl Registry {
    fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().expect("registry lock").get(id).cloned()
    }

    fn insert(&self, id: String, handle: SessionHandle) {
        self.sessions.lock().expect("registry lock").insert(id, handle);
    }

    fn remove(&self, id: &str) {
        self.sessions.lock().expect("registry lock").remove(id);
    }

    fn active(&self) -> usize {
        self.sessions
            .lock()
            .expect("registry lock")
            .values()
            .filter(|h| *h.status.borrow() != Status::Finished)
            .count()
    }
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServerConfig>,
    registry: Arc<Registry>,
    next_conn: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        Self {
            config: Arc::new(config),
            registry: Arc::default(),
            next_conn: Arc::new(AtomicU64::new(1)),
        }
    }

    /// Sessions not yet finished.
    pub fn active_sessions(&self) -> usize {
        self.registry.active()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub version: String,
    pub active_sessions: usize,
}

pub fn router(state: AppState) -> Router {
    let static_files = ServeDir::new(&state.config.static_dir);
    Router::new()
        .route("/health", get(health))
        .route("/ws", get(upgrade))
        .fallback_service(static_files)
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        version: env!("CARGO_PKG_VERSION").to_string(),
        active_sessions: state.active_sessions(),
    })
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, state: AppState) {
    let conn = state.next_conn.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (outbox, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let text = serde_json::to_string(&msg).expect("server messages serialize");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    let mut joined: Option<SessionHandle> = None;
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let parsed: ClientMessage = match serde_json::from_str(text.as_str()) {
            Ok(m) => m,
            Err(e) => {
                let _ = outbox.send(ServerMessage::error(ErrorCode::BadMessage, e.to_string()));
                continue;
            }
        };
        let to_session = match parsed {
            ClientMessage::Create { config } => {
                let reply = match create(&state, config) {
                    Ok(session_id) => ServerMessage::Created { session_id },
                    Err(e) => ServerMessage::error(e.code(), e.to_string()),
                };
                let _ = outbox.send(reply);
                continue;
            }
            ClientMessage::Join { session_id, role } => {
                let Some(handle) = state.registry.get(&session_id) else {
                    let _ = outbox.send(ServerMessage::error(ErrorCode::NotFound, format!("no session {session_id}")));
                    continue;
                };
                if let Some(old) = joined.take() {
                    let _ = old.tx.send(SessionMsg::Leave { conn });
                }
                let _ = handle.tx.send(SessionMsg::Join {
                    conn,
                    role,
                    outbox: outbox.clone(),
                });
                joined = Some(handle);
                continue;
            }
            ClientMessage::Command { v, omega } => SessionMsg::Command {
                conn,
                cmd: ControlCommand { v, omega },
            },
            ClientMessage::Goal { x, y } => SessionMsg::Goal {
                conn,
                goal: Point::new(x, y),
            },
            ClientMessage::Pause => SessionMsg::Pause { conn },
            ClientMessage::Resume => SessionMsg::Resume { conn },
        };
        match &joined {
            Some(handle) if handle.tx.send(to_session).is_ok() => {}
            Some(_) => {
                let _ = outbox.send(ServerMessage::error(ErrorCode::NotFound, "session has expired"));
            }
            None => {
                let _ = outbox.send(ServerMessage::error(ErrorCode::NotJoined, "join a session first"));
            }
        }
    }
    if let Some(handle) = joined {
        let _ = handle.tx.send(SessionMsg::Leave { conn });
    }
    writer.abort();
}

fn create(state: &AppState, config: Box<crate::protocol::SessionConfig>) -> Result<String, SessionError> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(id.clone(), *config)?;
    let (tx, rx) = mpsc::unbounded_channel();
    let (status_tx, status_rx) = watch::channel(session.status());
    state.registry.insert(
        id.clone(),
        SessionHandle {
            tx,
            status: status_rx,
        },
    );
    let actor = Actor {
        session,
        rx,
        status: status_tx,
        config: state.config.clone(),
        registry: state.registry.clone(),
        subscribers: Vec::new(),
        controller: None,
        next_tick: None,
        grace_until: None,
        expire_at: None,
    };
    actor.log_event(serde_json::json!({ "event": "created", "config": actor.session.config() }));
    tokio::spawn(actor.run());
    Ok(id)
}

struct Subscriber {
    conn: u64,
    role: ViewRole,
    outbox: Outbox,
}

struct Actor {
    session: Session,
    rx: mpsc::UnboundedReceiver<SessionMsg>,
    status: watch::Sender<Status>,
    config: Arc<ServerConfig>,
    registry: Arc<Registry>,
    subscribers: Vec<Subscriber>,
    controller: Option<u64>,
    next_tick: Option<Instant>,
    grace_until: Option<Instant>,
    expire_at: Option<Instant>,
}

async fn at(deadline: Option<Instant>) {
    match deadline {
        Some(d) => sleep_until(d).await,
        None => std::future::pending().await,
    }
}

impl Actor {
    async fn run(mut self) {
        loop {
            tokio::select! {
                msg = self.rx.recv() => match msg {
                    Some(msg) => self.handle(msg),
                    None => break,
                },
                _ = at(self.next_tick) => {
                    self.next_tick = self.next_tick.map(|t| t + self.period());
                    self.tick();
                }
                _ = at(self.grace_until) => {
                    self.grace_until = None;
                    log::info!("session {} abandoned", self.session.id());
                    self.session.abandon();
                    self.finish();
                }
                _ = at(self.expire_at) => break,
            }
        }
        self.registry.remove(self.session.id());
    }

    fn period(&self) -> Duration {
        let cfg = self.session.config();
        Duration::from_secs_f64(self.session.game().config().dt / cfg.real_time_scale)
    }

    fn set_status(&mut self, status: Status) {
        self.session.set_status(status);
        self.status.send_replace(self.session.status());
        self.next_tick = match self.session.status() {
            Status::Running if self.session.config().pace == Pace::Realtime => {
                // keep a running clock; restart it after a pause
                self.next_tick.or_else(|| Some(Instant::now() + self.period()))
            }
            _ => None,
        };
    }

    fn reply(&self, conn: u64, msg: ServerMessage) {
        if let Some(s) = self.subscribers.iter().find(|s| s.conn == conn) {
            let _ = s.outbox.send(msg);
        }
    }

    fn handle(&mut self, msg: SessionMsg) {
        match msg {
            SessionMsg::Join { conn, role, outbox } => self.join(conn, role, outbox),
            SessionMsg::Leave { conn } => {
                self.subscribers.retain(|s| s.conn != conn);
                if self.controller == Some(conn) {
                    self.controller = None;
                    if self.session.status() != Status::Finished {
                        if self.session.status() == Status::Running {
                            self.set_status(Status::Paused);
                            self.broadcast_state();
                        }
                        self.grace_until = Some(Instant::now() + self.config.disconnect_grace);
                    }
                }
            }
            SessionMsg::Command { conn, cmd } => {
                if self.check_controller(conn) {
                    let ack = self.session.submit_command(cmd);
                    self.after_input(conn, ack);
                }
            }
            SessionMsg::Goal { conn, goal } => {
                if self.check_controller(conn) {
                    let ack = self.session.submit_goal(goal);
                    self.after_input(conn, ack);
                }
            }
            SessionMsg::Pause { conn } => {
                if self.check_controller(conn) && self.session.status() == Status::Running {
                    self.set_status(Status::Paused);
                    self.broadcast_state();
                }
            }
            SessionMsg::Resume { conn } => {
                if self.check_controller(conn) && self.session.status() == Status::Paused {
                    self.set_status(Status::Running);
                    self.broadcast_state();
                }
            }
        }
    }

    fn join(&mut self, conn: u64, role: ViewRole, outbox: Outbox) {
        let human = self.session.human();
        let controls = role.as_role() == Some(human);
        if controls && self.controller.is_some_and(|c| c != conn) {
            let _ = outbox.send(ServerMessage::error(ErrorCode::RoleTaken, "another player controls this role"));
            return;
        }
        self.subscribers.retain(|s| s.conn != conn);
        let game = self.session.game();
        let _ = outbox.send(ServerMessage::Joined {
            session_id: self.session.id().to_string(),
            role,
            controls,
            human,
            dt: game.config().dt,
            total_ticks: game.total_ticks(),
            map: MapInfo::of(game.map()),
        });
        let _ = outbox.send(ServerMessage::State(self.session.frame(role)));
        if self.session.status() == Status::Finished {
            let _ = outbox.send(ServerMessage::Finished {
                episode_summary: self.session.summary(),
            });
        }
        self.subscribers.push(Subscriber { conn, role, outbox });
        if controls && self.session.status() != Status::Finished {
            self.controller = Some(conn);
            let resume = self.grace_until.take().is_some() || self.session.status() == Status::Lobby;
            if resume {
                self.set_status(Status::Running);
                self.broadcast_state();
            }
        }
    }

    fn check_controller(&self, conn: u64) -> bool {
        if self.session.status() == Status::Finished {
            self.reply(conn, ServerMessage::error(ErrorCode::Finished, "session is finished"));
            return false;
        }
        if self.controller != Some(conn) {
            self.reply(conn, ServerMessage::error(ErrorCode::NotController, "this connection does not control an agent"));
            return false;
        }
        true
    }

    fn after_input(&mut self, conn: u64, ack: Result<Ack, SessionError>) {
        match ack {
            Ok(ack) => {
                self.reply(
                    conn,
                    ServerMessage::Ack {
                        command: ack.command,
                        clamped: ack.clamped,
                        path: ack.path,
                    },
                );
                if self.session.config().pace == Pace::Lockstep && self.session.status() == Status::Running {
                    self.tick();
                }
            }
            Err(e) => self.reply(conn, ServerMessage::error(e.code(), e.to_string())),
        }
    }

    fn tick(&mut self) {
        if self.session.status() != Status::Running {
            self.next_tick = None;
            return;
        }
        match self.session.advance() {
            Ok(record) => {
                let line = serde_json::json!({ "event": "tick", "record": record });
                self.log_event(line);
            }
            Err(e) => {
                log::error!("session {} failed to advance: {e}", self.session.id());
                self.session.abandon();
            }
        }
        self.broadcast_state();
        if self.session.status() == Status::Finished {
            self.finish();
        }
    }

    fn broadcast_state(&self) {
        for s in &self.subscribers {
            let _ = s.outbox.send(ServerMessage::State(self.session.frame(s.role)));
        }
    }

    fn finish(&mut self) {
        self.status.send_replace(Status::Finished);
        self.next_tick = None;
        self.grace_until = None;
        self.expire_at = Some(Instant::now() + self.config.finished_ttl);
        let summary = self.session.summary();
        self.log_event(serde_json::json!({ "event": "finished", "summary": &summary }));
        for s in &self.subscribers {
            let _ = s.outbox.send(ServerMessage::Finished {
                episode_summary: summary.clone(),
            });
        }
    }

    fn log_event(&self, event: serde_json::Value) {
        let Some(dir) = &self.config.log_dir else { return };
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(dir)?;
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{}.jsonl", self.session.id())))?;
            writeln!(file, "{event}")
        };
        if let Err(e) = write() {
            log::warn!("episode log for {} not written: {e}", self.session.id());
        }
    }
}
