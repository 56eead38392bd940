//! Wire messages. Every message is a JSON object with a `type` field.

use pursuit_core::agents::Role;
use pursuit_core::engine::{EpisodeResult, GameConfig};
use pursuit_core::grid::{GridMap, Point, Pose};
use pursuit_core::navigation::{ControlCommand, ImageObservation};
use serde::{Deserialize, Serialize};

/// How ticks are paced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pace {
    /// One tick every `dt / real_time_scale` wall seconds.
    #[default]
    Realtime,
    /// One tick per command or goal from the controlling client.
    Lockstep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub game: GameConfig,
    /// Human-controlled roles; exactly one is required.
    pub humans: Vec<Role>,
    pub real_time_scale: f64,
    pub pace: Pace,
    /// Send the pursuer's particle cloud to spectators.
    pub show_particles: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            game: GameConfig::default(),
            humans: vec![Role::Evader],
            real_time_scale: 1.0,
            pace: Pace::Realtime,
            show_particles: false,
        }
    }
}

/// Who a connection watches the game as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    Pursuer,
    Evader,
    Spectator,
}

impl ViewRole {
    pub fn as_role(self) -> Option<Role> {
        match self {
            ViewRole::Pursuer => Some(Role::Pursuer),
            ViewRole::Evader => Some(Role::Evader),
            ViewRole::Spectator => None,
        }
    }
}

impl From<Role> for ViewRole {
    fn from(role: Role) -> Self {
        match role {
            Role::Pursuer => ViewRole::Pursuer,
            Role::Evader => ViewRole::Evader,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Lobby,
    Running,
    Paused,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Create { config: Box<SessionConfig> },
    Join { session_id: String, role: ViewRole },
    Command { v: f64, omega: f64 },
    Goal { x: f64, y: f64 },
    Pause,
    Resume,
}

/// The grid as rows of `#`/`.`, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapInfo {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: Point,
    pub rows: Vec<String>,
}

impl MapInfo {
    pub fn of(map: &GridMap) -> Self {
        let rows = (0..map.height())
            .map(|r| {
                (0..map.width())
                    .map(|c| if map.is_occupied_index(r * map.width() + c) { '#' } else { '.' })
                    .collect()
            })
            .collect();
        Self {
            width: map.width(),
            height: map.height(),
            resolution: map.resolution(),
            origin: map.origin(),
            rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Poses {
    pub pursuer: Option<Pose>,
    pub evader: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: usize,
    pub total_ticks: usize,
    pub status: Status,
    pub detected: bool,
    pub success_rate: f64,
    /// Seconds of game time left.
    pub time_left: f64,
    /// A pursuer view leaves `evader` empty while the evader is undetected.
    pub poses: Poses,
    /// `[row, col]` cells the pursuer currently sees.
    pub overlay_cells: Vec<[usize; 2]>,
    /// The evader's box in the pursuer's camera, while detected.
    pub observation: Option<ImageObservation>,
    /// The pursuer's belief about the evader position.
    pub estimate: Option<Pose>,
    /// `[x, y, theta, weight]` rows; spectators only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub session_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub success_rate: f64,
    pub detected_ticks: usize,
    pub ticks_played: usize,
    pub total_ticks: usize,
    /// False when the session ended early, e.g. after a disconnect.
    pub completed: bool,
    pub result: EpisodeResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    InvalidConfig,
    NotFound,
    NotJoined,
    NotController,
    RoleTaken,
    Finished,
    Occupied,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Created {
        session_id: String,
    },
    Joined {
        session_id: String,
        role: ViewRole,
        /// Whether this connection drives the human agent.
        controls: bool,
        human: Role,
        dt: f64,
        total_ticks: usize,
        map: MapInfo,
    },
    Ack {
        /// The command as it will be applied.
        command: Option<ControlCommand>,
        clamped: bool,
        /// Waypoints of the planned route for a goal.
        path: Option<Vec<Point>>,
    },
    State(StateFrame),
    Finished {
        episode_summary: EpisodeSummary,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }
}
