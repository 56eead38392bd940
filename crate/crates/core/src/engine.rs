//! Discrete-tick game loop.
//!
//! Each tick the evader moves first, then the pursuer reacts to the evader's
//! new pose, then detection is scored on the end-of-tick poses. Tick 0 is the
//! spawn state and is not scored.

use std::f64::consts::PI;
use std::io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    Action, AgentSpec, Behavior, CameraParams, Decision, EscapeParams, Policy, PursuerMode, RandomPolicy, Role,
    SmartEvader, SmartPursuer, WorldView,
};
use crate::grid::{builtin_map, load_map, GridMap, MapError, Point, Pose};
use crate::navigation::{step_unicycle, ControlCommand, FollowParams, NavGrid, ReactiveGains};
use crate::particle_filter::{FilterConfig, FilterError, ParticleSet};
use crate::rng::{substream, substream_seed};
use crate::visibility::{is_detected, SensorModel, VisibilityError};

pub const SPAWN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("invalid game config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Visibility(#[from] VisibilityError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("no valid spawn found in {attempts} attempts")]
    Spawn { attempts: usize },
    #[error("game is over")]
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    /// Builtin map name; ignored when `map_document` is set.
    pub map: String,
    /// Inline ASCII map.
    pub map_document: Option<String>,
    pub t_max: f64,
    pub dt: f64,
    /// Evader top speed, m/s.
    pub v_e: f64,
    /// Pursuer top speed over evader top speed.
    pub speed_ratio: f64,
    pub pursuer_behavior: Behavior,
    pub evader_behavior: Behavior,
    pub sensor: SensorModel,
    pub filter: FilterConfig,
    pub seed: u64,
    pub agent_radius: f64,
    pub omega_max: f64,
    /// Obstacle clearance used by the planners.
    pub nav_inflation: f64,
    pub gains: ReactiveGains,
    pub follow: FollowParams,
    pub escape: EscapeParams,
    pub camera: CameraParams,
    /// Chance per tick that the pursuer's detector misses a visible evader.
    pub detection_failure: f64,
    /// Fixed start poses instead of random spawning.
    pub initial_pursuer: Option<Pose>,
    pub initial_evader: Option<Pose>,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            map: "complex_hall".to_string(),
            map_document: None,
            t_max: 90.0,
            dt: 1.0,
            v_e: 0.4,
            speed_ratio: 1.0,
            pursuer_behavior: Behavior::Smart,
            evader_behavior: Behavior::Smart,
            sensor: SensorModel::default(),
            filter: FilterConfig::default(),
            seed: 0,
            agent_radius: 0.2,
            omega_max: PI / 2.0,
            nav_inflation: 0.25,
            gains: ReactiveGains::default(),
            follow: FollowParams::default(),
            escape: EscapeParams::default(),
            camera: CameraParams::default(),
            detection_failure: 0.0,
            initial_pursuer: None,
            initial_evader: None,
        }
    }
}

impl GameConfig {
    pub fn v_p(&self) -> f64 {
        self.v_e * self.speed_ratio
    }

    /// Number of scored ticks.
    pub fn total_ticks(&self) -> usize {
        // tolerate t_max/dt landing a hair under an integer
        ((self.t_max / self.dt) + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let bad = |msg: &str| Err(GameError::InvalidConfig(msg.to_string()));
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return bad("t_max must be positive");
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if !(self.speed_ratio > 0.0) || !self.speed_ratio.is_finite() {
            return bad("speed_ratio must be positive");
        }
        if !(self.v_e > 0.0) || !self.v_e.is_finite() {
            return bad("v_e must be positive");
        }
        if !(self.agent_radius >= 0.0) || !(self.omega_max > 0.0) || !(self.nav_inflation >= 0.0) {
            return bad("agent radius, inflation and turn rate must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.detection_failure) {
            return bad("detection_failure must lie in [0, 1]");
        }
        if self.initial_pursuer.is_some() != self.initial_evader.is_some() {
            return bad("initial poses must be given for both agents or neither");
        }
        if self.total_ticks() == 0 {
            return bad("t_max shorter than one tick");
        }
        self.sensor.validate()?;
        self.filter.validate()?;
        Ok(())
    }

    pub fn load_map(&self) -> Result<GridMap, GameError> {
        let map = match &self.map_document {
            Some(doc) => load_map(doc)?,
            None => builtin_map(&self.map)?,
        };
        Ok(map)
    }

    /// Lowercase hex sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config is always serializable");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pursuer_spec(&self) -> AgentSpec {
        AgentSpec {
            role: Role::Pursuer,
            behavior: self.pursuer_behavior,
            v_max: self.v_p(),
            radius: self.agent_radius,
            omega_max: self.omega_max,
        }
    }

    pub fn evader_spec(&self) -> AgentSpec {
        AgentSpec {
            role: Role::Evader,
            behavior: self.evader_behavior,
            v_max: self.v_e,
            radius: self.agent_radius,
            omega_max: self.omega_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub k: usize,
    pub pursuer: Pose,
    pub evader: Pose,
    pub detected: bool,
    pub pursuer_mode: PursuerMode,
    pub filter_estimate: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub config_digest: String,
    pub initial_pursuer: Pose,
    pub initial_evader: Pose,
    pub ticks: Vec<TickRecord>,
    pub detected_ticks: usize,
    pub success_rate: f64,
}

impl EpisodeResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result is always serializable")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Per-tick table: tick, pursuer x/y/θ, evader x/y/θ, detected.
    pub fn write_trajectory<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_HEADER)?;
        for t in &self.ticks {
            w.serialize((
                t.k,
                t.pursuer.x,
                t.pursuer.y,
                t.pursuer.theta,
                t.evader.x,
                t.evader.y,
                t.evader.theta,
                u8::from(t.detected),
            ))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn trajectory_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_trajectory(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

pub const TRAJECTORY_HEADER: [&str; 8] = [
    "tick",
    "pursuer_x",
    "pursuer_y",
    "pursuer_theta",
    "evader_x",
    "evader_y",
    "evader_theta",
    "detected",
];

/// Uniform poses in free space, redrawn until the pursuer detects the evader.
pub fn spawn(
    map: &GridMap,
    sensor: &SensorModel,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Pose, Pose), GameError> {
    let free = map.free_cells();
    if free.is_empty() {
        return Err(GameError::Spawn { attempts: 0 });
    }
    let res = map.resolution();
    let origin = map.origin();
    let draw = |rng: &mut ChaCha8Rng| {
        let cell = free[rng.random_range(0..free.len())];
        let x = origin.x + (cell.col as f64 + rng.random::<f64>()) * res;
        let y = origin.y + (cell.row as f64 + rng.random::<f64>()) * res;
        let theta = rng.random_range(-PI..PI);
        Pose::new(x, y, theta)
    };
    for _ in 0..SPAWN_ATTEMPTS {
        let pursuer = draw(rng);
        let evader = draw(rng);
        if map.disc_collides(pursuer.position(), radius) || map.disc_collides(evader.position(), radius) {
            continue;
        }
        if pursuer.position().distance(&evader.position()) < 2.0 * radius {
            continue;
        }
        if is_detected(map, &pursuer, &evader, sensor).unwrap_or(false) {
            return Ok((pursuer, evader));
        }
    }
    Err(GameError::Spawn {
        attempts: SPAWN_ATTEMPTS,
    })
}

pub fn default_policy(config: &GameConfig, role: Role) -> Box<dyn Policy> {
    match (role, role_behavior(config, role)) {
        (_, Behavior::Random) => Box::new(RandomPolicy::new(config.follow)),
        (Role::Evader, Behavior::Smart) => Box::new(SmartEvader::new(config.escape, config.follow)),
        (Role::Pursuer, Behavior::Smart) => {
            // the filter's motion model assumes the evader's top speed
            let filter = FilterConfig {
                v_max: config.v_e,
                omega_max: config.omega_max,
                ..config.filter
            };
            Box::new(SmartPursuer::new(
                filter,
                config.gains,
                config.follow,
                config.camera,
                substream_seed(config.seed, "filter"),
            ))
        }
    }
}

fn role_behavior(config: &GameConfig, role: Role) -> Behavior {
    match role {
        Role::Pursuer => config.pursuer_behavior,
        Role::Evader => config.evader_behavior,
    }
}

pub struct Game {
    config: GameConfig,
    map: GridMap,
    nav: NavGrid,
    pursuer_spec: AgentSpec,
    evader_spec: AgentSpec,
    pursuer_policy: Box<dyn Policy>,
    evader_policy: Box<dyn Policy>,
    pursuer_rng: ChaCha8Rng,
    evader_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    initial: (Pose, Pose),
    pursuer: Pose,
    evader: Pose,
    records: Vec<TickRecord>,
    detected_ticks: usize,
    total_ticks: usize,
    digest: String,
}

impl Game {
    pub fn new(config: GameConfig) -> Result<Self, GameError> {
        let evader = default_policy(&config, Role::Evader);
        let pursuer = default_policy(&config, Role::Pursuer);
        Self::with_policies(config, evader, pursuer)
    }

    pub fn with_policies(
        config: GameConfig,
        evader_policy: Box<dyn Policy>,
        pursuer_policy: Box<dyn Policy>,
    ) -> Result<Self, GameError> {
        config.validate()?;
        let map = config.load_map()?;
        let initial = match (config.initial_pursuer, config.initial_evader) {
            (Some(p), Some(e)) => {
                for pose in [p, e] {
                    if map.disc_collides(pose.position(), config.agent_radius) {
                        return Err(GameError::InvalidConfig(format!(
                            "initial pose ({}, {}) collides with the map",
                            pose.x, pose.y
                        )));
                    }
                }
                (p, e)
            }
            _ => spawn(
                &map,
                &config.sensor,
                config.agent_radius,
                &mut substream(config.seed, "spawn"),
            )?,
        };
        let nav = NavGrid::new(&map, config.nav_inflation);
        let mut game = Self {
            pursuer_spec: config.pursuer_spec(),
            evader_spec: config.evader_spec(),
            pursuer_rng: substream(config.seed, "pursuer-policy"),
            evader_rng: substream(config.seed, "evader-policy"),
            dropout_rng: substream(config.seed, "dropout"),
            total_ticks: config.total_ticks(),
            digest: config.digest(),
            pursuer: initial.0,
            evader: initial.1,
            initial,
            map,
            nav,
            pursuer_policy,
            evader_policy,
            records: Vec::new(),
            detected_ticks: 0,
            config,
        };
        let seen = game.detected();
        let view = shared_view(&game.map, &game.nav, &game.config, 0);
        game.evader_policy.begin(&WorldView {
            me: game.evader,
            spec: game.evader_spec,
            opponent: Some(game.pursuer),
            ..view
        });
        game.pursuer_policy.begin(&WorldView {
            me: game.pursuer,
            spec: game.pursuer_spec,
            opponent: seen.then_some(game.evader),
            ..view
        });
        Ok(game)
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn nav(&self) -> &NavGrid {
        &self.nav
    }

    pub fn pursuer(&self) -> Pose {
        self.pursuer
    }

    pub fn evader(&self) -> Pose {
        self.evader
    }

    pub fn spec(&self, role: Role) -> AgentSpec {
        match role {
            Role::Pursuer => self.pursuer_spec,
            Role::Evader => self.evader_spec,
        }
    }

    /// Ticks played so far.
    pub fn tick(&self) -> usize {
        self.records.len()
    }

    pub fn total_ticks(&self) -> usize {
        self.total_ticks
    }

    pub fn is_finished(&self) -> bool {
        self.records.len() >= self.total_ticks
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    /// Detected fraction of the ticks played so far (0 before the first tick).
    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.detected_ticks as f64 / self.records.len() as f64
        }
    }

    /// Whether the pursuer currently detects the evader.
    pub fn detected(&self) -> bool {
        is_detected(&self.map, &self.pursuer, &self.evader, &self.config.sensor).unwrap_or(false)
    }

    pub fn pursuer_particles(&self) -> Option<&ParticleSet> {
        self.pursuer_policy.particles()
    }

    pub fn step(&mut self) -> Result<&TickRecord, GameError> {
        self.step_with(None, None)
    }

    /// Plays one tick; an override replaces that role's policy for this tick.
    pub fn step_with(
        &mut self,
        evader_override: Option<Action>,
        pursuer_override: Option<Action>,
    ) -> Result<&TickRecord, GameError> {
        if self.is_finished() {
            return Err(GameError::Finished);
        }
        let k = self.records.len() + 1;

        let evader_action = match evader_override {
            Some(action) => action,
            None => {
                let view = WorldView {
                    me: self.evader,
                    spec: self.evader_spec,
                    opponent: Some(self.pursuer),
                    ..shared_view(&self.map, &self.nav, &self.config, k)
                };
                self.evader_policy.decide(&view, &mut self.evader_rng).action
            }
        };
        self.evader = self.apply(Role::Evader, evader_action);

        let seen = self.detected();
        let dropout = self.dropout_rng.random::<f64>() < self.config.detection_failure;
        let decision = match pursuer_override {
            Some(action) => Decision {
                action,
                mode: Some(PursuerMode::Human),
                estimate: None,
            },
            None => {
                let view = WorldView {
                    me: self.pursuer,
                    spec: self.pursuer_spec,
                    opponent: (seen && !dropout).then_some(self.evader),
                    ..shared_view(&self.map, &self.nav, &self.config, k)
                };
                self.pursuer_policy.decide(&view, &mut self.pursuer_rng)
            }
        };
        self.pursuer = self.apply(Role::Pursuer, decision.action);

        let detected = self.detected();
        self.detected_ticks += usize::from(detected);
        self.records.push(TickRecord {
            k,
            pursuer: self.pursuer,
            evader: self.evader,
            detected,
            pursuer_mode: decision.mode.unwrap_or(PursuerMode::Scripted),
            filter_estimate: decision.estimate,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Moves one agent. Illegal moves are clamped: speeds to the agent's
    /// limits, and a step that would overlap the other agent keeps only its
    /// rotation.
    fn apply(&self, role: Role, action: Action) -> Pose {
        let spec = self.spec(role);
        let (me, other) = match role {
            Role::Pursuer => (self.pursuer, self.evader),
            Role::Evader => (self.evader, self.pursuer),
        };
        let clearance = 2.0 * spec.radius;
        let overlaps = |p: Point| p.distance(&other.position()) < clearance;
        match action {
            Action::Drive(cmd) => {
                let cmd = clamp_command(cmd, &spec);
                let next = step_unicycle(&me, cmd, self.config.dt, &self.map, spec.radius);
                if overlaps(next.position()) && !overlaps(me.position()) {
                    Pose::new(me.x, me.y, next.theta)
                } else {
                    next
                }
            }
            Action::Teleport(pose) => {
                let free = self.map.contains_point(pose.position())
                    && !self.map.disc_collides(pose.position(), spec.radius);
                if free && !overlaps(pose.position()) {
                    pose
                } else {
                    me
                }
            }
        }
    }

    pub fn run_to_end(&mut self) -> Result<(), GameError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Result for the ticks played so far.
    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            seed: self.config.seed,
            config_digest: self.digest.clone(),
            initial_pursuer: self.initial.0,
            initial_evader: self.initial.1,
            ticks: self.records.clone(),
            detected_ticks: self.detected_ticks,
            success_rate: self.success_rate(),
        }
    }
}

fn shared_view<'a>(map: &'a GridMap, nav: &'a NavGrid, config: &'a GameConfig, k: usize) -> WorldView<'a> {
    WorldView {
        map,
        nav,
        sensor: &config.sensor,
        tick: k,
        dt: config.dt,
        me: Pose::default(),
        spec: config.evader_spec(),
        opponent: None,
    }
}

/// Clamps to forward speeds in `[0, v_max]` and turn rates in `[-ω_max, ω_max]`.
pub fn clamp_command(cmd: ControlCommand, spec: &AgentSpec) -> ControlCommand {
    let v = if cmd.v.is_finite() { cmd.v.clamp(0.0, spec.v_max) } else { 0.0 };
    let omega = if cmd.omega.is_finite() {
        cmd.omega.clamp(-spec.omega_max, spec.omega_max)
    } else {
        0.0
    };
    ControlCommand { v, omega }
}

pub fn run_episode(config: &GameConfig) -> Result<EpisodeResult, GameError> {
    let mut game = Game::new(config.clone())?;
    game.run_to_end()?;
    Ok(game.result())
}

pub fn run_episode_with(
    config: &GameConfig,
    evader_policy: Box<dyn Policy>,
    pursuer_policy: Box<dyn Policy>,
) -> Result<EpisodeResult, GameError> {
    let mut game = Game::with_policies(config.clone(), evader_policy, pursuer_policy)?;
    game.run_to_end()?;
    Ok(game.result())
}
