//! One game with a human in the loop, independent of any transport.

use pursuit_core::agents::{Action, Policy, PursuerMode, Role, ScriptedPolicy};
use pursuit_core::engine::{clamp_command, default_policy, Game, GameError, TickRecord};
use pursuit_core::grid::{Point, Pose};
use pursuit_core::navigation::{clear_speed, follow_path, plan_path_on, project_to_image, ControlCommand, Path};
use pursuit_core::particle_filter::{FilterConfig, ParticleSet};
use pursuit_core::rng::substream_seed;
use pursuit_core::visibility::compute_visibility;
use thiserror::Error;

use crate::protocol::{EpisodeSummary, ErrorCode, Poses, SessionConfig, StateFrame, Status, ViewRole};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("session is finished")]
    Finished,
    #[error("goal ({x}, {y}) is not in free space")]
    Occupied { x: f64, y: f64 },
    #[error("no route to ({x}, {y})")]
    Unreachable { x: f64, y: f64 },
}

impl SessionError {
    pub fn code(&self) -> ErrorCode {
        match self {
            SessionError::InvalidConfig(_) | SessionError::Game(_) => ErrorCode::InvalidConfig,
            SessionError::Finished => ErrorCode::Finished,
            SessionError::Occupied { .. } => ErrorCode::Occupied,
            SessionError::Unreachable { .. } => ErrorCode::Unreachable,
        }
    }
}

/// Reply to a command or goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Ack {
    pub command: Option<ControlCommand>,
    pub clamped: bool,
    pub path: Option<Vec<Point>>,
}

pub struct Session {
    id: String,
    config: SessionConfig,
    human: Role,
    game: Game,
    status: Status,
    pending: Option<ControlCommand>,
    goal: Option<Path>,
    /// Belief kept for a human pursuer, who has no policy of its own.
    tracker: Option<ParticleSet>,
    filter: FilterConfig,
    completed: bool,
}

impl Session {
    pub fn new(id: impl Into<String>, config: SessionConfig) -> Result<Self, SessionError> {
        let human = match config.humans.as_slice() {
            [one] => *one,
            [] => return Err(SessionError::InvalidConfig("one role must be human-controlled".into())),
            _ => return Err(SessionError::InvalidConfig("at most one role may be human-controlled".into())),
        };
        if !(config.real_time_scale > 0.0 && config.real_time_scale.is_finite()) {
            return Err(SessionError::InvalidConfig("real_time_scale must be positive".into()));
        }
        let game_config = config.game.clone();
        let seat = || -> Box<dyn Policy> { Box::new(ScriptedPolicy::default()) };
        let (evader, pursuer) = match human {
            Role::Evader => (seat(), default_policy(&game_config, Role::Pursuer)),
            Role::Pursuer => (default_policy(&game_config, Role::Evader), seat()),
        };
        let game = Game::with_policies(game_config, evader, pursuer)?;
        // same motion model the simulated pursuer would use
        let filter = FilterConfig {
            v_max: game.config().v_e,
            omega_max: game.config().omega_max,
            ..game.config().filter
        };
        let mut session = Self {
            id: id.into(),
            config,
            human,
            game,
            status: Status::Lobby,
            pending: None,
            goal: None,
            tracker: None,
            filter,
            completed: false,
        };
        if human == Role::Pursuer {
            session.update_tracker();
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn human(&self) -> Role {
        self.human
    }

    pub fn game(&self) -> &Game {
        &self.game
    }

    pub fn status(&self) -> Status {
        self.status
    }

    /// Moves between lobby, running and paused; a finished session stays
    /// finished.
    pub fn set_status(&mut self, status: Status) {
        if self.status != Status::Finished {
            self.status = status;
        }
    }

    /// Stores a velocity command for the next tick, clamped to the human
    /// agent's limits. Replaces any goal.
    pub fn submit_command(&mut self, cmd: ControlCommand) -> Result<Ack, SessionError> {
        self.check_open()?;
        let applied = clamp_command(cmd, &self.game.spec(self.human));
        let clamped = applied != cmd;
        self.pending = Some(applied);
        self.goal = None;
        Ok(Ack {
            command: Some(applied),
            clamped,
            path: None,
        })
    }

    /// Plans a route to `goal`; it is followed tick by tick until reached or
    /// replaced.
    pub fn submit_goal(&mut self, goal: Point) -> Result<Ack, SessionError> {
        self.check_open()?;
        let map = self.game.map();
        if !map.is_free_point(goal) {
            return Err(SessionError::Occupied { x: goal.x, y: goal.y });
        }
        let me = self.human_pose();
        let path = plan_path_on(map, self.game.nav(), me.position(), goal)
            .map_err(|_| SessionError::Unreachable { x: goal.x, y: goal.y })?;
        let waypoints = path.waypoints().to_vec();
        self.pending = None;
        self.goal = Some(path);
        Ok(Ack {
            command: None,
            clamped: false,
            path: Some(waypoints),
        })
    }

    fn check_open(&self) -> Result<(), SessionError> {
        if self.status == Status::Finished {
            Err(SessionError::Finished)
        } else {
            Ok(())
        }
    }

    fn human_pose(&self) -> Pose {
        match self.human {
            Role::Evader => self.game.evader(),
            Role::Pursuer => self.game.pursuer(),
        }
    }

    /// The human agent's command for the coming tick: the pending command,
    /// else a step along the goal route, else hold.
    fn human_command(&mut self) -> ControlCommand {
        if let Some(cmd) = self.pending.take() {
            return cmd;
        }
        let Some(path) = &self.goal else {
            return ControlCommand::HOLD;
        };
        let spec = self.game.spec(self.human);
        let config = self.game.config();
        let pose = self.human_pose();
        let cmd = follow_path(&pose, path, spec.v_max, config.dt, &config.follow);
        if cmd == ControlCommand::HOLD {
            self.goal = None;
            return cmd;
        }
        clear_speed(&pose, cmd, config.dt, self.game.map(), spec.radius)
    }

    /// Plays one tick with the human's input substituted for its policy.
    pub fn advance(&mut self) -> Result<&TickRecord, SessionError> {
        self.check_open()?;
        let action = Action::Drive(self.human_command());
        match self.human {
            Role::Evader => self.game.step_with(Some(action), None)?,
            Role::Pursuer => self.game.step_with(None, Some(action))?,
        };
        if self.human == Role::Pursuer {
            self.update_tracker();
        }
        if self.game.is_finished() {
            self.status = Status::Finished;
            self.completed = true;
        }
        Ok(self.game.records().last().expect("a tick was just played"))
    }

    /// Ends the session early, e.g. after the player walked away.
    pub fn abandon(&mut self) {
        self.status = Status::Finished;
    }

    fn update_tracker(&mut self) {
        let map = self.game.map();
        let pursuer = self.game.pursuer();
        let seed = substream_seed(self.game.config().seed, "filter");
        if self.game.detected() {
            let evader = self.game.evader();
            let reinit = match &mut self.tracker {
                Some(set) => set.reinitialize_around(map, &evader, &self.filter),
                None => ParticleSet::initialize_around(map, &evader, &self.filter, seed).map(|s| self.tracker = Some(s)),
            };
            if let Err(err) = reinit {
                log::debug!("tracker reset failed: {err}");
            }
            return;
        }
        if self.tracker.is_none() {
            self.tracker = ParticleSet::initialize_uniform(map, &self.filter, seed).ok();
            // the spawn state has nothing more to add
            if self.game.tick() == 0 {
                return;
            }
        }
        let Some(set) = &mut self.tracker else { return };
        set.predict(self.game.config().dt, map, &self.filter);
        if let Ok(region) = compute_visibility(map, &pursuer, &self.game.config().sensor) {
            if let Err(err) = set.update_weights(map, &region, false, &self.filter) {
                log::debug!("tracker update failed: {err}");
            }
        }
        if let Err(err) = set.maybe_resample(&self.filter) {
            log::debug!("tracker resample skipped: {err}");
        }
    }

    fn pursuer_belief(&self) -> (Option<Pose>, Option<&ParticleSet>) {
        match self.human {
            Role::Pursuer => (self.tracker.as_ref().map(|s| s.estimate()), self.tracker.as_ref()),
            Role::Evader => {
                let estimate = self
                    .game
                    .records()
                    .last()
                    .filter(|r| r.pursuer_mode == PursuerMode::Estimate)
                    .and_then(|r| r.filter_estimate);
                (estimate, self.game.pursuer_particles())
            }
        }
    }

    /// The current state as seen from `view`.
    ///
    /// The evader side sees both agents and the pursuer's visibility region.
    /// The pursuer side sees the evader only while detecting it, plus its
    /// camera observation and its belief. Spectators see everything.
    pub fn frame(&self, view: ViewRole) -> StateFrame {
        let game = self.game();
        let config = game.config();
        let pursuer = game.pursuer();
        let evader = game.evader();
        let detected = game.detected();
        let overlay_cells = compute_visibility(game.map(), &pursuer, &config.sensor)
            .map(|r| r.to_pairs())
            .unwrap_or_default();
        let observation = if detected {
            project_to_image(&pursuer, &evader, &config.sensor, config.camera.w_i, config.camera.target_radius).ok()
        } else {
            None
        };
        let (estimate, particles) = self.pursuer_belief();
        let mut frame = StateFrame {
            tick: game.tick(),
            total_ticks: game.total_ticks(),
            status: self.status,
            detected,
            success_rate: game.success_rate(),
            time_left: (game.total_ticks() - game.tick()) as f64 * config.dt,
            poses: Poses {
                pursuer: Some(pursuer),
                evader: Some(evader),
            },
            overlay_cells,
            observation: None,
            estimate: None,
            particles: None,
        };
        match view {
            ViewRole::Evader => {}
            ViewRole::Pursuer => {
                if !detected {
                    frame.poses.evader = None;
                }
                frame.observation = observation;
                frame.estimate = estimate;
            }
            ViewRole::Spectator => {
                frame.observation = observation;
                frame.estimate = estimate;
                if self.config.show_particles {
                    frame.particles = particles.map(|p| p.to_rows());
                }
            }
        }
        frame
    }

    pub fn summary(&self) -> EpisodeSummary {
        let result = self.game.result();
        EpisodeSummary {
            session_id: self.id.clone(),
            seed: result.seed,
            config_digest: result.config_digest.clone(),
            success_rate: result.success_rate,
            detected_ticks: result.detected_ticks,
            ticks_played: result.ticks.len(),
            total_ticks: self.game.total_ticks(),
            completed: self.completed,
            result,
        }
    }
}
