//! Pursuer and evader behaviours.
//!
//! The smart evader picks, every tick, the free cell outside the pursuer's
//! visibility region that minimizes `path distance from the evader / straight
//! distance from the pursuer`, and drives there. The smart pursuer follows the
//! evader with the image-space controller while it is detected and otherwise
//! drives toward the particle filter's estimate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Cell, GridMap, Pose};
use crate::navigation::{
    clear_speed, distance_field, follow_path, plan_path_on, project_to_image, reachable_from, reactive_control,
    ControlCommand, FollowParams, NavGrid, Path, ReactiveGains,
};
use crate::particle_filter::{FilterConfig, FilterError, ParticleSet};
use crate::visibility::{compute_visibility, SensorModel, VisibilityError, VisibilityRegion};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Visibility(#[from] VisibilityError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("evader is outside the map")]
    EvaderOutOfBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pursuer,
    Evader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Random,
    Smart,
}

impl Behavior {
    pub fn letter(self) -> char {
        match self {
            Behavior::Random => 'R',
            Behavior::Smart => 'S',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: Role,
    pub behavior: Behavior,
    pub v_max: f64,
    pub radius: f64,
    pub omega_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EscapeParams {
    /// Candidates closer than this to the evader are ignored, meters.
    pub r_exclude: f64,
    /// Consider every `stride`-th free cell (row-major order).
    pub stride: usize,
}

impl Default for EscapeParams {
    fn default() -> Self {
        Self {
            r_exclude: 0.5,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeCandidate {
    pub cell: Cell,
    /// Evader travel distance along the grid, meters.
    pub cost_effort: f64,
    /// Straight-line distance from the pursuer, meters.
    pub cost_dist: f64,
    pub cost_escape: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeGoal {
    pub cell: Cell,
    /// The winning candidate; `None` on the fallback branch.
    pub candidate: Option<EscapeCandidate>,
    /// The pursuer sees every candidate; the goal is simply the free cell
    /// farthest from the pursuer.
    pub fallback: bool,
}

/// Escape goal for the evader given the pursuer's exact pose.
pub fn compute_escape_goal(
    map: &GridMap,
    nav: &NavGrid,
    pursuer: &Pose,
    evader: &Pose,
    sensor: &SensorModel,
    params: &EscapeParams,
) -> Result<EscapeGoal, AgentError> {
    let region = compute_visibility(map, pursuer, sensor)?;
    escape_goal_in(map, nav, &region, pursuer, evader, params)
}

/// As [`compute_escape_goal`] with the pursuer's region already computed.
/// Ties on cost go to the lowest row-major cell.
pub fn escape_goal_in(
    map: &GridMap,
    nav: &NavGrid,
    region: &VisibilityRegion,
    pursuer: &Pose,
    evader: &Pose,
    params: &EscapeParams,
) -> Result<EscapeGoal, AgentError> {
    let evader_cell = map
        .try_cell(evader.position())
        .ok_or(AgentError::EvaderOutOfBounds)?;
    let effort = distance_field(nav, map.index(evader_cell));
    let res = map.resolution();
    let pursuer_at = pursuer.position();
    let evader_at = evader.position();
    let stride = params.stride.max(1);

    let mut best: Option<EscapeCandidate> = None;
    let free = (0..map.len()).filter(|&i| !map.is_occupied_index(i));
    for idx in free.step_by(stride) {
        if region.contains_index(idx) {
            continue;
        }
        let cell = map.cell_at(idx);
        let center = map.cell_to_world(cell);
        if center.distance(&evader_at) < params.r_exclude {
            continue;
        }
        let Some(steps) = effort[idx] else { continue };
        let cost_dist = center.distance(&pursuer_at);
        if cost_dist <= 0.0 {
            continue;
        }
        let cost_effort = steps.value() * res;
        let cost_escape = cost_effort / cost_dist;
        if best.is_none_or(|b| cost_escape < b.cost_escape) {
            best = Some(EscapeCandidate {
                cell,
                cost_effort,
                cost_dist,
                cost_escape,
            });
        }
    }

    if let Some(candidate) = best {
        return Ok(EscapeGoal {
            cell: candidate.cell,
            candidate: Some(candidate),
            fallback: false,
        });
    }
    let mut far: Option<(Cell, f64)> = None;
    for cell in map.free_cells() {
        let d = map.cell_to_world(cell).distance(&pursuer_at);
        if far.is_none_or(|(_, best)| d > best) {
            far = Some((cell, d));
        }
    }
    Ok(EscapeGoal {
        cell: far.map_or(evader_cell, |(c, _)| c),
        candidate: None,
        fallback: true,
    })
}

/// What a pursuer is doing this tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PursuerMode {
    Reactive,
    Estimate,
    Random,
    Scripted,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Drive(ControlCommand),
    /// Test hook: place the agent directly.
    Teleport(Pose),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub mode: Option<PursuerMode>,
    pub estimate: Option<Pose>,
}

impl Decision {
    pub fn drive(cmd: ControlCommand) -> Self {
        Self {
            action: Action::Drive(cmd),
            mode: None,
            estimate: None,
        }
    }
}

/// Everything an agent may look at when choosing its move.
#[derive(Debug, Clone, Copy)]
pub struct WorldView<'a> {
    pub map: &'a GridMap,
    pub nav: &'a NavGrid,
    pub sensor: &'a SensorModel,
    pub tick: usize,
    pub dt: f64,
    pub me: Pose,
    pub spec: AgentSpec,
    /// The evader always knows the pursuer's pose; the pursuer only gets the
    /// evader's pose while it detects it.
    pub opponent: Option<Pose>,
}

pub trait Policy: Send {
    /// Called once with the spawn state, before the first tick.
    fn begin(&mut self, _view: &WorldView<'_>) {}

    fn decide(&mut self, view: &WorldView<'_>, rng: &mut ChaCha8Rng) -> Decision;

    /// Belief over the opponent, if the policy keeps one.
    fn particles(&self) -> Option<&ParticleSet> {
        None
    }
}

fn follow_clear(view: &WorldView<'_>, path: &Path, follow: &FollowParams) -> ControlCommand {
    let cmd = follow_path(&view.me, path, view.spec.v_max, view.dt, follow);
    clear_speed(&view.me, cmd, view.dt, view.map, view.spec.radius)
}

/// Plans to `goal`; when the goal is unreachable, to the reachable open cell
/// nearest to it. `None` when the agent is boxed in.
fn plan_or_nearest(map: &GridMap, nav: &NavGrid, me: &Pose, goal: Cell) -> Option<Path> {
    let start = map.try_cell(me.position())?;
    if let Ok(path) = plan_path_on(map, nav, me.position(), map.cell_to_world(goal)) {
        return Some(path);
    }
    let reach = reachable_from(nav, map.index(start));
    let target = map.cell_to_world(goal);
    let mut best: Option<(usize, f64)> = None;
    for (idx, &ok) in reach.iter().enumerate() {
        if !ok || nav.is_blocked_index(idx) {
            continue;
        }
        let d = map.cell_to_world(map.cell_at(idx)).distance(&target);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((idx, d));
        }
    }
    let (idx, _) = best?;
    plan_path_on(map, nav, me.position(), map.cell_to_world(map.cell_at(idx))).ok()
}

/// Wanders between uniformly drawn waypoints.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    follow: FollowParams,
    arrival_radius: f64,
    stall_limit: usize,
    waypoint: Option<Cell>,
    path: Option<Path>,
    best_distance: f64,
    stalled: usize,
    history: Vec<Cell>,
}

impl RandomPolicy {
    pub fn new(follow: FollowParams) -> Self {
        Self {
            follow,
            arrival_radius: 0.3,
            stall_limit: 20,
            waypoint: None,
            path: None,
            best_distance: f64::INFINITY,
            stalled: 0,
            history: Vec::new(),
        }
    }

    /// Every waypoint drawn so far.
    pub fn waypoints(&self) -> &[Cell] {
        &self.history
    }

    fn pick_waypoint(&mut self, view: &WorldView<'_>, rng: &mut ChaCha8Rng) {
        self.waypoint = None;
        self.path = None;
        self.best_distance = f64::INFINITY;
        self.stalled = 0;
        let Some(start) = view.map.try_cell(view.me.position()) else {
            return;
        };
        let reach = reachable_from(view.nav, view.map.index(start));
        let options: Vec<usize> = (0..reach.len())
            .filter(|&i| reach[i] && !view.nav.is_blocked_index(i) && !view.map.is_occupied_index(i))
            .collect();
        if options.is_empty() {
            return;
        }
        let cell = view.map.cell_at(options[rng.random_range(0..options.len())]);
        self.path = plan_path_on(view.map, view.nav, view.me.position(), view.map.cell_to_world(cell)).ok();
        self.waypoint = Some(cell);
        self.history.push(cell);
    }
}

impl Policy for RandomPolicy {
    fn decide(&mut self, view: &WorldView<'_>, rng: &mut ChaCha8Rng) -> Decision {
        let distance = |wp: Cell| view.map.cell_to_world(wp).distance(&view.me.position());
        let needs_new = match self.waypoint {
            None => true,
            Some(wp) => {
                let d = distance(wp);
                if d < self.best_distance - 1e-3 {
                    self.best_distance = d;
                    self.stalled = 0;
                } else {
                    self.stalled += 1;
                }
                d <= self.arrival_radius || self.stalled >= self.stall_limit || self.path.is_none()
            }
        };
        if needs_new {
            self.pick_waypoint(view, rng);
            if let Some(wp) = self.waypoint {
                self.best_distance = distance(wp);
            }
        }
        let cmd = match &self.path {
            Some(path) => follow_clear(view, path, &self.follow),
            None => ControlCommand::HOLD,
        };
        Decision {
            action: Action::Drive(cmd),
            mode: (view.spec.role == Role::Pursuer).then_some(PursuerMode::Random),
            estimate: None,
        }
    }
}

/// Visibility-aware evader.
#[derive(Debug, Clone)]
pub struct SmartEvader {
    escape: EscapeParams,
    follow: FollowParams,
    last_goal: Option<EscapeGoal>,
}

impl SmartEvader {
    pub fn new(escape: EscapeParams, follow: FollowParams) -> Self {
        Self {
            escape,
            follow,
            last_goal: None,
        }
    }

    pub fn last_goal(&self) -> Option<&EscapeGoal> {
        self.last_goal.as_ref()
    }
}

impl Policy for SmartEvader {
    fn decide(&mut self, view: &WorldView<'_>, _rng: &mut ChaCha8Rng) -> Decision {
        let Some(pursuer) = view.opponent else {
            return Decision::drive(ControlCommand::HOLD);
        };
        let Ok(region) = compute_visibility(view.map, &pursuer, view.sensor) else {
            return Decision::drive(ControlCommand::HOLD);
        };
        let seen = region.contains_point(view.map, view.me.position());
        let d_safe = 2.0 * view.sensor.dist_max;
        if !seen && pursuer.position().distance(&view.me.position()) > d_safe {
            self.last_goal = None;
            return Decision::drive(ControlCommand::HOLD);
        }
        let Ok(goal) = escape_goal_in(view.map, view.nav, &region, &pursuer, &view.me, &self.escape) else {
            return Decision::drive(ControlCommand::HOLD);
        };
        self.last_goal = Some(goal);
        let cmd = match plan_path_on(view.map, view.nav, view.me.position(), view.map.cell_to_world(goal.cell)) {
            Ok(path) => follow_clear(view, &path, &self.follow),
            Err(_) => ControlCommand::HOLD,
        };
        Decision::drive(cmd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraParams {
    /// Image width, pixels.
    pub w_i: f64,
    /// Radius of the evader's silhouette, meters.
    pub target_radius: f64,
}

impl Default for CameraParams {
    fn default() -> Self {
        Self {
            w_i: 640.0,
            target_radius: 0.25,
        }
    }
}

/// Hybrid pursuer: reactive image-space following while the evader is
/// detected, particle-filter search otherwise.
#[derive(Debug, Clone)]
pub struct SmartPursuer {
    filter_config: FilterConfig,
    gains: ReactiveGains,
    follow: FollowParams,
    camera: CameraParams,
    filter_seed: u64,
    filter: Option<ParticleSet>,
    goal: Option<Cell>,
    path: Option<Path>,
}

impl SmartPursuer {
    pub fn new(
        filter_config: FilterConfig,
        gains: ReactiveGains,
        follow: FollowParams,
        camera: CameraParams,
        filter_seed: u64,
    ) -> Self {
        Self {
            filter_config,
            gains,
            follow,
            camera,
            filter_seed,
            filter: None,
            goal: None,
            path: None,
        }
    }

    fn track(&mut self, view: &WorldView<'_>, evader: Pose) -> Decision {
        let reinit = match &mut self.filter {
            Some(set) => set.reinitialize_around(view.map, &evader, &self.filter_config),
            None => ParticleSet::initialize_around(view.map, &evader, &self.filter_config, self.filter_seed)
                .map(|set| self.filter = Some(set)),
        };
        if let Err(err) = reinit {
            log::debug!("filter reinitialization failed: {err}");
        }
        self.goal = None;
        self.path = None;
        let cmd = project_to_image(&view.me, &evader, view.sensor, self.camera.w_i, self.camera.target_radius)
            .map(|obs| reactive_control(&obs, view.spec.v_max, &self.gains))
            .unwrap_or(ControlCommand::HOLD);
        Decision {
            action: Action::Drive(cmd),
            mode: Some(PursuerMode::Reactive),
            estimate: None,
        }
    }

    fn search(&mut self, view: &WorldView<'_>) -> Decision {
        if self.filter.is_none() {
            match ParticleSet::initialize_uniform(view.map, &self.filter_config, self.filter_seed) {
                Ok(set) => self.filter = Some(set),
                Err(_) => return Decision::drive(ControlCommand::HOLD),
            }
        }
        let filter = self.filter.as_mut().expect("initialized above");
        filter.predict(view.dt, view.map, &self.filter_config);
        if let Ok(region) = compute_visibility(view.map, &view.me, view.sensor) {
            if let Err(err) = filter.update_weights(view.map, &region, false, &self.filter_config) {
                log::debug!("filter update failed: {err}");
            }
        }
        if let Err(err) = filter.maybe_resample(&self.filter_config) {
            log::debug!("resampling skipped: {err}");
        }
        let estimate = filter.estimate();
        let goal = view.map.try_cell(estimate.position());
        if goal.is_some() && (goal != self.goal || self.path.is_none()) {
            self.goal = goal;
            self.path = goal.and_then(|g| plan_or_nearest(view.map, view.nav, &view.me, g));
        }
        let mut cmd = match &self.path {
            Some(path) => follow_clear(view, path, &self.follow),
            None => ControlCommand::HOLD,
        };
        if cmd == ControlCommand::HOLD {
            // nothing left to drive to: sweep the camera around instead
            cmd.omega = view.spec.omega_max;
        }
        Decision {
            action: Action::Drive(cmd),
            mode: Some(PursuerMode::Estimate),
            estimate: Some(estimate),
        }
    }
}

impl Policy for SmartPursuer {
    fn begin(&mut self, view: &WorldView<'_>) {
        if let Some(evader) = view.opponent {
            self.filter =
                ParticleSet::initialize_around(view.map, &evader, &self.filter_config, self.filter_seed).ok();
        }
    }

    fn decide(&mut self, view: &WorldView<'_>, _rng: &mut ChaCha8Rng) -> Decision {
        match view.opponent {
            Some(evader) => self.track(view, evader),
            None => self.search(view),
        }
    }

    fn particles(&self) -> Option<&ParticleSet> {
        self.filter.as_ref()
    }
}

/// Replays a fixed list of actions, then holds.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    actions: Vec<Action>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, cursor: 0 }
    }

    /// Repeats one command for `ticks` ticks.
    pub fn constant(cmd: ControlCommand, ticks: usize) -> Self {
        Self::new(vec![Action::Drive(cmd); ticks])
    }
}

impl Policy for ScriptedPolicy {
    fn decide(&mut self, view: &WorldView<'_>, _rng: &mut ChaCha8Rng) -> Decision {
        let action = self
            .actions
            .get(self.cursor)
            .copied()
            .unwrap_or(Action::Drive(ControlCommand::HOLD));
        self.cursor += 1;
        Decision {
            action,
            mode: (view.spec.role == Role::Pursuer).then_some(PursuerMode::Scripted),
            estimate: None,
        }
    }
}
