//! Grid path planning, unicycle kinematics, and the image-space follow controller.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{normalize_angle, Cell, GridMap, Point, Pose};
use crate::visibility::SensorModel;

#[derive(Debug, Error, PartialEq)]
pub enum NavError {
    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: Cell, goal: Cell },
    #[error("point ({x:.3}, {y:.3}) lies outside the map")]
    OutOfBounds { x: f64, y: f64 },
    #[error("target is not inside the sensor wedge")]
    NotDetected,
    #[error("pinhole projection needs fov < pi")]
    FovTooWide,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    /// Forward speed, m/s.
    pub v: f64,
    /// Turn rate, rad/s, counter-clockwise positive.
    pub omega: f64,
}

impl ControlCommand {
    pub const HOLD: Self = Self { v: 0.0, omega: 0.0 };

    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    /// Clamps into `|v| <= v_max`, `|omega| <= omega_max`. Non-finite values become 0.
    pub fn clamped(self, v_max: f64, omega_max: f64) -> Self {
        let fix = |x: f64| if x.is_finite() { x } else { 0.0 };
        Self {
            v: fix(self.v).clamp(-v_max, v_max),
            omega: fix(self.omega).clamp(-omega_max, omega_max),
        }
    }
}

/// Synthetic bounding box of the target in a single-row pinhole image.
/// Image x grows to the right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageObservation {
    pub x_b: f64,
    pub w_b: f64,
    pub w_i: f64,
    pub depth: f64,
}

impl ImageObservation {
    /// Horizontal offset of the box center from the image center, pixels.
    pub fn target_offset_x(&self) -> f64 {
        self.x_b + self.w_b / 2.0 - self.w_i / 2.0
    }
}

/// Obstacles grown by the agent radius. A cell is blocked when a disc of that
/// radius at its center would touch an obstacle or leave the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NavGrid {
    blocked: Vec<bool>,
    width: usize,
    height: usize,
}

impl NavGrid {
    pub fn new(map: &GridMap, inflation_radius: f64) -> Self {
        let blocked = (0..map.len())
            .map(|i| {
                map.is_occupied_index(i)
                    || (inflation_radius > 0.0
                        && map.disc_collides(map.cell_to_world(map.cell_at(i)), inflation_radius))
            })
            .collect();
        Self {
            blocked,
            width: map.width(),
            height: map.height(),
        }
    }

    #[inline]
    pub fn is_blocked_index(&self, index: usize) -> bool {
        self.blocked[index]
    }

    #[inline]
    pub fn is_blocked(&self, cell: Cell) -> bool {
        self.blocked[cell.row * self.width + cell.col]
    }

    pub fn len(&self) -> usize {
        self.blocked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocked.is_empty()
    }

    /// 8-connected moves out of `index`. Diagonals need both orthogonal
    /// neighbours open so paths never squeeze between touching corners.
    pub fn moves(&self, index: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        let (row, col) = ((index / self.width) as i64, (index % self.width) as i64);
        const OFFSETS: [(i64, i64); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        let open = move |r: i64, c: i64| {
            r >= 0
                && c >= 0
                && (r as usize) < self.height
                && (c as usize) < self.width
                && !self.blocked[r as usize * self.width + c as usize]
        };
        OFFSETS.iter().filter_map(move |&(dr, dc)| {
            let (r, c) = (row + dr, col + dc);
            if !open(r, c) {
                return None;
            }
            let diagonal = dr != 0 && dc != 0;
            if diagonal && !(open(row + dr, col) && open(row, col + dc)) {
                return None;
            }
            Some((r as usize * self.width + c as usize, diagonal))
        })
    }
}

/// Path length as straight and diagonal step counts; the value is
/// `straight + diagonal * sqrt(2)` cells. Ordering by value is exact for any
/// realistic grid because distinct count pairs never share a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepCount {
    pub straight: u32,
    pub diagonal: u32,
}

impl StepCount {
    #[inline]
    pub fn value(&self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * SQRT_2
    }

    #[inline]
    pub fn step(self, diagonal: bool) -> Self {
        if diagonal {
            Self {
                diagonal: self.diagonal + 1,
                ..self
            }
        } else {
            Self {
                straight: self.straight + 1,
                ..self
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    cells: Vec<Cell>,
    waypoints: Vec<Point>,
    steps: StepCount,
}

impl Path {
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn waypoints(&self) -> &[Point] {
        &self.waypoints
    }

    pub fn goal(&self) -> Point {
        *self.waypoints.last().expect("paths are never empty")
    }

    /// Cost in cell units (1 per straight step, sqrt 2 per diagonal).
    pub fn cost(&self) -> f64 {
        self.steps.value()
    }

    pub fn steps(&self) -> StepCount {
        self.steps
    }

    /// A path that stays at one point.
    pub fn single(map: &GridMap, cell: Cell) -> Self {
        Self {
            cells: vec![cell],
            waypoints: vec![map.cell_to_world(cell)],
            steps: StepCount::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    f: f64,
    index: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.f
            .total_cmp(&other.f)
            .then_with(|| self.index.cmp(&other.index))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dr = a.row.abs_diff(b.row) as f64;
    let dc = a.col.abs_diff(b.col) as f64;
    let (lo, hi) = if dr < dc { (dr, dc) } else { (dc, dr) };
    (hi - lo) + SQRT_2 * lo
}

/// A* over `map` with obstacles inflated by `inflation_radius`.
pub fn plan_path(map: &GridMap, start: Point, goal: Point, inflation_radius: f64) -> Result<Path, NavError> {
    plan_path_on(map, &NavGrid::new(map, inflation_radius), start, goal)
}

/// A* on a prepared [`NavGrid`]. The start cell may itself be blocked (an
/// agent hugging a wall can always leave); the goal cell may not.
/// Ties on `f` expand the lower row-major index first.
pub fn plan_path_on(map: &GridMap, nav: &NavGrid, start: Point, goal: Point) -> Result<Path, NavError> {
    let oob = |p: Point| NavError::OutOfBounds { x: p.x, y: p.y };
    let start_cell = map.try_cell(start).ok_or_else(|| oob(start))?;
    let goal_cell = map.try_cell(goal).ok_or_else(|| oob(goal))?;
    let no_path = NavError::NoPath {
        start: start_cell,
        goal: goal_cell,
    };
    if start_cell == goal_cell {
        return Ok(Path::single(map, start_cell));
    }
    if nav.is_blocked(goal_cell) {
        return Err(no_path);
    }

    let n = map.len();
    let start_idx = map.index(start_cell);
    let goal_idx = map.index(goal_cell);
    let mut g: Vec<Option<StepCount>> = vec![None; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[start_idx] = Some(StepCount::default());
    open.push(Reverse(Frontier {
        f: octile(start_cell, goal_cell),
        index: start_idx,
    }));

    while let Some(Reverse(Frontier { index, .. })) = open.pop() {
        if closed[index] {
            continue;
        }
        closed[index] = true;
        if index == goal_idx {
            break;
        }
        let here = g[index].expect("queued nodes have a cost");
        for (next, diagonal) in nav.moves(index) {
            if closed[next] {
                continue;
            }
            let candidate = here.step(diagonal);
            if g[next].is_none_or(|old| candidate.value() < old.value()) {
                g[next] = Some(candidate);
                parent[next] = index;
                open.push(Reverse(Frontier {
                    f: candidate.value() + octile(map.cell_at(next), goal_cell),
                    index: next,
                }));
            }
        }
    }

    let Some(steps) = g[goal_idx] else {
        return Err(no_path);
    };
    let mut cells = vec![goal_cell];
    let mut at = goal_idx;
    while at != start_idx {
        at = parent[at];
        cells.push(map.cell_at(at));
    }
    cells.reverse();
    let waypoints = cells.iter().map(|&c| map.cell_to_world(c)).collect();
    Ok(Path {
        cells,
        waypoints,
        steps,
    })
}

/// Dijkstra distances from `source` over the open cells of `nav`. The source
/// is expanded even when it is blocked. `None` marks unreachable cells.
pub fn distance_field(nav: &NavGrid, source: usize) -> Vec<Option<StepCount>> {
    let mut dist: Vec<Option<StepCount>> = vec![None; nav.len()];
    let mut done = vec![false; nav.len()];
    let mut open = BinaryHeap::new();
    dist[source] = Some(StepCount::default());
    open.push(Reverse(Frontier { f: 0.0, index: source }));
    while let Some(Reverse(Frontier { index, .. })) = open.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        let here = dist[index].expect("queued nodes have a distance");
        for (next, diagonal) in nav.moves(index) {
            let candidate = here.step(diagonal);
            if !done[next] && dist[next].is_none_or(|old| candidate.value() < old.value()) {
                dist[next] = Some(candidate);
                open.push(Reverse(Frontier {
                    f: candidate.value(),
                    index: next,
                }));
            }
        }
    }
    dist
}

/// Cells reachable from `source` (flood fill over open cells).
pub fn reachable_from(nav: &NavGrid, source: usize) -> Vec<bool> {
    let mut seen = vec![false; nav.len()];
    let mut stack = vec![source];
    seen[source] = true;
    while let Some(idx) = stack.pop() {
        for (next, _) in nav.moves(idx) {
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen
}

/// One tick of unicycle motion: rotate by `omega * dt`, then translate along
/// the new heading. If the swept disc would hit an obstacle the position is
/// kept and only the heading changes.
pub fn step_unicycle(pose: &Pose, cmd: ControlCommand, dt: f64, map: &GridMap, radius: f64) -> Pose {
    let theta = normalize_angle(pose.theta + cmd.omega * dt);
    let x = pose.x + cmd.v * theta.cos() * dt;
    let y = pose.y + cmd.v * theta.sin() * dt;
    let from = pose.position();
    let to = Point::new(x, y);
    let blocked = if radius > 0.0 {
        map.swept_disc_collides(from, to, radius)
    } else {
        !map.contains_point(to) || !map.supercover(from, to, |c| map.is_free(c))
    };
    if blocked {
        Pose {
            x: pose.x,
            y: pose.y,
            theta,
        }
    } else {
        Pose { x, y, theta }
    }
}

/// Pinhole projection of a disc-shaped target onto a `w_i`-pixel image row.
/// Targets to the left of the heading (positive bearing) land left of center.
pub fn project_to_image(
    pursuer: &Pose,
    evader: &Pose,
    sensor: &SensorModel,
    w_i: f64,
    target_radius: f64,
) -> Result<ImageObservation, NavError> {
    if sensor.fov >= PI {
        return Err(NavError::FovTooWide);
    }
    if !sensor.in_wedge(pursuer, evader.position()) {
        return Err(NavError::NotDetected);
    }
    let dx = evader.x - pursuer.x;
    let dy = evader.y - pursuer.y;
    let depth = dx.hypot(dy);
    let bearing = normalize_angle(dy.atan2(dx) - pursuer.theta);
    let half_tan = (sensor.fov / 2.0).tan();
    let center = bearing_to_pixel(bearing, sensor.fov, w_i);
    let half_angle = (target_radius / depth).atan();
    let w_b = (w_i * half_angle.tan() / half_tan).clamp(1.0, w_i);
    Ok(ImageObservation {
        x_b: center - w_b / 2.0,
        w_b,
        w_i,
        depth,
    })
}

/// Image column of a bearing: `0` at `+fov/2` (left edge), `w_i` at `-fov/2`.
pub fn bearing_to_pixel(bearing: f64, fov: f64, w_i: f64) -> f64 {
    (w_i / 2.0) * (1.0 - bearing.tan() / (fov / 2.0).tan())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactiveGains {
    pub k_omega: f64,
    pub k_v: f64,
    /// Distance the follower tries to hold, meters.
    pub standoff: f64,
    pub omega_max: f64,
}

impl Default for ReactiveGains {
    fn default() -> Self {
        Self {
            k_omega: 1.0,
            k_v: 0.8,
            standoff: 1.5,
            omega_max: PI / 2.0,
        }
    }
}

/// Keeps the box centered and the range at `standoff`.
pub fn reactive_control(obs: &ImageObservation, v_max: f64, gains: &ReactiveGains) -> ControlCommand {
    let offset = obs.target_offset_x();
    let omega = (-gains.k_omega * offset / (obs.w_i / 2.0)).clamp(-gains.omega_max, gains.omega_max);
    let v = (gains.k_v * (obs.depth - gains.standoff)).clamp(0.0, v_max);
    ControlCommand { v, omega }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FollowParams {
    pub lookahead: f64,
    pub k_omega: f64,
    pub omega_max: f64,
    /// Within this distance of the last waypoint the follower stops.
    pub goal_tolerance: f64,
}

impl Default for FollowParams {
    fn default() -> Self {
        Self {
            lookahead: 0.3,
            k_omega: 1.0,
            omega_max: PI / 2.0,
            goal_tolerance: 0.05,
        }
    }
}

/// Pure-pursuit waypoint tracking.
///
/// Steers toward the first waypoint past the closest one that lies beyond the
/// lookahead distance. Speed is scaled by the cosine of the heading error left
/// after this tick's rotation, and capped so the last waypoint is not overshot.
pub fn follow_path(pose: &Pose, path: &Path, v_max: f64, dt: f64, params: &FollowParams) -> ControlCommand {
    let here = pose.position();
    let goal = path.goal();
    let to_goal = here.distance(&goal);
    if to_goal <= params.goal_tolerance {
        return ControlCommand::HOLD;
    }
    let waypoints = path.waypoints();
    let mut nearest = 0;
    let mut best = f64::INFINITY;
    for (i, w) in waypoints.iter().enumerate() {
        let d = here.distance(w);
        if d <= best {
            best = d;
            nearest = i;
        }
    }
    let target = waypoints[nearest..]
        .iter()
        .copied()
        .find(|w| here.distance(w) > params.lookahead)
        .unwrap_or(goal);
    let error = normalize_angle((target.y - pose.y).atan2(target.x - pose.x) - pose.theta);
    let omega = (params.k_omega * error).clamp(-params.omega_max, params.omega_max);
    let residual = error - omega * dt;
    let mut v = v_max * residual.cos().max(0.0);
    if target == goal {
        v = v.min(to_goal / dt);
    }
    ControlCommand { v, omega }
}

/// Backs the forward speed off (halving, a few times, then to zero) until the
/// step no longer runs into an obstacle. The turn rate is kept.
pub fn clear_speed(pose: &Pose, cmd: ControlCommand, dt: f64, map: &GridMap, radius: f64) -> ControlCommand {
    let mut v = cmd.v;
    for _ in 0..6 {
        if v <= 0.0 {
            break;
        }
        let trial = ControlCommand { v, omega: cmd.omega };
        let next = step_unicycle(pose, trial, dt, map, radius);
        if next.x != pose.x || next.y != pose.y {
            return trial;
        }
        v *= 0.5;
    }
    ControlCommand { v: 0.0, omega: cmd.omega }
}
