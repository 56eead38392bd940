//! Pursuer visibility region by ray casting, a brute-force per-cell checker,
//! and the geometric detection test.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{normalize_angle, Cell, GridMap, Point, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum VisibilityError {
    #[error("pose ({x:.3}, {y:.3}) is outside the map or inside an obstacle")]
    InvalidPose { x: f64, y: f64 },
    #[error("invalid sensor model: {0}")]
    InvalidSensor(&'static str),
}

/// Forward-facing range sensor with a symmetric angular wedge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    /// Total angular width of the wedge, radians.
    pub fov: f64,
    pub dist_min: f64,
    pub dist_max: f64,
    /// Ray spacing, radians.
    pub angle_step: f64,
    /// Sample spacing along a ray, meters.
    pub distance_step: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            fov: PI / 3.0,
            dist_min: 0.45,
            dist_max: 4.0,
            angle_step: 0.0016,
            distance_step: 0.05,
        }
    }
}

impl SensorModel {
    pub fn theta_min_camera(&self) -> f64 {
        -self.fov / 2.0
    }

    pub fn theta_max_camera(&self) -> f64 {
        self.fov / 2.0
    }

    pub fn validate(&self) -> Result<(), VisibilityError> {
        if !(self.fov > 0.0 && self.fov <= 2.0 * PI) {
            return Err(VisibilityError::InvalidSensor("fov must lie in (0, 2pi]"));
        }
        if !(self.dist_min >= 0.0 && self.dist_min < self.dist_max) {
            return Err(VisibilityError::InvalidSensor("need 0 <= dist_min < dist_max"));
        }
        if !(self.angle_step > 0.0 && self.distance_step > 0.0) {
            return Err(VisibilityError::InvalidSensor("steps must be positive"));
        }
        Ok(())
    }

    /// Range and bearing conditions only (no occlusion).
    pub fn in_wedge(&self, from: &Pose, target: Point) -> bool {
        let dx = target.x - from.x;
        let dy = target.y - from.y;
        let dist = dx.hypot(dy);
        if dist < self.dist_min || dist > self.dist_max {
            return false;
        }
        if self.fov >= 2.0 * PI {
            return true;
        }
        let bearing = normalize_angle(dy.atan2(dx) - from.theta);
        bearing.abs() <= self.fov / 2.0
    }
}

/// Cells the pursuer can see from `source_pose`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityRegion {
    cells: Vec<Cell>,
    member: Vec<bool>,
    width: usize,
    source_pose: Pose,
    sensor: SensorModel,
}

impl VisibilityRegion {
    /// Sorted by `(row, col)`.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn source_pose(&self) -> Pose {
        self.source_pose
    }

    pub fn sensor(&self) -> &SensorModel {
        &self.sensor
    }

    #[inline]
    pub fn contains(&self, cell: Cell) -> bool {
        cell.col < self.width
            && self
                .member
                .get(cell.row * self.width + cell.col)
                .copied()
                .unwrap_or(false)
    }

    #[inline]
    pub fn contains_index(&self, index: usize) -> bool {
        self.member.get(index).copied().unwrap_or(false)
    }

    pub fn contains_point(&self, map: &GridMap, p: Point) -> bool {
        map.try_cell(p).is_some_and(|c| self.contains(c))
    }

    /// Wire form: sorted `[row, col]` pairs.
    pub fn to_pairs(&self) -> Vec<[usize; 2]> {
        self.cells.iter().map(|c| [c.row, c.col]).collect()
    }
}

fn check_pose(map: &GridMap, pose: &Pose) -> Result<(), VisibilityError> {
    if map.is_free_point(pose.position()) {
        Ok(())
    } else {
        Err(VisibilityError::InvalidPose {
            x: pose.x,
            y: pose.y,
        })
    }
}

/// Ray-cast visibility region.
///
/// Rays are spaced `angle_step` apart, symmetric about the heading, and cover
/// the whole wedge. Along each ray points are sampled every `distance_step`
/// from `dist_min` to `dist_max`; a ray stops at the first sample that falls in
/// an occupied cell or leaves the map. Cells hit by a sample are kept when the
/// straight line from the pursuer to their center is unobstructed.
pub fn compute_visibility(
    map: &GridMap,
    pose: &Pose,
    sensor: &SensorModel,
) -> Result<VisibilityRegion, VisibilityError> {
    sensor.validate()?;
    check_pose(map, pose)?;

    let half = sensor.fov / 2.0;
    let rays_per_side = (half / sensor.angle_step + 1e-9).floor() as i64;
    let samples = if sensor.dist_max.is_finite() {
        ((sensor.dist_max - sensor.dist_min) / sensor.distance_step + 1e-9).floor() as usize + 1
    } else {
        usize::MAX
    };

    let mut hit = vec![false; map.len()];
    for i in -rays_per_side..=rays_per_side {
        let angle = pose.theta + i as f64 * sensor.angle_step;
        let (sin, cos) = angle.sin_cos();
        for j in 0..samples {
            let dist = sensor.dist_min + j as f64 * sensor.distance_step;
            let pt = Point::new(pose.x + dist * cos, pose.y + dist * sin);
            let Some(cell) = map.try_cell(pt) else { break };
            let idx = map.index(cell);
            if map.is_occupied_index(idx) {
                break;
            }
            hit[idx] = true;
        }
    }

    let origin = pose.position();
    let mut cells = Vec::new();
    for (idx, flag) in hit.iter_mut().enumerate() {
        if !*flag {
            continue;
        }
        let cell = map.cell_at(idx);
        if map.supercover(origin, map.cell_to_world(cell), |c| map.is_free(c)) {
            cells.push(cell);
        } else {
            *flag = false;
        }
    }

    Ok(VisibilityRegion {
        cells,
        member: hit,
        width: map.width(),
        source_pose: *pose,
        sensor: *sensor,
    })
}

/// Independent per-cell check: a free cell is visible iff its center is in
/// range, inside the wedge, and in line of sight.
pub fn visibility_oracle(
    map: &GridMap,
    pose: &Pose,
    sensor: &SensorModel,
) -> Result<Vec<Cell>, VisibilityError> {
    sensor.validate()?;
    check_pose(map, pose)?;
    let origin = pose.position();
    Ok(map
        .free_cells()
        .into_iter()
        .filter(|&c| {
            let center = map.cell_to_world(c);
            sensor.in_wedge(pose, center) && map.line_of_sight(origin, center).unwrap_or(false)
        })
        .collect())
}

/// Exact detection test on the evader's position.
pub fn is_detected(
    map: &GridMap,
    pursuer: &Pose,
    evader: &Pose,
    sensor: &SensorModel,
) -> Result<bool, VisibilityError> {
    check_pose(map, pursuer)?;
    check_pose(map, evader)?;
    let target = evader.position();
    Ok(sensor.in_wedge(pursuer, target)
        && map.line_of_sight(pursuer.position(), target).unwrap_or(false))
}
