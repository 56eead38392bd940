//! Occupancy grid workspace.
//!
//! ## Coordinate frames
//!
//! - **Cell coordinates**: `(row, col)` indices. Row 0 is the first line of an
//!   ASCII map document (or the first raster row).
//! - **World coordinates**: meters. `x` grows with `col`, `y` grows with `row`,
//!   and [`GridMap::origin`] is the world position of the outer corner of cell `(0, 0)`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RESOLUTION: f64 = 0.1;

/// Raster pixels darker than this are obstacles.
pub const RASTER_OCCUPIED_BELOW: u8 = 128;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map format error on line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("point ({x:.3}, {y:.3}) lies outside the map")]
    OutOfBounds { x: f64, y: f64 },
    #[error("free space is not connected ({components} components)")]
    Disconnected { components: usize },
    #[error("unknown builtin map `{0}`")]
    UnknownMap(String),
    #[error("raster error: {0}")]
    Raster(String),
}

fn format_err(line: usize, message: impl Into<String>) -> MapError {
    MapError::Format {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Agent state `(x, y, theta)`; `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Point,
    occupied: Vec<bool>,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Point,
        occupied: Vec<bool>,
    ) -> Result<Self, MapError> {
        if width == 0 || height == 0 {
            return Err(format_err(0, "map must have at least one row and one column"));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(format_err(0, format!("resolution must be positive, got {resolution}")));
        }
        if occupied.len() != width * height {
            return Err(format_err(
                0,
                format!("{} cells given for a {width}x{height} grid", occupied.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            occupied,
        })
    }

    /// An obstacle-free grid with the origin at `(0, 0)`.
    pub fn empty(width: usize, height: usize, resolution: f64) -> Result<Self, MapError> {
        Self::new(width, height, resolution, Point::default(), vec![false; width * height])
    }

    /// Parses the ASCII map format: an optional `resolution <float>` header,
    /// then rows of `#` (occupied) and `.` (free).
    pub fn from_ascii(text: &str) -> Result<Self, MapError> {
        let mut resolution = DEFAULT_RESOLUTION;
        let mut width = None;
        let mut occupied = Vec::new();
        let mut height = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if idx == 0 {
                if let Some(rest) = line.strip_prefix("resolution") {
                    resolution = rest
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| format_err(line_no, format!("bad resolution: {e}")))?;
                    if !(resolution > 0.0 && resolution.is_finite()) {
                        return Err(format_err(line_no, "resolution must be positive"));
                    }
                    continue;
                }
            }
            if line.is_empty() {
                // trailing blank lines are tolerated, interior ones are not
                if text.lines().skip(idx).all(|l| l.trim().is_empty()) {
                    break;
                }
                return Err(format_err(line_no, "empty row"));
            }
            let row_width = line.chars().count();
            match width {
                None => width = Some(row_width),
                Some(w) if w != row_width => {
                    return Err(format_err(
                        line_no,
                        format!("row has {row_width} cells, expected {w}"),
                    ))
                }
                _ => {}
            }
            for ch in line.chars() {
                match ch {
                    '#' => occupied.push(true),
                    '.' => occupied.push(false),
                    other => {
                        return Err(format_err(line_no, format!("unknown map character {other:?}")))
                    }
                }
            }
            height += 1;
        }
        let width = width.ok_or_else(|| format_err(0, "map has no rows"))?;
        Self::new(width, height, resolution, Point::default(), occupied)
    }

    /// Serializes to the ASCII format. `from_ascii(to_ascii(m))` reproduces `m`
    /// for maps whose origin is `(0, 0)`.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height + 24);
        let _ = writeln!(out, "resolution {}", self.resolution);
        for row in 0..self.height {
            for col in 0..self.width {
                out.push(if self.occupied[row * self.width + col] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    /// Builds a map from an 8-bit grayscale raster (PGM, PNG, ...) and its
    /// sidecar metadata in the usual map-server style:
    ///
    /// ```text
    /// resolution: 0.05
    /// origin: [-1.0, -2.0, 0.0]
    /// occupied_below: 128
    /// ```
    pub fn from_raster(image_bytes: &[u8], metadata: &str) -> Result<Self, MapError> {
        let meta = RasterMetadata::parse(metadata)?;
        let img = image::load_from_memory(image_bytes)
            .map_err(|e| MapError::Raster(e.to_string()))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let occupied = img.pixels().map(|p| p.0[0] < meta.occupied_below).collect();
        Self::new(w, h, meta.resolution, meta.origin, occupied)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// World extent `(x_max, y_max)` of the far corner.
    pub fn extent(&self) -> Point {
        Point::new(
            self.origin.x + self.width as f64 * self.resolution,
            self.origin.y + self.height as f64 * self.resolution,
        )
    }

    #[inline]
    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.width, index % self.width)
    }

    #[inline]
    pub fn contains_cell(&self, cell: Cell) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    #[inline]
    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.occupied[self.index(cell)]
    }

    #[inline]
    pub fn is_free(&self, cell: Cell) -> bool {
        !self.is_occupied(cell)
    }

    #[inline]
    pub fn is_occupied_index(&self, index: usize) -> bool {
        self.occupied[index]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupied
    }

    /// Free space, in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.len())
            .filter(|&i| !self.occupied[i])
            .map(|i| self.cell_at(i))
            .collect()
    }

    pub fn occupied_cells(&self) -> Vec<Cell> {
        (0..self.len())
            .filter(|&i| self.occupied[i])
            .map(|i| self.cell_at(i))
            .collect()
    }

    pub fn contains_point(&self, p: Point) -> bool {
        let ext = self.extent();
        p.x >= self.origin.x && p.y >= self.origin.y && p.x < ext.x && p.y < ext.y
    }

    /// Cell containing `p`, or `None` outside the grid.
    #[inline]
    pub fn try_cell(&self, p: Point) -> Option<Cell> {
        let u = (p.x - self.origin.x) / self.resolution;
        let v = (p.y - self.origin.y) / self.resolution;
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let (col, row) = (u.floor() as usize, v.floor() as usize);
        if col < self.width && row < self.height {
            Some(Cell::new(row, col))
        } else {
            None
        }
    }

    pub fn world_to_cell(&self, p: Point) -> Result<Cell, MapError> {
        self.try_cell(p).ok_or(MapError::OutOfBounds { x: p.x, y: p.y })
    }

    /// Center of `cell` in world coordinates.
    #[inline]
    pub fn cell_to_world(&self, cell: Cell) -> Point {
        Point::new(
            self.origin.x + (cell.col as f64 + 0.5) * self.resolution,
            self.origin.y + (cell.row as f64 + 0.5) * self.resolution,
        )
    }

    /// True when `p` is inside the grid and its cell is free.
    #[inline]
    pub fn is_free_point(&self, p: Point) -> bool {
        self.try_cell(p).is_some_and(|c| self.is_free(c))
    }

    /// True iff the segment `a -> b` touches no occupied cell.
    pub fn line_of_sight(&self, a: Point, b: Point) -> Result<bool, MapError> {
        for p in [a, b] {
            if !self.contains_point(p) {
                return Err(MapError::OutOfBounds { x: p.x, y: p.y });
            }
        }
        Ok(self.supercover(a, b, |c| self.is_free(c)))
    }

    /// Visits every cell the segment `a -> b` touches, including both
    /// neighbours when the segment passes exactly through a cell corner.
    /// Stops early and returns `false` as soon as `visit` returns `false`.
    /// Both endpoints must be inside the grid.
    pub fn supercover(&self, a: Point, b: Point, mut visit: impl FnMut(Cell) -> bool) -> bool {
        let res = self.resolution;
        let (u0, v0) = ((a.x - self.origin.x) / res, (a.y - self.origin.y) / res);
        let (u1, v1) = ((b.x - self.origin.x) / res, (b.y - self.origin.y) / res);
        let max_col = self.width as i64 - 1;
        let max_row = self.height as i64 - 1;
        let mut col = (u0.floor() as i64).clamp(0, max_col);
        let mut row = (v0.floor() as i64).clamp(0, max_row);
        let du = u1 - u0;
        let dv = v1 - v0;
        let step_c: i64 = if du > 0.0 { 1 } else { -1 };
        let step_r: i64 = if dv > 0.0 { 1 } else { -1 };
        let (mut t_col, delta_col) = if du == 0.0 {
            (f64::INFINITY, f64::INFINITY)
        } else if du > 0.0 {
            ((col as f64 + 1.0 - u0) / du, 1.0 / du)
        } else {
            ((u0 - col as f64) / -du, 1.0 / -du)
        };
        let (mut t_row, delta_row) = if dv == 0.0 {
            (f64::INFINITY, f64::INFINITY)
        } else if dv > 0.0 {
            ((row as f64 + 1.0 - v0) / dv, 1.0 / dv)
        } else {
            ((v0 - row as f64) / -dv, 1.0 / -dv)
        };

        let in_grid = |r: i64, c: i64| r >= 0 && c >= 0 && r <= max_row && c <= max_col;
        let as_cell = |r: i64, c: i64| Cell::new(r as usize, c as usize);

        if !visit(as_cell(row, col)) {
            return false;
        }
        const TIE: f64 = 1e-9;
        loop {
            let t_next = t_col.min(t_row);
            if t_next > 1.0 {
                return true;
            }
            if (t_col - t_row).abs() <= TIE * t_next.max(1.0) {
                // corner crossing: both side cells are touched
                for (r, c) in [(row, col + step_c), (row + step_r, col)] {
                    if in_grid(r, c) && !visit(as_cell(r, c)) {
                        return false;
                    }
                }
                col += step_c;
                row += step_r;
                t_col += delta_col;
                t_row += delta_row;
            } else if t_col < t_row {
                col += step_c;
                t_col += delta_col;
            } else {
                row += step_r;
                t_row += delta_row;
            }
            if !in_grid(row, col) {
                return true;
            }
            if !visit(as_cell(row, col)) {
                return false;
            }
        }
    }

    /// True when a disc of `radius` at `center` overlaps an occupied cell or
    /// pokes outside the grid.
    pub fn disc_collides(&self, center: Point, radius: f64) -> bool {
        let res = self.resolution;
        let ext = self.extent();
        if center.x - radius < self.origin.x
            || center.y - radius < self.origin.y
            || center.x + radius > ext.x
            || center.y + radius > ext.y
        {
            return true;
        }
        let u = |x: f64| ((x - self.origin.x) / res).floor() as i64;
        let v = |y: f64| ((y - self.origin.y) / res).floor() as i64;
        let c0 = u(center.x - radius).max(0) as usize;
        let c1 = (u(center.x + radius).max(0) as usize).min(self.width - 1);
        let r0 = v(center.y - radius).max(0) as usize;
        let r1 = (v(center.y + radius).max(0) as usize).min(self.height - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                if !self.occupied[row * self.width + col] {
                    continue;
                }
                let x0 = self.origin.x + col as f64 * res;
                let y0 = self.origin.y + row as f64 * res;
                let dx = (x0 - center.x).max(0.0).max(center.x - (x0 + res));
                let dy = (y0 - center.y).max(0.0).max(center.y - (y0 + res));
                if dx * dx + dy * dy < radius * radius {
                    return true;
                }
            }
        }
        false
    }

    /// Disc sweep from `a` to `b`, sampled at a quarter cell.
    pub fn swept_disc_collides(&self, a: Point, b: Point, radius: f64) -> bool {
        let len = a.distance(&b);
        let steps = ((len / (self.resolution * 0.25)).ceil() as usize).max(1);
        (0..=steps).any(|i| {
            let t = i as f64 / steps as f64;
            self.disc_collides(Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t), radius)
        })
    }

    /// Labels 8-connected components of free space. Returns the label per
    /// cell (`usize::MAX` for obstacles) and the component count.
    pub fn free_components(&self) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; self.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.len() {
            if self.occupied[start] || label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            queue.push_back(start);
            while let Some(idx) = queue.pop_front() {
                let cell = self.cell_at(idx);
                for n in self.neighbors8(cell) {
                    let ni = self.index(n);
                    if !self.occupied[ni] && label[ni] == usize::MAX {
                        label[ni] = count;
                        queue.push_back(ni);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn is_connected(&self) -> bool {
        self.free_components().1 == 1
    }

    /// Errors unless free space forms exactly one 8-connected component.
    pub fn validate_connected(&self) -> Result<(), MapError> {
        match self.free_components().1 {
            1 => Ok(()),
            components => Err(MapError::Disconnected { components }),
        }
    }

    pub fn neighbors8(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
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
        OFFSETS.iter().filter_map(move |&(dr, dc)| {
            let r = cell.row as i64 + dr;
            let c = cell.col as i64 + dc;
            (r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width)
                .then(|| Cell::new(r as usize, c as usize))
        })
    }
}

/// Parses a map document.
pub fn load_map(text: &str) -> Result<GridMap, MapError> {
    GridMap::from_ascii(text)
}

#[derive(Debug, Clone, PartialEq)]
struct RasterMetadata {
    resolution: f64,
    origin: Point,
    occupied_below: u8,
}

impl RasterMetadata {
    fn parse(text: &str) -> Result<Self, MapError> {
        #[derive(Deserialize)]
        struct Raw {
            resolution: f64,
            #[serde(default)]
            origin: Vec<f64>,
            #[serde(default)]
            occupied_below: Option<u8>,
        }
        let raw: Raw = serde_yaml::from_str(text).map_err(|e| format_err(0, e.to_string()))?;
        if !(raw.resolution > 0.0) {
            return Err(format_err(0, "resolution must be positive"));
        }
        let origin = match raw.origin.as_slice() {
            [] => Point::default(),
            [x, y] | [x, y, _] => Point::new(*x, *y),
            other => return Err(format_err(0, format!("origin needs 2 or 3 values, got {}", other.len()))),
        };
        Ok(Self {
            resolution: raw.resolution,
            origin,
            occupied_below: raw.occupied_below.unwrap_or(RASTER_OCCUPIED_BELOW),
        })
    }
}

const COMPLEX_HALL: &str = include_str!("../maps/complex_hall.map");
const ENCLOSED_ROOM: &str = include_str!("../maps/enclosed_room.map");
const BRICK_ROOM: &str = include_str!("../maps/brick_room.map");

pub const BUILTIN_MAP_NAMES: [&str; 3] = ["complex_hall", "enclosed_room", "brick_room"];

/// The three shipped environments: an obstacle-free hall of wide corridors,
/// a room with scattered boxes, and a room split by one long wall.
pub fn builtin_maps() -> Vec<(&'static str, GridMap)> {
    BUILTIN_MAP_NAMES
        .iter()
        .map(|&name| (name, builtin_map(name).expect("shipped map parses")))
        .collect()
}

pub fn builtin_map(name: &str) -> Result<GridMap, MapError> {
    let text = match name {
        "complex_hall" => COMPLEX_HALL,
        "enclosed_room" => ENCLOSED_ROOM,
        "brick_room" => BRICK_ROOM,
        other => return Err(MapError::UnknownMap(other.to_string())),
    };
    GridMap::from_ascii(text)
}
