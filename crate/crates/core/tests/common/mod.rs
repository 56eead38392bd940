#![allow(dead_code)]

use std::f64::consts::SQRT_2;

use pursuit_core::grid::{Cell, GridMap, Point, Pose};
use pursuit_core::navigation::NavGrid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random obstacle field with a free border-less interior.
pub fn random_map(rng: &mut ChaCha8Rng, width: usize, height: usize, density: f64, resolution: f64) -> GridMap {
    let occupied: Vec<bool> = (0..width * height).map(|_| rng.random::<f64>() < density).collect();
    GridMap::new(width, height, resolution, Point::new(0.0, 0.0), occupied).unwrap()
}

/// Same, built from an explicit bit pattern (for proptest).
pub fn map_from_bits(width: usize, height: usize, bits: &[bool]) -> GridMap {
    GridMap::new(width, height, 0.1, Point::new(0.0, 0.0), bits.to_vec()).unwrap()
}

pub fn random_free_pose(rng: &mut ChaCha8Rng, map: &GridMap) -> Option<Pose> {
    let free = map.free_cells();
    if free.is_empty() {
        return None;
    }
    let cell = free[rng.random_range(0..free.len())];
    let res = map.resolution();
    let x = map.origin().x + (cell.col as f64 + rng.random_range(0.05..0.95)) * res;
    let y = map.origin().y + (cell.row as f64 + rng.random_range(0.05..0.95)) * res;
    Some(Pose::new(x, y, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)))
}

/// Shortest 8-connected distances in cells by repeated relaxation until
/// nothing changes. Diagonal moves need both side cells open.
pub fn relaxation_distances(nav: &NavGrid, width: usize, height: usize, source: usize) -> Vec<Option<(u32, u32)>> {
    let n = width * height;
    let mut best: Vec<Option<(u32, u32)>> = vec![None; n];
    best[source] = Some((0, 0));
    let value = |(s, d): (u32, u32)| s as f64 + d as f64 * SQRT_2;
    let open = |r: i64, c: i64| {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && !nav.is_blocked(Cell::new(r as usize, c as usize))
    };
    loop {
        let mut changed = false;
        for idx in 0..n {
            let Some(here) = best[idx] else { continue };
            let (r, c) = ((idx / width) as i64, (idx % width) as i64);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if dr == 0 && dc == 0 || !open(r + dr, c + dc) {
                        continue;
                    }
                    let diagonal = dr != 0 && dc != 0;
                    if diagonal && !(open(r + dr, c) && open(r, c + dc)) {
                        continue;
                    }
                    let next = ((r + dr) * width as i64 + (c + dc)) as usize;
                    let cand = if diagonal { (here.0, here.1 + 1) } else { (here.0 + 1, here.1) };
                    if best[next].is_none_or(|old| value(cand) < value(old)) {
                        best[next] = Some(cand);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return best;
        }
    }
}

/// True when any of `samples` evenly spaced points on the segment lies in an
/// occupied cell or off the map.
pub fn dense_segment_blocked(map: &GridMap, a: Point, b: Point, samples: usize) -> bool {
    (0..=samples).any(|i| {
        let t = i as f64 / samples as f64;
        let p = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        match map.try_cell(p) {
            Some(c) => map.is_occupied(c),
            None => true,
        }
    })
}
