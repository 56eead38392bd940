//! Sequential importance sampling filter over the evader's pose.
//!
//! Motion model: unicycle with per-particle random controls bounded by the
//! evader's speed. Measurement model: negative information from the pursuer's
//! visibility region. Resampling is systematic and only runs when the
//! effective sample size `1 / sum(w^2)` drops below `rho * N`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{normalize_angle, Cell, GridMap, Point, Pose};
use crate::visibility::VisibilityRegion;

/// Allowed drift of the weight total away from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("no free cell within 5 sigma of ({x:.3}, {y:.3})")]
    NoFreeSpaceNear { x: f64, y: f64 },
    #[error("map has no free space")]
    NoFreeSpace,
    #[error("weights are not normalized (sum = {0})")]
    Unnormalized(f64),
    #[error("invalid filter config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub pose: Pose,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when `N_eff < rho * N`.
    pub rho: f64,
    /// Evader speed bound used by the motion model, m/s.
    pub v_max: f64,
    pub omega_max: f64,
    pub position_jitter_sigma: f64,
    pub reinit_sigma: f64,
    pub in_region_factor_when_unseen: f64,
    pub out_region_factor_when_seen: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            rho: 0.8,
            v_max: 0.4,
            omega_max: PI / 2.0,
            position_jitter_sigma: 0.05,
            reinit_sigma: 0.2,
            in_region_factor_when_unseen: 0.05,
            out_region_factor_when_seen: 0.05,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_particles == 0 {
            return Err(FilterError::InvalidConfig("n_particles must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(FilterError::InvalidConfig("rho must lie in [0, 1]"));
        }
        let non_negative = [
            self.v_max,
            self.omega_max,
            self.position_jitter_sigma,
            self.reinit_sigma,
            self.in_region_factor_when_unseen,
            self.out_region_factor_when_seen,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(FilterError::InvalidConfig("rates, sigmas and factors must be >= 0"));
        }
        Ok(())
    }
}

/// Outcome of a measurement update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightUpdate {
    Normalized,
    /// Every weight vanished; the set was re-spread uniformly over free space.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    rng: ChaCha8Rng,
}

impl ParticleSet {
    /// Gaussian cloud around `center` with uniform headings, restricted to free space.
    pub fn initialize_around(
        map: &GridMap,
        center: &Pose,
        config: &FilterConfig,
        seed: u64,
    ) -> Result<Self, FilterError> {
        let mut set = Self {
            particles: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        set.reinitialize_around(map, center, config)?;
        Ok(set)
    }

    /// Uniform over free cells (position uniform inside the chosen cell).
    pub fn initialize_uniform(map: &GridMap, config: &FilterConfig, seed: u64) -> Result<Self, FilterError> {
        let mut set = Self {
            particles: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        set.spread_uniform(map, config.n_particles)?;
        Ok(set)
    }

    /// Builds a set from explicit particles. Weights are normalized.
    pub fn from_particles(particles: Vec<Particle>, seed: u64) -> Result<Self, FilterError> {
        let total: f64 = particles.iter().map(|p| p.weight).sum();
        if particles.is_empty() || !(total > 0.0) || particles.iter().any(|p| p.weight < 0.0) {
            return Err(FilterError::InvalidConfig("need at least one particle with positive total weight"));
        }
        let particles = particles
            .into_iter()
            .map(|p| Particle {
                pose: p.pose,
                weight: p.weight / total,
            })
            .collect();
        Ok(Self {
            particles,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Redraws the cloud around `center`, continuing the set's random stream.
    pub fn reinitialize_around(
        &mut self,
        map: &GridMap,
        center: &Pose,
        config: &FilterConfig,
    ) -> Result<(), FilterError> {
        config.validate()?;
        let sigma = config.reinit_sigma;
        let c = center.position();
        let reach = 5.0 * sigma;
        let nearby = free_cells_within(map, c, reach);
        if nearby.is_empty() {
            return Err(FilterError::NoFreeSpaceNear { x: c.x, y: c.y });
        }
        let n = config.n_particles;
        let weight = 1.0 / n as f64;
        let mut particles = Vec::with_capacity(n);
        let gauss = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let max_attempts = 200 * n;
        let mut attempts = 0;
        while particles.len() < n {
            let p = if sigma == 0.0 {
                c
            } else if attempts < max_attempts {
                attempts += 1;
                Point::new(c.x + gauss.sample(&mut self.rng), c.y + gauss.sample(&mut self.rng))
            } else {
                // pocket of free space too small for rejection sampling
                let cell = nearby[self.rng.random_range(0..nearby.len())];
                jitter_in_cell(map, cell, &mut self.rng)
            };
            if !map.is_free_point(p) {
                if sigma == 0.0 {
                    return Err(FilterError::NoFreeSpaceNear { x: c.x, y: c.y });
                }
                continue;
            }
            let theta = random_heading(&mut self.rng);
            particles.push(Particle {
                pose: Pose::new(p.x, p.y, theta),
                weight,
            });
        }
        self.particles = particles;
        Ok(())
    }

    fn spread_uniform(&mut self, map: &GridMap, n: usize) -> Result<(), FilterError> {
        let free = map.free_cells();
        if free.is_empty() {
            return Err(FilterError::NoFreeSpace);
        }
        let weight = 1.0 / n as f64;
        self.particles = (0..n)
            .map(|_| {
                let cell = free[self.rng.random_range(0..free.len())];
                let p = jitter_in_cell(map, cell, &mut self.rng);
                Particle {
                    pose: Pose::new(p.x, p.y, random_heading(&mut self.rng)),
                    weight,
                }
            })
            .collect();
        Ok(())
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// Unicycle prediction with sampled controls, positional jitter, and a
    /// collision clamp that keeps the old position (heading still turns).
    pub fn predict(&mut self, dt: f64, map: &GridMap, config: &FilterConfig) {
        let jitter = (config.position_jitter_sigma > 0.0)
            .then(|| Normal::new(0.0, config.position_jitter_sigma).expect("finite sigma"));
        for particle in &mut self.particles {
            let v = if config.v_max > 0.0 {
                self.rng.random_range(0.0..config.v_max)
            } else {
                0.0
            };
            let omega = if config.omega_max > 0.0 {
                self.rng.random_range(-config.omega_max..config.omega_max)
            } else {
                0.0
            };
            let pose = particle.pose;
            let theta = normalize_angle(pose.theta + omega * dt);
            let mut x = pose.x + v * theta.cos() * dt;
            let mut y = pose.y + v * theta.sin() * dt;
            if let Some(normal) = &jitter {
                x += normal.sample(&mut self.rng);
                y += normal.sample(&mut self.rng);
            }
            let target = Point::new(x, y);
            let from = pose.position();
            let clear = map.contains_point(target)
                && map.supercover(from, target, |c| map.is_free(c));
            particle.pose = if clear {
                Pose { x, y, theta }
            } else {
                Pose {
                    x: pose.x,
                    y: pose.y,
                    theta,
                }
            };
        }
    }

    /// Reweights against the pursuer's region, then renormalizes.
    ///
    /// Not detected: particles the pursuer is looking at are scaled by
    /// `in_region_factor_when_unseen`. Detected: particles outside the region
    /// are scaled by `out_region_factor_when_seen`.
    pub fn update_weights(
        &mut self,
        map: &GridMap,
        region: &VisibilityRegion,
        detected: bool,
        config: &FilterConfig,
    ) -> Result<WeightUpdate, FilterError> {
        for particle in &mut self.particles {
            let inside = region.contains_point(map, particle.pose.position());
            let factor = match (detected, inside) {
                (false, true) => config.in_region_factor_when_unseen,
                (true, false) => config.out_region_factor_when_seen,
                _ => 1.0,
            };
            particle.weight *= factor;
        }
        let total = self.weight_sum();
        if !(total > 0.0 && total.is_finite()) {
            let n = self.particles.len();
            self.spread_uniform(map, n)?;
            return Ok(WeightUpdate::Diverged);
        }
        for particle in &mut self.particles {
            particle.weight /= total;
        }
        Ok(WeightUpdate::Normalized)
    }

    /// `1 / sum(w^2)`, in `[1, N]`.
    pub fn effective_size(&self) -> Result<f64, FilterError> {
        let total = self.weight_sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(FilterError::Unnormalized(total));
        }
        let sum_sq: f64 = self.particles.iter().map(|p| p.weight * p.weight).sum();
        Ok((1.0 / sum_sq).clamp(1.0, self.particles.len() as f64))
    }

    /// Systematic resampling when `N_eff < rho * N`. Returns whether it ran.
    pub fn maybe_resample(&mut self, config: &FilterConfig) -> Result<bool, FilterError> {
        let n_eff = self.effective_size()?;
        let n = self.particles.len();
        if n_eff >= config.rho * n as f64 {
            return Ok(false);
        }
        self.resample_systematic();
        Ok(true)
    }

    fn resample_systematic(&mut self) {
        let n = self.particles.len();
        let step = 1.0 / n as f64;
        let start = self.rng.random::<f64>() * step;
        let mut out = Vec::with_capacity(n);
        let mut cumulative = self.particles[0].weight;
        let mut j = 0;
        for i in 0..n {
            let u = start + i as f64 * step;
            while u > cumulative && j + 1 < n {
                j += 1;
                cumulative += self.particles[j].weight;
            }
            out.push(Particle {
                pose: self.particles[j].pose,
                weight: step,
            });
        }
        self.particles = out;
    }

    /// Weighted mean position and circular-mean heading (0 when the heading
    /// vectors cancel).
    pub fn estimate(&self) -> Pose {
        let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
        for p in &self.particles {
            x += p.weight * p.pose.x;
            y += p.weight * p.pose.y;
            s += p.weight * p.pose.theta.sin();
            c += p.weight * p.pose.theta.cos();
        }
        let theta = if s.hypot(c) < 1e-12 { 0.0 } else { s.atan2(c) };
        Pose::new(x, y, theta)
    }

    /// Debug/UI dump: `[x, y, theta, weight]` per particle.
    pub fn to_rows(&self) -> Vec<[f64; 4]> {
        self.particles
            .iter()
            .map(|p| [p.pose.x, p.pose.y, p.pose.theta, p.weight])
            .collect()
    }
}

fn random_heading(rng: &mut impl Rng) -> f64 {
    normalize_angle(rng.random_range(-PI..PI))
}

fn jitter_in_cell(map: &GridMap, cell: Cell, rng: &mut impl Rng) -> Point {
    let c = map.cell_to_world(cell);
    let h = map.resolution() / 2.0;
    // stay strictly inside the cell
    let u = rng.random_range(-0.999..0.999);
    let v = rng.random_range(-0.999..0.999);
    Point::new(c.x + u * h, c.y + v * h)
}

fn free_cells_within(map: &GridMap, center: Point, radius: f64) -> Vec<Cell> {
    let res = map.resolution();
    let reach = (radius / res).ceil() as i64 + 1;
    let Some(c) = map.try_cell(center) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let (r, col) = (c.row as i64 + dr, c.col as i64 + dc);
            if r < 0 || col < 0 || r as usize >= map.height() || col as usize >= map.width() {
                continue;
            }
            let cell = Cell::new(r as usize, col as usize);
            if map.is_free(cell) && map.cell_to_world(cell).distance(&center) <= radius.max(res) {
                out.push(cell);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_map;
    use crate::visibility::{compute_visibility, SensorModel};

    fn uniform_set(poses: &[(f64, f64, f64)], weights: &[f64]) -> ParticleSet {
        let particles = poses
            .iter()
            .zip(weights)
            .map(|(&(x, y, t), &w)| Particle {
                pose: Pose::new(x, y, t),
                weight: w,
            })
            .collect();
        ParticleSet::from_particles(particles, 0).unwrap()
    }

    fn config(n: usize) -> FilterConfig {
        FilterConfig {
            n_particles: n,
            ..FilterConfig::default()
        }
    }

    #[test]
    fn uniform_initial_weights() {
        let map = GridMap::empty(40, 40, 0.1).unwrap();
        let set = ParticleSet::initialize_around(&map, &Pose::new(2.0, 2.0, 0.0), &config(100), 7).unwrap();
        assert_eq!(set.len(), 100);
        assert!(set.particles().iter().all(|p| p.weight == 0.01));
        assert!((set.weight_sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_initialization_is_reproducible() {
        let map = GridMap::empty(40, 40, 0.1).unwrap();
        let a = ParticleSet::initialize_around(&map, &Pose::new(2.0, 2.0, 0.0), &config(50), 9).unwrap();
        let b = ParticleSet::initialize_around(&map, &Pose::new(2.0, 2.0, 0.0), &config(50), 9).unwrap();
        assert_eq!(a.particles(), b.particles());
    }

    #[test]
    fn initialization_next_to_wall_stays_free() {
        let mut rows = vec![".".repeat(30); 30];
        for row in rows.iter_mut() {
            row.replace_range(15..30, &"#".repeat(15));
        }
        let map = load_map(&rows.join("\n")).unwrap();
        let set = ParticleSet::initialize_around(&map, &Pose::new(1.45, 1.5, 0.0), &config(500), 3).unwrap();
        for p in set.particles() {
            assert!(map.is_free_point(p.pose.position()), "{:?}", p.pose);
        }
    }

    #[test]
    fn initialization_fails_without_nearby_free_space() {
        let mut rows = vec!["#".repeat(40); 40];
        rows[0].replace_range(0..1, ".");
        let map = load_map(&rows.join("\n")).unwrap();
        let err = ParticleSet::initialize_around(&map, &Pose::new(3.5, 3.5, 0.0), &config(10), 1).unwrap_err();
        assert!(matches!(err, FilterError::NoFreeSpaceNear { .. }));
    }

    #[test]
    fn zero_speed_only_rotates() {
        let map = GridMap::empty(40, 40, 0.1).unwrap();
        let cfg = FilterConfig {
            v_max: 0.0,
            position_jitter_sigma: 0.0,
            ..config(200)
        };
        let mut set = ParticleSet::initialize_around(&map, &Pose::new(2.0, 2.0, 0.0), &cfg, 4).unwrap();
        let before = set.particles().to_vec();
        set.predict(1.0, &map, &cfg);
        for (a, b) in before.iter().zip(set.particles()) {
            assert_eq!((a.pose.x, a.pose.y), (b.pose.x, b.pose.y));
            assert_eq!(a.weight, b.weight);
        }
        assert!(before.iter().zip(set.particles()).any(|(a, b)| a.pose.theta != b.pose.theta));
    }

    #[test]
    fn displacement_bounded_by_speed() {
        let map = GridMap::empty(80, 80, 0.1).unwrap();
        let cfg = config(1000);
        let mut set = ParticleSet::initialize_around(&map, &Pose::new(4.0, 4.0, 0.0), &cfg, 5).unwrap();
        let before = set.particles().to_vec();
        set.predict(1.0, &map, &cfg);
        let bound = cfg.v_max + 3.0 * cfg.position_jitter_sigma * 2f64.sqrt();
        let over = before
            .iter()
            .zip(set.particles())
            .filter(|(a, b)| a.pose.position().distance(&b.pose.position()) > bound)
            .count();
        // the 3-sigma radial bound fails for about 1% of 2-D Gaussian draws
        assert!(over <= 20, "{over} particles exceeded {bound}");
    }

    #[test]
    fn blocked_move_is_clamped() {
        let map = load_map("....#\n....#\n....#\n").unwrap();
        let cfg = FilterConfig {
            v_max: 0.4,
            omega_max: 0.0,
            position_jitter_sigma: 0.0,
            ..config(1)
        };
        let mut set = uniform_set(&[(0.35, 0.15, 0.0)], &[1.0]);
        for _ in 0..20 {
            set.predict(1.0, &map, &cfg);
            assert!(map.is_free_point(set.particles()[0].pose.position()));
        }
    }

    #[test]
    fn unseen_update_outside_region_is_neutral() {
        let map = GridMap::empty(60, 60, 0.1).unwrap();
        let region = compute_visibility(&map, &Pose::new(0.5, 0.5, 0.0), &SensorModel::default()).unwrap();
        let mut set = uniform_set(&[(5.5, 5.5, 0.0), (5.0, 5.2, 1.0), (4.5, 5.9, 2.0)], &[0.2, 0.3, 0.5]);
        let before: Vec<f64> = set.particles().iter().map(|p| p.weight).collect();
        assert_eq!(set.update_weights(&map, &region, false, &config(3)).unwrap(), WeightUpdate::Normalized);
        for (w, p) in before.iter().zip(set.particles()) {
            assert!((w - p.weight).abs() < 1e-15);
        }
    }

    #[test]
    fn unseen_update_ratio_is_factor() {
        let map = GridMap::empty(60, 60, 0.1).unwrap();
        let region = compute_visibility(&map, &Pose::new(0.5, 3.0, 0.0), &SensorModel::default()).unwrap();
        let mut poses = Vec::new();
        for i in 0..50 {
            poses.push((2.0 + i as f64 * 0.01, 3.0, 0.0)); // inside
            poses.push((0.5, 0.2 + i as f64 * 0.01, 0.0)); // behind the pursuer
        }
        let mut set = uniform_set(&poses, &[0.01; 100]);
        let cfg = FilterConfig {
            in_region_factor_when_unseen: 0.1,
            ..config(100)
        };
        set.update_weights(&map, &region, false, &cfg).unwrap();
        let inside = set.particles()[0].weight;
        let outside = set.particles()[1].weight;
        assert!((inside / outside - 0.1).abs() < 1e-12);
        assert!((inside - 0.1 / 55.0).abs() < 1e-15);
        assert!((set.weight_sum() - 1.0).abs() < 1e-12);

        // seen: the outside particles are the ones penalized
        let mut set = uniform_set(&poses, &[0.01; 100]);
        set.update_weights(&map, &region, true, &cfg).unwrap();
        let ratio = set.particles()[1].weight / set.particles()[0].weight;
        assert!((ratio - cfg.out_region_factor_when_seen).abs() < 1e-12);
    }

    #[test]
    fn total_underflow_reinitializes() {
        let map = GridMap::empty(60, 60, 0.1).unwrap();
        let region = compute_visibility(&map, &Pose::new(0.5, 3.0, 0.0), &SensorModel::default()).unwrap();
        let mut set = uniform_set(&[(2.0, 3.0, 0.0), (2.5, 3.0, 0.0)], &[0.5, 0.5]);
        let cfg = FilterConfig {
            in_region_factor_when_unseen: 0.0,
            ..config(2)
        };
        assert_eq!(set.update_weights(&map, &region, false, &cfg).unwrap(), WeightUpdate::Diverged);
        assert_eq!(set.len(), 2);
        assert!(set.particles().iter().all(|p| p.weight == 0.5));
    }

    #[test]
    fn effective_size_cases() {
        let set = uniform_set(&[(0.0, 0.0, 0.0); 100], &[0.01; 100]);
        assert!((set.effective_size().unwrap() - 100.0).abs() < 1e-9);
        let set = uniform_set(&[(0.0, 0.0, 0.0); 4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(set.effective_size().unwrap(), 1.0);
        let set = uniform_set(&[(0.0, 0.0, 0.0); 4], &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(set.effective_size().unwrap(), 2.0);
    }

    #[test]
    fn effective_size_rejects_unnormalized() {
        let mut set = uniform_set(&[(0.0, 0.0, 0.0); 2], &[0.5, 0.5]);
        set.particles[0].weight = 0.7;
        assert!(matches!(set.effective_size(), Err(FilterError::Unnormalized(_))));
    }

    #[test]
    fn resampling_threshold() {
        let cfg = config(100);
        let mut set = uniform_set(&[(0.0, 0.0, 0.0); 100], &[0.01; 100]);
        assert!(!set.maybe_resample(&cfg).unwrap());

        let mut weights = vec![1e-9; 100];
        weights[17] = 1.0;
        let poses: Vec<_> = (0..100).map(|i| (i as f64, 0.0, 0.0)).collect();
        let mut set = uniform_set(&poses, &weights);
        assert!(set.maybe_resample(&cfg).unwrap());
        assert!(set.particles().iter().all(|p| p.weight == 0.01));
        assert!(set.particles().iter().all(|p| p.pose.x == 17.0));
    }

    #[test]
    fn estimate_cases() {
        let set = uniform_set(&[(1.5, -2.0, 0.3)], &[1.0]);
        assert_eq!(set.estimate(), Pose::new(1.5, -2.0, 0.3));

        let set = uniform_set(&[(0.0, 0.0, PI / 2.0), (2.0, 0.0, -PI / 2.0)], &[0.5, 0.5]);
        let e = set.estimate();
        assert_eq!((e.x, e.y, e.theta), (1.0, 0.0, 0.0));

        let set = uniform_set(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)], &[0.9, 0.1]);
        assert!((set.estimate().x - 0.1).abs() < 1e-15);
    }
}
