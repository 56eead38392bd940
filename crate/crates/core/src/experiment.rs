//! Batch experiments over maps, speed ratios and behaviour pairs.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Behavior;
use crate::engine::{EpisodeResult, GameConfig, GameError};
use crate::grid::BUILTIN_MAP_NAMES;
use crate::rng::stable_hash;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment matrix: {0}")]
    InvalidMatrix(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// Pursuer and evader behaviours, written `S-R` (pursuer first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BehaviorPair {
    pub pursuer: Behavior,
    pub evader: Behavior,
}

impl BehaviorPair {
    pub const RR: Self = Self::new(Behavior::Random, Behavior::Random);
    pub const SR: Self = Self::new(Behavior::Smart, Behavior::Random);
    pub const SS: Self = Self::new(Behavior::Smart, Behavior::Smart);

    pub const fn new(pursuer: Behavior, evader: Behavior) -> Self {
        Self { pursuer, evader }
    }
}

impl fmt::Display for BehaviorPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.pursuer.letter(), self.evader.letter())
    }
}

impl FromStr for BehaviorPair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let letter = |c: &str| match c.trim().to_ascii_uppercase().as_str() {
            "R" | "RANDOM" => Ok(Behavior::Random),
            "S" | "SMART" => Ok(Behavior::Smart),
            other => Err(format!("unknown behavior {other:?}")),
        };
        let (p, e) = s
            .split_once('-')
            .ok_or_else(|| format!("expected PURSUER-EVADER like S-R, got {s:?}"))?;
        Ok(Self::new(letter(p)?, letter(e)?))
    }
}

impl TryFrom<String> for BehaviorPair {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BehaviorPair> for String {
    fn from(p: BehaviorPair) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentMatrix {
    pub maps: Vec<String>,
    pub ratios: Vec<f64>,
    pub pairs: Vec<BehaviorPair>,
    pub iterations: usize,
    pub base_seed: u64,
    /// Template for every episode; map, ratio, behaviours and seed are
    /// overwritten per episode.
    pub game: GameConfig,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        Self {
            maps: BUILTIN_MAP_NAMES.iter().map(|s| s.to_string()).collect(),
            ratios: vec![0.5, 1.0, 2.0],
            pairs: vec![BehaviorPair::RR, BehaviorPair::SR, BehaviorPair::SS],
            iterations: 40,
            base_seed: 2020,
            game: GameConfig::default(),
        }
    }
}

/// One (map, ratio, pair, iteration) job.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeKey {
    pub map: String,
    pub ratio: f64,
    pub pair: BehaviorPair,
    pub iteration: usize,
}

impl EpisodeKey {
    /// Stable file stem, e.g. `brick_room_r0.5_S-R_007`.
    pub fn stem(&self) -> String {
        format!("{}_r{}_{}_{:03}", self.map, self.ratio, self.pair, self.iteration)
    }
}

impl ExperimentMatrix {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let matrix: Self = toml::from_str(text)?;
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::InvalidMatrix(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("ratios must be positive");
        }
        if self.maps.is_empty() || self.ratios.is_empty() || self.pairs.is_empty() {
            return bad("maps, ratios and pairs must be non-empty");
        }
        Ok(())
    }

    /// Jobs in result order: map, then ratio, then pair, then iteration.
    pub fn keys(&self) -> Vec<EpisodeKey> {
        let mut keys = Vec::with_capacity(self.len());
        for map in &self.maps {
            for &ratio in &self.ratios {
                for &pair in &self.pairs {
                    for iteration in 0..self.iterations {
                        keys.push(EpisodeKey {
                            map: map.clone(),
                            ratio,
                            pair,
                            iteration,
                        });
                    }
                }
            }
        }
        keys
    }

    pub fn len(&self) -> usize {
        self.maps.len() * self.ratios.len() * self.pairs.len() * self.iterations
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Depends only on the key's own coordinates, so adding values to any
    /// axis leaves existing seeds alone.
    pub fn seed_for(&self, key: &EpisodeKey) -> u64 {
        stable_hash(&[
            &self.base_seed.to_string(),
            &key.map,
            &key.ratio.to_string(),
            &key.pair.to_string(),
            &key.iteration.to_string(),
        ])
    }

    pub fn config_for(&self, key: &EpisodeKey) -> GameConfig {
        GameConfig {
            map: key.map.clone(),
            speed_ratio: key.ratio,
            pursuer_behavior: key.pair.pursuer,
            evader_behavior: key.pair.evader,
            seed: self.seed_for(key),
            ..self.game.clone()
        }
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub map: String,
    pub ratio: f64,
    pub pair: BehaviorPair,
    pub iteration: usize,
    pub seed: u64,
    pub success_rate: Option<f64>,
    pub detected_ticks: Option<usize>,
    pub ticks: Option<usize>,
    pub config_digest: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BatchEpisode {
    pub key: EpisodeKey,
    pub row: EpisodeRow,
    /// Kept only when requested.
    pub result: Option<EpisodeResult>,
}

/// Runs every episode of the matrix on `parallelism` threads. Output order
/// follows [`ExperimentMatrix::keys`] whatever the scheduling.
pub fn run_batch(
    matrix: &ExperimentMatrix,
    parallelism: usize,
    keep_episodes: bool,
) -> Result<Vec<BatchEpisode>, ExperimentError> {
    matrix.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()?;
    let keys = matrix.keys();
    Ok(pool.install(|| {
        keys.into_par_iter()
            .map(|key| run_one(matrix, key, keep_episodes))
            .collect()
    }))
}

fn run_one(matrix: &ExperimentMatrix, key: EpisodeKey, keep: bool) -> BatchEpisode {
    let config = matrix.config_for(&key);
    let mut row = EpisodeRow {
        map: key.map.clone(),
        ratio: key.ratio,
        pair: key.pair,
        iteration: key.iteration,
        seed: config.seed,
        success_rate: None,
        detected_ticks: None,
        ticks: None,
        config_digest: None,
        error: None,
    };
    match crate::engine::run_episode(&config) {
        Ok(result) => {
            row.success_rate = Some(result.success_rate);
            row.detected_ticks = Some(result.detected_ticks);
            row.ticks = Some(result.ticks.len());
            row.config_digest = Some(result.config_digest.clone());
            BatchEpisode {
                key,
                row,
                result: keep.then_some(result),
            }
        }
        Err(err) => {
            log::warn!("episode {} failed: {err}", key.stem());
            row.error = Some(err.to_string());
            BatchEpisode {
                key,
                row,
                result: None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub map: String,
    pub ratio: f64,
    pub pair: BehaviorPair,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for a single value).
    pub std: f64,
    pub outliers: Vec<f64>,
}

/// Percentile by linear interpolation between order statistics:
/// position `p·(n−1)` in the sorted sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary statistics of one cell. `None` for an empty sample.
pub fn describe(map: &str, ratio: f64, pair: BehaviorPair, values: &[f64]) -> Option<SummaryRow> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let q1 = percentile(&sorted, 0.25);
    let q3 = percentile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Some(SummaryRow {
        map: map.to_string(),
        ratio,
        pair,
        n,
        mean,
        median: percentile(&sorted, 0.5),
        q1,
        q3,
        min: sorted[0],
        max: sorted[n - 1],
        std,
        outliers: sorted.iter().copied().filter(|v| *v < lo || *v > hi).collect(),
    })
}

/// One summary row per (map, ratio, pair) cell, in order of first
/// appearance. Failed episodes are skipped; cells with no successful
/// episode are left out with a warning.
pub fn summarize(rows: &[EpisodeRow]) -> Vec<SummaryRow> {
    let mut cells: Vec<(String, f64, BehaviorPair, Vec<f64>)> = Vec::new();
    for row in rows {
        let pos = cells
            .iter()
            .position(|(m, r, p, _)| *m == row.map && r.to_bits() == row.ratio.to_bits() && *p == row.pair);
        let idx = pos.unwrap_or_else(|| {
            cells.push((row.map.clone(), row.ratio, row.pair, Vec::new()));
            cells.len() - 1
        });
        if let Some(rate) = row.success_rate {
            cells[idx].3.push(rate);
        }
    }
    cells
        .iter()
        .filter_map(|(m, r, p, values)| {
            let summary = describe(m, *r, *p, values);
            if summary.is_none() {
                log::warn!("cell {m} ratio {r} {p} has no completed episodes");
            }
            summary
        })
        .collect()
}

/// Root mean within-cell variance across all cells of `pair`.
pub fn pooled_std(summary: &[SummaryRow], pair: BehaviorPair) -> Option<f64> {
    let vars: Vec<f64> = summary
        .iter()
        .filter(|s| s.pair == pair)
        .map(|s| s.std * s.std)
        .collect();
    if vars.is_empty() {
        return None;
    }
    Some((vars.iter().sum::<f64>() / vars.len() as f64).sqrt())
}

pub fn write_results_csv<W: io::Write>(rows: &[EpisodeRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: io::Read>(input: R) -> Result<Vec<EpisodeRow>, ExperimentError> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<Result<Vec<EpisodeRow>, _>>()?;
    Ok(rows)
}

pub fn write_summary_csv<W: io::Write>(summary: &[SummaryRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "map", "ratio", "pair", "n", "mean", "median", "q1", "q3", "min", "max", "std", "outliers",
    ])?;
    for s in summary {
        let outliers: Vec<String> = s.outliers.iter().map(|v| v.to_string()).collect();
        w.write_record([
            s.map.clone(),
            s.ratio.to_string(),
            s.pair.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.median.to_string(),
            s.q1.to_string(),
            s.q3.to_string(),
            s.min.to_string(),
            s.max.to_string(),
            s.std.to_string(),
            outliers.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table for terminals.
pub fn summary_table(summary: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<14} {:>5} {:>4} {:>3} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>4}\n",
        "map", "ratio", "pair", "n", "mean", "median", "q1", "q3", "min", "max", "std", "out"
    );
    for s in summary {
        out.push_str(&format!(
            "{:<14} {:>5} {:>4} {:>3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>4}\n",
            s.map,
            s.ratio,
            s.pair.to_string(),
            s.n,
            s.mean,
            s.median,
            s.q1,
            s.q3,
            s.min,
            s.max,
            s.std,
            s.outliers.len()
        ));
    }
    out
}

/// Writes `results.csv`, `summary.json` and, when episodes were kept,
/// `trajectories/<stem>.csv` plus `episodes/<stem>.json` under `dir`.
pub fn export(batch: &[BatchEpisode], dir: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    fs::create_dir_all(dir)?;
    let rows: Vec<EpisodeRow> = batch.iter().map(|b| b.row.clone()).collect();
    write_results_csv(&rows, fs::File::create(dir.join("results.csv"))?)?;
    let summary = summarize(&rows);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if batch.iter().any(|b| b.result.is_some()) {
        let traj = dir.join("trajectories");
        let episodes = dir.join("episodes");
        fs::create_dir_all(&traj)?;
        fs::create_dir_all(&episodes)?;
        for b in batch {
            if let Some(result) = &b.result {
                result.write_trajectory(fs::File::create(traj.join(format!("{}.csv", b.key.stem())))?)?;
                fs::write(episodes.join(format!("{}.json", b.key.stem())), result.to_json() + "\n")?;
            }
        }
    }
    Ok(summary)
}

pub fn import_results(dir: &Path) -> Result<Vec<EpisodeRow>, ExperimentError> {
    read_results_csv(fs::File::open(dir.join("results.csv"))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_round_trip() {
        for p in [BehaviorPair::RR, BehaviorPair::SR, BehaviorPair::SS] {
            assert_eq!(p.to_string().parse::<BehaviorPair>().unwrap(), p);
        }
        assert_eq!("smart-random".parse::<BehaviorPair>().unwrap(), BehaviorPair::SR);
        assert!("SR".parse::<BehaviorPair>().is_err());
    }

    #[test]
    fn four_point_quartiles() {
        let s = describe("m", 1.0, BehaviorPair::SR, &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.median, 0.5);
        // position 0.75 between the two zeros, position 2.25 between the ones
        assert_eq!(s.q1, 0.0);
        assert_eq!(s.q3, 1.0);
        assert_eq!(s.mean, 0.5);
    }

    #[test]
    fn constant_cell() {
        let s = describe("m", 1.0, BehaviorPair::SR, &[0.5; 40]).unwrap();
        assert_eq!(s.std, 0.0);
        assert_eq!(s.q3 - s.q1, 0.0);
        assert!(s.outliers.is_empty());
    }

    #[test]
    fn outliers_beyond_fences() {
        let mut v = vec![0.5; 10];
        v.push(0.9);
        let s = describe("m", 1.0, BehaviorPair::SR, &v).unwrap();
        assert_eq!(s.outliers, vec![0.9]);
    }

    #[test]
    fn seeds_ignore_other_axis_values() {
        let small = ExperimentMatrix {
            maps: vec!["brick_room".into()],
            ratios: vec![1.0],
            ..ExperimentMatrix::default()
        };
        let key = &small.keys()[3];
        let big = ExperimentMatrix::default();
        assert_eq!(small.seed_for(key), big.seed_for(key));
        assert_eq!(big.keys().len(), 1080);
    }

    #[test]
    fn toml_matrix() {
        let m = ExperimentMatrix::from_toml(
            "maps = [\"brick_room\"]\nratios = [2.0]\npairs = [\"S-S\"]\niterations = 3\n\n[game]\nt_max = 20.0\n",
        )
        .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.game.t_max, 20.0);
        assert!(ExperimentMatrix::from_toml("iterations = 0\n").is_err());
    }
}
