//! Argument handling and the three subcommands of the `pursuit` binary.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pursuit_core::engine::{Game, GameConfig};
use pursuit_core::experiment::{
    export, import_results, read_results_csv, run_batch, summarize, summary_table, write_summary_csv, BehaviorPair,
    ExperimentMatrix,
};
use pursuit_core::grid::{load_map, BUILTIN_MAP_NAMES};
use pursuit_core::visibility::compute_visibility;

#[derive(Debug, Parser)]
#[command(name = "pursuit", version, about = "Pursuit-evasion on occupancy grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment matrix and export results.
    Run(RunArgs),
    /// Summary statistics of an exported results table.
    Summarize(SummarizeArgs),
    /// Play one episode, optionally printing a text frame per tick.
    Play(PlayArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML matrix file; command-line flags override its fields.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Builtin map name or path to an ASCII map (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    pub map: Vec<String>,
    /// Pursuer/evader speed ratio (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    pub ratio: Vec<f64>,
    /// Behaviour pair such as S-R (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    pub pair: Vec<BehaviorPair>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Base seed of the matrix.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Also write per-episode trajectories and result documents.
    #[arg(long)]
    pub emit_trajectories: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Table,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Output directory of `run`, or a results.csv file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Render {
    TextFrames,
    None,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    /// TOML game config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub map: Option<String>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub pair: Option<BehaviorPair>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long, value_enum, default_value = "none")]
    pub render: Render,
    /// Write the episode result document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the trajectory table here.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

/// A map argument: a builtin name, or a file holding an ASCII map. Files
/// come back as (file stem, contents).
pub fn resolve_map(arg: &str) -> Result<(String, Option<String>)> {
    if BUILTIN_MAP_NAMES.contains(&arg) {
        return Ok((arg.to_string(), None));
    }
    let path = Path::new(arg);
    if !path.is_file() {
        bail!("{arg:?} is neither a builtin map ({}) nor a file", BUILTIN_MAP_NAMES.join(", "));
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_map(&text).with_context(|| format!("parsing {}", path.display()))?;
    let stem = path.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
    Ok((stem, Some(text)))
}

pub fn build_matrix(args: &RunArgs) -> Result<ExperimentMatrix> {
    let mut matrix = match &args.matrix {
        Some(path) => ExperimentMatrix::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentMatrix::default(),
    };
    if !args.map.is_empty() {
        let resolved = args.map.iter().map(|m| resolve_map(m)).collect::<Result<Vec<_>>>()?;
        let documents = resolved.iter().filter(|(_, d)| d.is_some()).count();
        if documents > 0 && resolved.len() > 1 {
            bail!("a map file must be the only --map value");
        }
        matrix.game.map_document = resolved.iter().find_map(|(_, d)| d.clone());
        matrix.maps = resolved.into_iter().map(|(name, _)| name).collect();
    }
    if !args.ratio.is_empty() {
        matrix.ratios = args.ratio.clone();
    }
    if !args.pair.is_empty() {
        matrix.pairs = args.pair.clone();
    }
    if let Some(n) = args.iterations {
        matrix.iterations = n;
    }
    if let Some(seed) = args.seed {
        matrix.base_seed = seed;
    }
    matrix.validate()?;
    Ok(matrix)
}

pub fn run(args: &RunArgs, out: &mut impl Write) -> Result<()> {
    let matrix = build_matrix(args)?;
    let threads = args
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    log::info!("running {} episodes on {threads} threads", matrix.len());
    let batch = run_batch(&matrix, threads, args.emit_trajectories)?;
    let summary = export(&batch, &args.out).with_context(|| format!("writing to {}", args.out.display()))?;
    let failed = batch.iter().filter(|b| b.row.error.is_some()).count();
    write!(out, "{}", summary_table(&summary))?;
    writeln!(
        out,
        "{} episodes ({failed} failed) written to {}",
        batch.len(),
        args.out.display()
    )?;
    Ok(())
}

pub fn summarize_cmd(args: &SummarizeArgs, out: &mut impl Write) -> Result<()> {
    let rows = if args.input.is_dir() {
        import_results(&args.input)
    } else {
        read_results_csv(fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?)
    }
    .with_context(|| format!("reading results from {}", args.input.display()))?;
    let summary = summarize(&rows);
    match args.format {
        Format::Csv => write_summary_csv(&summary, out)?,
        Format::Table => write!(out, "{}", summary_table(&summary))?,
    }
    Ok(())
}

pub fn play_config(args: &PlayArgs) -> Result<GameConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => GameConfig::default(),
    };
    if let Some(m) = &args.map {
        let (name, doc) = resolve_map(m)?;
        config.map = name;
        config.map_document = doc;
    }
    if let Some(r) = args.ratio {
        config.speed_ratio = r;
    }
    if let Some(p) = args.pair {
        config.pursuer_behavior = p.pursuer;
        config.evader_behavior = p.evader;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(t) = args.t_max {
        config.t_max = t;
    }
    config.validate()?;
    Ok(config)
}

/// The map as text: `#` wall, `.` free, `+` seen by the pursuer, `P` and
/// `E` the agents (`E` wins a shared cell).
pub fn render_frame(game: &Game) -> Result<String> {
    let map = game.map();
    let region = compute_visibility(map, &game.pursuer(), &game.config().sensor)?;
    let mut grid: Vec<Vec<char>> = (0..map.height())
        .map(|row| {
            (0..map.width())
                .map(|col| {
                    let i = row * map.width() + col;
                    if map.is_occupied_index(i) {
                        '#'
                    } else if region.contains_index(i) {
                        '+'
                    } else {
                        '.'
                    }
                })
                .collect()
        })
        .collect();
    for (pose, ch) in [(game.pursuer(), 'P'), (game.evader(), 'E')] {
        if let Some(c) = map.try_cell(pose.position()) {
            grid[c.row][c.col] = ch;
        }
    }
    let mut out = String::new();
    let last = game.records().last();
    let _ = writeln!(
        out,
        "tick {}/{} detected={} mode={} success={:.3}",
        game.tick(),
        game.total_ticks(),
        game.detected(),
        last.map_or_else(|| "-".to_string(), |r| format!("{:?}", r.pursuer_mode).to_lowercase()),
        game.success_rate()
    );
    for row in grid {
        out.extend(row);
        out.push('\n');
    }
    Ok(out)
}

pub fn play(args: &PlayArgs, out: &mut impl Write) -> Result<()> {
    let config = play_config(args)?;
    let mut game = Game::new(config)?;
    if args.render == Render::TextFrames {
        write!(out, "{}", render_frame(&game)?)?;
    }
    while !game.is_finished() {
        game.step()?;
        if args.render == Render::TextFrames {
            writeln!(out)?;
            write!(out, "{}", render_frame(&game)?)?;
        }
    }
    let result = game.result();
    if let Some(path) = &args.out {
        fs::write(path, result.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.trajectory {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        result.write_trajectory(io::BufWriter::new(file))?;
    }
    writeln!(
        out,
        "success_rate {} ({}/{} ticks), seed {}",
        result.success_rate,
        result.detected_ticks,
        result.ticks.len(),
        result.seed
    )?;
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Run(a) => run(a, out),
        Command::Summarize(a) => summarize_cmd(a, out),
        Command::Play(a) => play(a, out),
    }
}
