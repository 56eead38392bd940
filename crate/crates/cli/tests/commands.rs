use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pursuit_core::engine::{run_episode, EpisodeResult, GameConfig};
use pursuit_core::experiment::{read_results_csv, summarize, summary_table, BehaviorPair};

fn pursuit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pursuit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pursuit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_results_and_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&[
        "run", "--map", "brick_room", "--ratio", "0.5,2", "--pair", "S-R", "--pair", "R-R",
        "--iterations", "2", "--seed", "11", "--out", path(&out), "--parallelism", "2",
        "--emit-trajectories",
    ]);
    let rows = read_results_csv(fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.error.is_none() && r.ticks == Some(90)));
    assert_eq!(fs::read_dir(out.join("trajectories")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(out.join("episodes")).unwrap().count(), 8);
    assert!(stdout.starts_with(&summary_table(&summarize(&rows))));
    assert!(stdout.contains("8 episodes (0 failed)"));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        ok(&[
            "run", "--map", "enclosed_room", "--ratio", "1", "--iterations", "3", "--out", path(&out),
            "--parallelism", threads,
        ]);
        (fs::read(out.join("results.csv")).unwrap(), fs::read(out.join("summary.json")).unwrap())
    };
    assert_eq!(run("a", "1"), run("b", "5"));
}

#[test]
fn summarize_reads_dir_or_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["run", "--map", "brick_room", "--ratio", "1", "--pair", "S-S", "--iterations", "3", "--out", path(&out)]);
    let rows = read_results_csv(fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    let table = ok(&["summarize", "--in", path(&out)]);
    assert_eq!(table, summary_table(&summarize(&rows)));
    let csv = ok(&["summarize", "--in", path(&out.join("results.csv")), "--format", "csv"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("map,ratio,pair,n,mean,median,q1,q3,min,max,std"));
    assert!(lines[1].starts_with("brick_room,1,S-S,3,"));
}

#[test]
fn matrix_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("m.toml");
    fs::write(
        &matrix,
        "maps = [\"brick_room\"]\nratios = [0.5]\npairs = [\"S-R\"]\niterations = 4\nbase_seed = 5\n\n[game]\nt_max = 12.0\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&["run", "--matrix", path(&matrix), "--iterations", "2", "--out", path(&out)]);
    let rows = read_results_csv(fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.ticks == Some(12) && r.pair == BehaviorPair::SR && r.ratio == 0.5));
}

#[test]
fn ascii_map_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("box.map");
    let mut doc = String::from("resolution 0.1\n");
    for r in 0..30 {
        for c in 0..30 {
            doc.push(if r == 0 || c == 0 || r == 29 || c == 29 { '#' } else { '.' });
        }
        doc.push('\n');
    }
    fs::write(&map, &doc).unwrap();
    let out = dir.path().join("out");
    ok(&["run", "--map", path(&map), "--ratio", "1", "--pair", "S-S", "--iterations", "1", "--out", path(&out)]);
    let rows = read_results_csv(fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows[0].map, "box");
    assert!(rows[0].error.is_none(), "{:?}", rows[0].error);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = pursuit(&["run", "--map", "atlantis", "--out", path(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("atlantis"));
    let res = pursuit(&["run", "--ratio", "-1", "--out", path(&out)]);
    assert!(!res.status.success());
    let res = pursuit(&["run", "--pair", "XY", "--out", path(&out)]);
    assert!(!res.status.success());
}

#[test]
fn play_matches_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("ep.json");
    let traj = dir.path().join("ep.csv");
    let stdout = ok(&[
        "play", "--map", "brick_room", "--ratio", "2", "--pair", "S-R", "--seed", "42", "--out", path(&json),
        "--trajectory", path(&traj),
    ]);
    let config = GameConfig {
        map: "brick_room".into(),
        speed_ratio: 2.0,
        evader_behavior: pursuit_core::agents::Behavior::Random,
        seed: 42,
        ..GameConfig::default()
    };
    let expected = run_episode(&config).unwrap();
    let got = EpisodeResult::from_json(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(got, expected);
    assert_eq!(fs::read_to_string(&traj).unwrap(), expected.trajectory_csv());
    assert!(stdout.contains(&format!("success_rate {}", expected.success_rate)));
}

#[test]
fn text_frames_show_every_tick() {
    let stdout = ok(&["play", "--map", "enclosed_room", "--seed", "8", "--t-max", "5", "--render", "text-frames"]);
    let headers: Vec<&str> = stdout.lines().filter(|l| l.starts_with("tick ")).collect();
    assert_eq!(headers.len(), 6);
    assert!(headers[0].starts_with("tick 0/5"));
    assert!(headers[5].starts_with("tick 5/5"));
    let first: Vec<&str> = stdout.lines().skip(1).take(80).collect();
    assert!(first.iter().all(|l| l.chars().count() == 80));
    let body: String = first.concat();
    assert_eq!(body.matches('P').count(), 1);
    assert_eq!(body.matches('E').count(), 1);
    // spawn guarantees the evader starts in view
    assert!(body.contains('+'));
}
