use std::path::Path;
use std::process::{Command, Output};

fn stereoslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereoslam")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small noisy sequence written through the `synth` subcommand.
fn synth_sequence(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("scene.txt");
    std::fs::write(&spec, "seed = 5\npoint_count = 1500\nlength = 20\nnoise_sigma = 0.3\n").unwrap();
    let data = dir.join("data");
    let out = stereoslam(&["synth", "--spec", path(&spec), "--out", path(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn synth_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_sequence(dir.path());
    assert_eq!(std::fs::read_dir(data.join("sequences/00/image_0")).unwrap().count(), 21);

    let out_dir = dir.path().join("out");
    let run = stereoslam(&["run", "--dataset", path(&data), "--sequence", "00", "--out", path(&out_dir)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("frames processed   21"), "{stdout}");
    for f in ["trajectory.txt", "metrics.txt", "metrics.csv", "frames.csv"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let trajectory = std::fs::read_to_string(out_dir.join("trajectory.txt")).unwrap();
    assert_eq!(trajectory.lines().count(), 21);
    assert!(trajectory.lines().all(|l| l.split_whitespace().count() == 12));
    assert_eq!(std::fs::read_to_string(out_dir.join("frames.csv")).unwrap().lines().count(), 22);

    let truth = data.join("poses/00.txt");
    let eval = stereoslam(&["eval", "--estimate", path(&out_dir.join("trajectory.txt")), "--truth", path(&truth)]);
    assert_eq!(code(&eval), 0);
    assert!(String::from_utf8(eval.stdout).unwrap().contains("ATE RMSE (m)"));
}

#[test]
fn config_file_and_overrides_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_sequence(dir.path());
    let cfg = dir.path().join("slam.cfg");
    let defaults = stereoslam(&["config"]);
    assert_eq!(code(&defaults), 0);
    std::fs::write(&cfg, defaults.stdout).unwrap();

    let out_dir = dir.path().join("out");
    let run = stereoslam(&[
        "run",
        "--dataset",
        path(&data),
        "--sequence",
        "00",
        "--config",
        path(&cfg),
        "--out",
        path(&out_dir),
        "--no-relocalization",
        "--set",
        "tracker.iterations=12",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8(run.stdout).unwrap().contains("closures accepted  0"));
}

#[test]
fn identical_runs_write_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_sequence(dir.path());
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let run = stereoslam(&["run", "--dataset", path(&data), "--sequence", "00", "--out", path(&out_dir)]);
        assert_eq!(code(&run), 0);
        files.push(std::fs::read(out_dir.join("trajectory.txt")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&stereoslam(&[])), 1);
    assert_eq!(code(&stereoslam(&["bogus"])), 1);
    assert_eq!(code(&stereoslam(&["run", "--dataset", "x"])), 1);
    assert_eq!(code(&stereoslam(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let data = synth_sequence(dir.path());
    let out = dir.path().join("out");
    let bad_key = stereoslam(&["run", "--dataset", path(&data), "--sequence", "00", "--out", path(&out), "--set", "no.such=1"]);
    assert_eq!(code(&bad_key), 1);
    let bad_value =
        stereoslam(&["run", "--dataset", path(&data), "--sequence", "00", "--out", path(&out), "--set", "tracker.iterations=0"]);
    assert_eq!(code(&bad_value), 1);
}

#[test]
fn load_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    let run = stereoslam(&["run", "--dataset", path(&missing), "--sequence", "00", "--out", path(&out)]);
    assert_eq!(code(&run), 2);
    assert!(!run.stderr.is_empty());

    let eval = stereoslam(&["eval", "--estimate", path(&missing), "--truth", path(&missing)]);
    assert_eq!(code(&eval), 2);

    let short = dir.path().join("short.txt");
    let long = dir.path().join("long.txt");
    std::fs::write(&short, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    std::fs::write(&long, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 1\n").unwrap();
    assert_eq!(code(&stereoslam(&["eval", "--estimate", path(&short), "--truth", path(&long)])), 2);

    let spec = dir.path().join("scene.txt");
    std::fs::write(&spec, "point_count = 0\n").unwrap();
    assert_eq!(code(&stereoslam(&["synth", "--spec", path(&spec), "--out", path(&out)])), 2);
}

#[test]
fn featureless_sequence_halts_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_sequence(dir.path());
    // Blank every frame after the first: nothing can be tracked.
    let blank = std::fs::read(data.join("sequences/00/image_0/000000.pgm")).unwrap();
    let header_len = blank.len() - 1241 * 376;
    let mut flat = blank[..header_len].to_vec();
    flat.extend(std::iter::repeat_n(128u8, 1241 * 376));
    for side in ["image_0", "image_1"] {
        for k in 1..21 {
            std::fs::write(data.join(format!("sequences/00/{side}/{k:06}.pgm")), &flat).unwrap();
        }
    }
    let out = dir.path().join("out");
    let run = stereoslam(&[
        "run",
        "--dataset",
        path(&data),
        "--sequence",
        "00",
        "--out",
        path(&out),
        "--set",
        "tracker.max_lost_frames=5",
    ]);
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
    let partial = std::fs::read_to_string(out.join("trajectory.txt")).unwrap();
    assert_eq!(partial.lines().count(), 7);
}
