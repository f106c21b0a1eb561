use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn steerkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("STEERKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn last_line(o: &Output) -> String {
    stdout(o).lines().last().unwrap_or_default().to_string()
}

fn value(o: &Output, key: &str) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().split_whitespace().next().unwrap().parse().unwrap()))
        .unwrap_or_else(|| panic!("no '{key}' in output:\n{}", stdout(o)))
}

#[test]
fn frame_gen_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = steerkit(&["frame", "gen", "--family", "pixel", "--size", "3", "--out", "p.ftns"], d);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(last_line(&o), "RESULT frame-gen ok");
    assert!(d.join("p.ftns").exists() && d.join("p.meta").exists());

    let o = steerkit(&["frame", "check", "--in", "p.ftns"], d);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(value(&o, "A "), 1.0);
    assert_eq!(value(&o, "B "), 1.0);
    assert_eq!(value(&o, "rank "), 9.0);

    let o = steerkit(
        &["frame", "gen", "--family", "gauss", "--size", "3", "--sigma", "1.0", "--order", "2", "--out", "g.ftns"],
        d,
    );
    assert_eq!(value(&o, "M "), 9.0);

    steerkit(&["frame", "gen", "--family", "naive", "--order", "2", "--out", "n.ftns"], d);
    let o = steerkit(&["frame", "check", "--in", "n.ftns"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(value(&o, "A "), 0.0);
    assert_eq!(last_line(&o), "RESULT frame-check fail");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = steerkit(&["frame", "gen", "--family", "wavelet", "--out", "x.ftns"], d);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(last_line(&o), "RESULT frame-gen fail");
    let o = steerkit(&["frobnicate"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(last_line(&o).starts_with("RESULT "));
    let o = steerkit(&["frame", "check", "--in", "missing.ftns"], d);
    assert_eq!(o.status.code(), Some(1));
    let o = steerkit(&["eval", "blobs", "--ckpt", "nowhere"], d);
    assert_eq!(o.status.code(), Some(1));
    let o = steerkit(&["gradcheck", "--spec", "Conv2d[4]->Pool[2]"], d);
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_steerkit"))
        .args(["data", "dump", "--count", "1", "--out", "x"])
        .current_dir(d)
        .env("STEERKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn steer_solve_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    steerkit(&["frame", "gen", "--family", "gauss", "--set", "total", "--out", "g.ftns"], d);
    let o = steerkit(&["steer", "solve", "--frame", "g.ftns", "--group", "rotation", "--angle", "0"], d);
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<Vec<f64>> = stdout(&o)
        .lines()
        .take(6)
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
        }
    }

    let o = steerkit(
        &["steer", "verify", "--frame", "g.ftns", "--group", "rotation", "--samples", "16", "--tol", "1e-3"],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("tau,residual,composition_defect\n"));
    assert_eq!(out.lines().filter(|l| l.starts_with(|c: char| c == '-' || c.is_ascii_digit())).count(), 16);

    steerkit(&["frame", "gen", "--family", "random", "--size", "5", "--out", "r.ftns"], d);
    let o = steerkit(&["steer", "verify", "--frame", "r.ftns", "--group", "rotation", "--csv", "r.csv"], d);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(last_line(&o), "RESULT steer-verify fail");
    assert!(fs::read_to_string(d.join("r.csv")).unwrap().lines().count() == 17);

    // Scaling needs a Gaussian frame.
    steerkit(&["frame", "gen", "--family", "pixel", "--out", "p.ftns"], d);
    let o = steerkit(&["steer", "solve", "--frame", "p.ftns", "--group", "scaling", "--scale", "1.2"], d);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_dynamic_network() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerkit(&["gradcheck", "--spec", "Conv2d[4]->DynResBlock[8]", "--tol", "1e-4"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(last_line(&o), "RESULT gradcheck ok");
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = |out: &str| {
        steerkit(
            &[
                "train", "blobs", "--mode", "binary", "--steps", "30", "--seed", "4", "--size", "32",
                "--eval-interval", "10", "--eval-samples", "4", "--out", out,
            ],
            d,
        )
    };
    let o = train("run");
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,loss,pixel_f,ods,ois"));
    assert_eq!(csv.lines().count(), 4);

    // Byte-identical artifacts on a rerun.
    train("again");
    for f in ["metrics.csv", "config.txt", "checkpoint/manifest.txt", "checkpoint/l0.w.ftns"] {
        assert_eq!(fs::read(d.join("run").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }

    let o = steerkit(&["eval", "blobs", "--ckpt", "run", "--n", "4"], d);
    assert_eq!(o.status.code(), Some(0));
    let f = value(&o, "pixel_f");
    assert!((0.0..=1.0).contains(&f));
    assert!(value(&o, "ois") >= value(&o, "ods"));

    let o = steerkit(&["export", "pose-maps", "--ckpt", "run/checkpoint", "--seed", "9", "--out", "fig"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let mut panels: Vec<String> = fs::read_dir(d.join("fig"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    panels.sort();
    assert_eq!(
        panels,
        ["1_input.pgm", "2_gradient_magnitude.pgm", "3_prediction.pgm", "4_pose.pgm", "5_target.pgm"]
    );
    for p in &panels {
        let (w, h, _) = steerkit::io::read_pgm(&d.join("fig").join(p)).unwrap();
        assert_eq!((w, h), (32, 32));
    }
    let sidecar = fs::read_to_string(d.join("fig/normalization.csv")).unwrap();
    assert_eq!(sidecar.lines().filter(|l| l.contains(".pgm")).count(), 5);

    // A static network has no pose map to export.
    let o = steerkit(
        &["train", "blobs", "--steps", "2", "--size", "32", "--eval-samples", "2", "--spec", "Conv2d[2]", "--out", "flat"],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    let o = steerkit(&["export", "pose-maps", "--ckpt", "flat", "--out", "fig2"], d);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_dump_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = steerkit(&["data", "dump", "--mode", "hard", "--count", "3", "--seed", "7", "--size", "32", "--out", out], d);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["manifest.csv", "0000_image.pgm", "0002_target.pgm"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    assert_eq!(fs::read_to_string(d.join("a/manifest.csv")).unwrap().lines().count(), 4);
}
