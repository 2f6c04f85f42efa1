//! The `roadfuse` binary driven as a user would.

use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use roadfuse_cli::{resolve_train_config, BenchReport, Cli, ParamsReport, SEED_ENV};
use roadfuse_core::metrics::MetricsReport;
use roadfuse_core::train::read_history;

fn roadfuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadfuse"))
        .args(args)
        .current_dir(cwd)
        .env_remove(SEED_ENV)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Rejections exit nonzero with a single `error:` line.
fn assert_rejected(o: &Output, needle: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].contains(needle), "{err}");
}

const TINY: &[&str] = &[
    "--preset", "desk", "--height", "32", "--width", "64", "--kn", "3", "--max-steps", "3",
    "--synthetic-n", "4", "--token-cap", "16", "--batch-size", "2",
];

#[test]
fn params_table_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = roadfuse(&["params", "--ladder", "--json", "p.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let reports: Vec<ParamsReport> = serde_json::from_slice(&std::fs::read(tmp.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 5);
    for r in &reports {
        assert_eq!(r.components.iter().map(|(_, n)| n).sum::<usize>(), r.total);
    }
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("lidar_encoder") && text.contains("bridge"));
}

#[test]
fn rejections_are_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    assert_rejected(&roadfuse(&["params", "--frobnicate"], tmp.path()), "--frobnicate");
    assert_rejected(&roadfuse(&["eval", "--checkpoint", "nope.rfck"], tmp.path()), "nope.rfck");
    assert_rejected(
        &roadfuse(&["train", "--out", "o", "--synthetic-n", "3", "--kitti-root", "k"], tmp.path()),
        "cannot be used with",
    );
    assert_rejected(&roadfuse(&["train", "--out", "o", "--height", "100"], tmp.path()), "128");
    std::fs::write(tmp.path().join("bad.toml"), "lr = 0.1\nepochs = \"many\"\n").unwrap();
    assert_rejected(&roadfuse(&["train", "--out", "o", "--config", "bad.toml"], tmp.path()), "line 2");
    std::fs::write(tmp.path().join("neg.toml"), "lr = -1.0\n").unwrap();
    assert_rejected(&roadfuse(&["train", "--out", "o", "--config", "neg.toml"], tmp.path()), "lr must be positive");
    assert_rejected(&roadfuse(&["bench", "--variant", "huge"], tmp.path()), "unknown variant");
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "seed = 11\nlr = 0.001\n").unwrap();
    let c = cfg.to_str().unwrap();
    let args = |extra: &[&str]| {
        let mut v = vec!["roadfuse", "train", "--out", "o", "--config", c];
        v.extend_from_slice(extra);
        match Cli::try_parse_from(v).unwrap().command {
            roadfuse_cli::Command::Train(a) => a,
            _ => unreachable!(),
        }
    };
    assert_eq!(resolve_train_config(&args(&[]), None).unwrap().seed, 11);
    assert_eq!(resolve_train_config(&args(&[]), Some("12")).unwrap().seed, 12);
    assert_eq!(resolve_train_config(&args(&["--seed", "13"]), Some("12")).unwrap().seed, 13);
    assert!(resolve_train_config(&args(&[]), Some("twelve")).is_err());
    let r = resolve_train_config(&args(&["--lr", "0.5", "--token-cap", "0", "--variant", "+lidar"]), None).unwrap();
    assert_eq!(r.lr, 0.5);
    assert_eq!(r.model.token_cap, None);
    assert!(r.model.lidar && !r.model.msfm);
}

#[test]
fn train_eval_errmap_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "run", "--seed", "4"];
    args.extend_from_slice(TINY);
    let o = roadfuse(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.contains("seed = 4"), "{log}");
    let run = tmp.path().join("run");
    let written = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("seed = 4") && written.contains("token_cap = 16"));
    assert_eq!(read_history(&run.join("history.jsonl")).unwrap().len(), 3);

    let o = roadfuse(&["eval", "--checkpoint", "run/final.rfck", "--split", "train", "--json", "e.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let saved: MetricsReport = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    let again: MetricsReport = serde_json::from_slice(&std::fs::read(tmp.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(saved, again);

    let o = roadfuse(&["errmap", "--checkpoint", "run/final.rfck", "--out", "maps", "--limit", "2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = std::fs::read_dir(tmp.path().join("maps"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2);
    let (w, h) = image::image_dimensions(tmp.path().join("maps/synth_7_0000.png")).unwrap();
    assert_eq!((w, h), (64, 32));
}

#[test]
fn env_seed_reaches_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", "run"];
    args.extend_from_slice(&TINY[..8]);
    args.extend_from_slice(&["--max-steps", "1"]);
    args.extend_from_slice(&TINY[10..]);
    let o = Command::new(env!("CARGO_BIN_EXE_roadfuse"))
        .args(&args)
        .current_dir(tmp.path())
        .env(SEED_ENV, "21")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(tmp.path().join("run/config.toml")).unwrap().contains("seed = 21"));
}

#[test]
fn bench_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let o = roadfuse(
        &["bench", "--height", "64", "--width", "96", "--warmup", "1", "--iters", "4", "--token-cap", "16", "--json", "b.json"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: BenchReport = serde_json::from_slice(&std::fs::read(tmp.path().join("b.json")).unwrap()).unwrap();
    assert_eq!((r.batch, r.height, r.width, r.latency.iters), (1, 64, 96, 4));
    assert!(r.latency.median_ms <= r.latency.p95_ms);
    assert!((r.latency.fps - 1000.0 / r.latency.mean_ms).abs() < 1e-9);
}

#[test]
fn adi_from_depth_png() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (48u32, 32u32);
    // Flat ground 1.6 below the camera with a wall in the upper right.
    let (f, cy) = (30.0, 10.0);
    let depth = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(w, h, |x, y| {
        let v = y as f64;
        let d = if x > 30 && y < 20 {
            8.0
        } else if v > cy + 1.0 {
            f * 1.6 / (v - cy)
        } else {
            0.0
        };
        image::Luma([(d * 256.0).round().min(65535.0) as u16])
    });
    depth.save(tmp.path().join("d.png")).unwrap();
    let o = roadfuse(
        &["adi", "--depth", "d.png", "--intrinsics", "30,30,24,10", "--kn", "5", "--out", "a.png"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(tmp.path().join("a.png")).unwrap().into_luma8();
    assert_eq!(img.dimensions(), (w, h));
    assert!(img.pixels().any(|p| p.0[0] > 0));
    assert_rejected(&roadfuse(&["adi", "--depth", "d.png", "--out", "b.png"], tmp.path()), "--intrinsics");
    assert_rejected(&roadfuse(&["adi", "--depth", "d.png", "--intrinsics", "1,2", "--out", "b.png"], tmp.path()), "four");
    assert_rejected(&roadfuse(&["adi", "--velodyne", "x.bin", "--out", "b.png"], tmp.path()), "--calib");
}
