//! The `roadfuse` command line.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use roadfuse_core::adi::{self, Calibration, Intrinsics, PointCloud};
use roadfuse_core::checkpoint::{import_weights, Checkpoint};
use roadfuse_core::data::{Sample, Split};
use roadfuse_core::metrics::{
    bench_latency, confusion_at, render_error_map, save_error_map, LatencyStats, MetricsReport,
};
use roadfuse_core::model::{ModelConfig, RoadFuseNet};
use roadfuse_core::nn::{Ctx, Module};
use roadfuse_core::train::{evaluate, predict, run_training, DataConfig, TrainConfig};
use roadfuse_tensor::{no_grad, SeedRng, Tensor};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ROADFUSE_SEED";

#[derive(Debug, Parser)]
#[command(name = "roadfuse", version, about = "RGB + LiDAR road segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an Altitude Difference Image from a point cloud or depth map.
    Adi(AdiArgs),
    /// Train a model and write checkpoints and a loss history.
    Train(TrainArgs),
    /// Evaluate a checkpoint (MaxF, PRE, REC, IoU).
    Eval(EvalArgs),
    /// Time eval-mode forward passes.
    Bench(BenchArgs),
    /// Render colour-coded prediction errors.
    Errmap(ErrmapArgs),
    /// Print per-component parameter counts.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
pub struct AdiArgs {
    /// KITTI velodyne scan (`.bin`); needs --calib.
    #[arg(long, conflicts_with = "depth", required_unless_present = "depth")]
    pub velodyne: Option<PathBuf>,
    /// KITTI calibration file.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// 16-bit depth PNG (metres × 256, 0 = no depth); needs --calib or --intrinsics.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// `fx,fy,cx,cy` for depth input.
    #[arg(long, value_delimiter = ',')]
    pub intrinsics: Option<Vec<f64>>,
    /// Camera image whose size sets the ADI extents.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Neighbourhood size (odd, ≥ 3).
    #[arg(long, default_value_t = adi::DEFAULT_KN)]
    pub kn: usize,
    /// Max-pool radius applied for display only.
    #[arg(long, default_value_t = 0)]
    pub dilate: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-resolution protocol defaults.
    Full,
    /// Synthetic overfit run at 128×416.
    Desk,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration; keys mirror the flags below in snake_case.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point when no --config is given.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Output directory for checkpoints, history and report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub kn: Option<usize>,
    /// Key/value token cap for cross-modal attention (0 disables pooling).
    #[arg(long)]
    pub token_cap: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Random horizontal flips.
    #[arg(long)]
    pub flip: bool,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Model variant: baseline, +lidar, +msfm, +bridge or full.
    #[arg(long)]
    pub variant: Option<String>,
    /// Train on `n` synthetic scenes.
    #[arg(long, conflicts_with = "kitti_root")]
    pub synthetic_n: Option<usize>,
    #[arg(long, requires = "synthetic_n")]
    pub synthetic_seed: Option<u64>,
    /// KITTI-Road root (containing `training/`).
    #[arg(long)]
    pub kitti_root: Option<PathBuf>,
    #[arg(long, requires = "kitti_root")]
    pub train_list: Option<PathBuf>,
    #[arg(long, requires = "kitti_root")]
    pub val_list: Option<PathBuf>,
    /// Log every n-th step.
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Evaluate on this KITTI root instead of the checkpoint's data source.
    #[arg(long)]
    pub kitti_root: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Weights to time; otherwise a freshly initialized --variant.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 384)]
    pub height: usize,
    #[arg(long, default_value_t = 1248)]
    pub width: usize,
    /// Override the attention token cap (0 disables pooling).
    #[arg(long)]
    pub token_cap: Option<usize>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ErrmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long)]
    pub kitti_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Render at most this many frames.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Print every step of the ablation ladder.
    #[arg(long)]
    pub ladder: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// `bench` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: String,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub params: usize,
    pub token_cap: Option<usize>,
    pub latency: LatencyStats,
}

/// `params` output for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub variant: String,
    pub components: Vec<(String, usize)>,
    pub total: usize,
    pub inference: usize,
}

pub fn variant_config(name: &str) -> Result<ModelConfig> {
    let key = if name == "full" { "+deepsup" } else { name };
    ModelConfig::ablation_ladder()
        .into_iter()
        .find(|(n, _)| *n == key)
        .map(|(_, c)| c)
        .ok_or_else(|| anyhow!("unknown variant `{name}`; expected baseline, +lidar, +msfm, +bridge or full"))
}

fn cap(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Adi(a) => cmd_adi(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Errmap(a) => cmd_errmap(a),
        Command::Params(a) => cmd_params(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_adi(a: AdiArgs) -> Result<()> {
    let size_from_image = |p: &Path| -> Result<(usize, usize)> {
        let (w, h) = image::image_dimensions(p).with_context(|| format!("reading {}", p.display()))?;
        Ok((h as usize, w as usize))
    };
    let explicit = match (a.height, a.width) {
        (Some(h), Some(w)) => Some((h, w)),
        (None, None) => None,
        _ => bail!("give both --height and --width"),
    };
    let adi = if let Some(bin) = &a.velodyne {
        let Some(calib) = &a.calib else {
            bail!("point-cloud input needs --calib for the LiDAR-to-camera transform");
        };
        let calib = Calibration::load(calib)?;
        let (h, w) = match (explicit, &a.image) {
            (Some(hw), _) => hw,
            (None, Some(img)) => size_from_image(img)?,
            (None, None) => bail!("point-cloud input needs --image or --height/--width for the raster size"),
        };
        let cloud = PointCloud::read_velodyne(bin)?;
        eprintln!("{} points, raster {h}×{w}, kn {}", cloud.points.len(), a.kn);
        adi::cloud_to_adi(&cloud, &calib, h, w, a.kn)?
    } else {
        let path = a.depth.as_ref().expect("clap requires --velodyne or --depth");
        let img = image::open(path)
            .with_context(|| format!("reading {}", path.display()))?
            .into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let k = match (&a.intrinsics, &a.calib) {
            (Some(v), _) if v.len() != 4 => bail!("--intrinsics takes four comma-separated values fx,fy,cx,cy"),
            (Some(v), _) => Intrinsics {
                fx: v[0],
                fy: v[1],
                cx: v[2],
                cy: v[3],
            },
            (None, Some(c)) => Calibration::load(c)?.intrinsics(),
            (None, None) => bail!("depth input needs --intrinsics fx,fy,cx,cy or --calib"),
        };
        let depth: Vec<f64> = img
            .pixels()
            .map(|p| if p.0[0] == 0 { f64::NAN } else { p.0[0] as f64 / 256.0 })
            .collect();
        eprintln!("depth raster {h}×{w}, kn {}", a.kn);
        adi::depth_to_adi(&depth, h, w, k, a.kn)?
    };
    let valid = adi.valid.iter().filter(|&&v| v).count();
    let shown = if a.dilate > 0 {
        adi::dilate_for_display(&adi, a.dilate)
    } else {
        adi
    };
    adi::write_adi_png(&shown, &a.out)?;
    eprintln!("{valid} valid pixels; wrote {}", a.out.display());
    Ok(())
}

/// Applies file, environment and flag settings in that order of precedence
/// (flags win).
pub fn resolve_train_config(a: &TrainArgs, env_seed: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => match a.preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        },
    };
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| anyhow!("{SEED_ENV}=`{s}` is not an unsigned integer"))?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field.clone() { cfg.$field = v; })*};
    }
    set!(seed, lr, weight_decay, epochs, batch_size, height, width, kn, warmup_steps, checkpoint_every);
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if a.grad_clip.is_some() {
        cfg.grad_clip = a.grad_clip;
    }
    if a.flip {
        cfg.flip = true;
    }
    if let Some(v) = &a.variant {
        let token_cap = cfg.model.token_cap;
        cfg.model = ModelConfig {
            token_cap,
            ..variant_config(v)?
        };
    }
    if let Some(c) = a.token_cap {
        cfg.model.token_cap = cap(c);
    }
    if let Some(n) = a.synthetic_n {
        let seed = a.synthetic_seed.unwrap_or(match cfg.data {
            DataConfig::Synthetic { seed, .. } => seed,
            _ => 7,
        });
        cfg.data = DataConfig::Synthetic { seed, n };
    }
    if let Some(root) = &a.kitti_root {
        cfg.data = DataConfig::Kitti {
            root: root.clone(),
            train_list: a.train_list.clone(),
            val_list: a.val_list.clone(),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve_train_config(&a, env_seed.as_deref())?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let text = cfg.to_toml();
    eprintln!("resolved config (seed {}):\n{text}", cfg.seed);
    std::fs::write(a.out.join("config.toml"), &text)?;
    let every = a.log_every.max(1);
    let out = run_training(cfg, Some(&a.out), |r| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!(
                "step {:>5}  epoch {:>3}  lr {:.3e}  loss {:.4}  main {:.4}  {:.0} ms",
                r.step, r.epoch, r.lr, r.loss, r.main, r.ms
            );
        }
    })?;
    write_json(&a.out.join("report.json"), &out.report)?;
    println!("{}", out.report.to_text());
    if let Some(p) = out.final_checkpoint {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

/// Model and training configuration stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(RoadFuseNet<f32>, TrainConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
        .with_context(|| format!("{}: embedded configuration", path.display()))?;
    let model = RoadFuseNet::new(cfg.model, cfg.seed)?;
    import_weights(&model, &ckpt.weights())?;
    Ok((model, cfg, ckpt))
}

fn load_split(cfg: &TrainConfig, split: SplitArg, kitti_root: &Option<PathBuf>) -> Result<Vec<Sample>> {
    let data = match kitti_root {
        Some(root) => DataConfig::Kitti {
            root: root.clone(),
            train_list: None,
            val_list: None,
        },
        None => cfg.data.clone(),
    };
    // Synthetic data has no held-out split; both names refer to the same scenes.
    let samples = data.load(split.into(), cfg.extents(), cfg.kn)?;
    if samples.is_empty() {
        bail!("no samples in the {split:?} split");
    }
    Ok(samples)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, cfg, ckpt) = load_model(&a.checkpoint)?;
    eprintln!("checkpoint step {}, seed {}", ckpt.step, cfg.seed);
    let samples = load_split(&cfg, a.split, &a.kitti_root)?;
    let (_, sweep) = evaluate(&model, &samples, cfg.batch_size)?;
    let report = MetricsReport::new(&sweep, model.inference_param_count(), None);
    println!("{}", report.to_text());
    if let Some(saved) = ckpt.metrics.as_ref().and_then(|m| serde_json::from_value::<MetricsReport>(m.clone()).ok()) {
        let delta = (saved.maxf - report.maxf).abs().max((saved.iou - report.iou).abs());
        eprintln!("metrics recorded at save time: MaxF {:.2} IoU {:.2} (max delta {delta:.2e})", saved.maxf, saved.iou);
    }
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (mut model, name) = match &a.checkpoint {
        Some(p) => (load_model(p)?.0, p.display().to_string()),
        None => (RoadFuseNet::<f32>::new(variant_config(&a.variant)?, 0)?, a.variant.clone()),
    };
    if let Some(c) = a.token_cap {
        model.set_token_cap(cap(c));
    }
    roadfuse_core::encoder::check_extents(a.height, a.width)?;
    let mut rng = SeedRng::new(0);
    let n = 3 * a.height * a.width;
    let shape = [1, 3, a.height, a.width];
    let rgb = Tensor::from_vec(&shape, (0..n).map(|_| rng.normal() as f32).collect())?;
    let adi = Tensor::from_vec(&shape, (0..n).map(|_| rng.normal() as f32).collect())?;
    let ctx = Ctx::eval();
    let adi_in = model.lidar.is_some().then_some(&adi);
    eprintln!(
        "benchmarking {name}: 1×3×{}×{}, {} warmup + {} timed forwards",
        a.height, a.width, a.warmup, a.iters
    );
    let latency = bench_latency(a.warmup, a.iters, || {
        no_grad(|| model.forward(&rgb, adi_in, &ctx)).map(|_| ())
    })?;
    let report = BenchReport {
        variant: name,
        batch: 1,
        height: a.height,
        width: a.width,
        warmup: a.warmup,
        params: model.inference_param_count(),
        token_cap: model.config.token_cap,
        latency,
    };
    let l = &report.latency;
    println!(
        "mean {:.2} ms  median {:.2} ms  p95 {:.2} ms  FPS {:.2}  ({} iters)",
        l.mean_ms, l.median_ms, l.p95_ms, l.fps, l.iters
    );
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_errmap(a: ErrmapArgs) -> Result<()> {
    let (model, cfg, _) = load_model(&a.checkpoint)?;
    let mut samples = load_split(&cfg, a.split, &a.kitti_root)?;
    if let Some(l) = a.limit {
        samples.truncate(l);
    }
    let (_, sweep) = evaluate(&model, &samples, cfg.batch_size)?;
    let thr = sweep.threshold();
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    eprintln!("dataset MaxF {:.2} at threshold {thr:.4}", sweep.maxf);
    for s in &samples {
        let prob = predict(&model, s)?;
        let img = render_error_map(&s.rgb, &prob, &s.truth, Some(&s.valid), thr, s.height, s.width)?;
        let counts = confusion_at(&prob, &s.truth, Some(&s.valid), thr)?;
        let path = a.out.join(format!("{}.png", s.id));
        save_error_map(&img, &counts, &path)?;
        println!("{}  F1 {:.2}  IoU {:.2}", path.display(), 100.0 * counts.f1(), 100.0 * counts.iou());
    }
    Ok(())
}

pub fn params_report(variant: &str) -> Result<ParamsReport> {
    let net = RoadFuseNet::<f32>::new(variant_config(variant)?, 0)?;
    Ok(ParamsReport {
        variant: variant.to_string(),
        components: net.breakdown(),
        total: net.param_count(),
        inference: net.inference_param_count(),
    })
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let names: Vec<String> = if a.ladder {
        ModelConfig::ablation_ladder().iter().map(|(n, _)| n.to_string()).collect()
    } else {
        vec![a.variant.clone()]
    };
    let reports = names.iter().map(|n| params_report(n)).collect::<Result<Vec<_>>>()?;
    for r in &reports {
        println!("{}", r.variant);
        for (name, n) in &r.components {
            println!("  {name:<16} {n:>10}  ({:.3}M)", *n as f64 / 1e6);
        }
        println!("  {:<16} {:>10}  ({:.3}M)", "total", r.total, r.total as f64 / 1e6);
        println!("  {:<16} {:>10}  ({:.3}M)", "inference", r.inference, r.inference as f64 / 1e6);
    }
    if let Some(p) = &a.json {
        write_json(p, &reports)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_resolve() {
        assert!(!variant_config("baseline").unwrap().lidar);
        let full = variant_config("full").unwrap();
        assert!(full.bridge && full.deep_supervision);
        assert_eq!(full, variant_config("+deepsup").unwrap());
        assert!(variant_config("+everything").is_err());
    }

    #[test]
    fn zero_token_cap_disables_pooling() {
        assert_eq!(cap(0), None);
        assert_eq!(cap(64), Some(64));
    }
}
