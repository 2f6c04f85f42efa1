//! Dataset loading, checkpoints and training behaviour end to end.

use std::path::Path;

use image::{Rgb, RgbImage};
use roadfuse_core::adi::{Calibration, PointCloud};
use roadfuse_core::checkpoint::{export_weights, import_weights, Checkpoint};
use roadfuse_core::data::{list_frames, load_kitti_sample, make_batch, Extents, Split};
use roadfuse_core::model::{ModelConfig, RoadFuseNet};
use roadfuse_core::nn::{Conv2d, Ctx, Module};
use roadfuse_core::train::{evaluate, AdamW, AdamWHyper, DataConfig, StepRecord, TrainConfig, Trainer};
use roadfuse_core::Error;
use roadfuse_tensor::{SeedRng, Tensor};

const KITTI_CALIB: &str = "P0: 1 0 0 0 0 1 0 0 0 0 1 0
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 -0.08 1 0 0 -0.27
";

/// A one-frame KITTI-Road tree at 375×1242 with a flat road ahead.
fn write_kitti_frame(root: &Path, frame: &str) {
    let dir = root.join("training");
    for sub in ["image_2", "velodyne", "calib", "gt_image_2"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let (w, h) = (1242u32, 375u32);
    RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 90]))
        .save(dir.join("image_2").join(format!("{frame}.png")))
        .unwrap();
    // Lower half is road and valid, a left strip is invalid.
    RgbImage::from_fn(w, h, |x, y| {
        let road = y >= h / 2;
        let valid = x >= 100;
        Rgb([if valid { 255 } else { 0 }, 0, if road { 255 } else { 0 }])
    })
    .save(dir.join("gt_image_2").join(format!("{}", frame.replace('_', "_road_") + ".png")))
    .unwrap();
    std::fs::write(dir.join("calib").join(format!("{frame}.txt")), KITTI_CALIB).unwrap();
    let mut pts = Vec::new();
    for i in 0..200 {
        for j in -40..40 {
            pts.push([5.0 + i as f64 * 0.2, j as f64 * 0.25, -1.7 + if j > 30 { 1.0 } else { 0.0 }]);
        }
    }
    std::fs::write(
        dir.join("velodyne").join(format!("{frame}.bin")),
        PointCloud::new(pts).to_velodyne_bytes(),
    )
    .unwrap();
}

#[test]
fn kitti_frame_is_standardized() {
    let tmp = tempfile::tempdir().unwrap();
    write_kitti_frame(tmp.path(), "um_000003");
    let s = load_kitti_sample(tmp.path(), "training", "um_000003", Extents::KITTI, 11).unwrap();
    assert_eq!((s.height, s.width), (384, 1248));
    assert_eq!(s.rgb.len(), 3 * 384 * 1248);
    assert_eq!(s.adi.pixels.len(), 384 * 1248);
    assert_eq!(s.truth.len(), 384 * 1248);
    assert!(s.adi.valid.iter().any(|&v| v));
    // 375 rows scale to 377 and are cropped by one row top and bottom.
    let at = |y: usize, x: usize| y * 1248 + x;
    assert!(s.truth[at(350, 600)] && s.valid[at(350, 600)]);
    assert!(!s.truth[at(50, 600)] && s.valid[at(50, 600)]);
    assert!(!s.valid[at(350, 20)]);
    let again = load_kitti_sample(tmp.path(), "training", "um_000003", Extents::KITTI, 11).unwrap();
    assert_eq!(s, again);
}

#[test]
fn missing_and_malformed_inputs_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    write_kitti_frame(tmp.path(), "um_000001");
    let bin = tmp.path().join("training/velodyne/um_000001.bin");
    std::fs::remove_file(&bin).unwrap();
    let err = load_kitti_sample(tmp.path(), "training", "um_000001", Extents::KITTI, 11).unwrap_err();
    assert!(err.to_string().contains("um_000001.bin"), "{err}");

    write_kitti_frame(tmp.path(), "um_000002");
    std::fs::write(tmp.path().join("training/calib/um_000002.txt"), "P2: 1 2 3\n").unwrap();
    let err = load_kitti_sample(tmp.path(), "training", "um_000002", Extents::KITTI, 11).unwrap_err();
    assert!(matches!(err, Error::Malformed { .. }), "{err}");
    assert!(Calibration::parse(KITTI_CALIB).is_ok());
}

#[test]
fn fallback_split_sends_every_fifth_frame_to_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("training/image_2");
    std::fs::create_dir_all(&dir).unwrap();
    for i in (0..10).rev() {
        std::fs::write(dir.join(format!("um_{i:06}.png")), b"").unwrap();
    }
    let val = list_frames(tmp.path(), None, Split::Val).unwrap();
    assert_eq!(val, vec!["um_000004", "um_000009"]);
    assert_eq!(list_frames(tmp.path(), None, Split::Train).unwrap().len(), 8);
    let list = tmp.path().join("val.txt");
    std::fs::write(&list, "# held out\num_000001\n\num_000007\n").unwrap();
    assert_eq!(list_frames(tmp.path(), Some(&list), Split::Val).unwrap(), vec!["um_000001", "um_000007"]);
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        height: 32,
        width: 64,
        kn: 3,
        epochs: 1,
        max_steps: Some(3),
        batch_size: 2,
        data: DataConfig::Synthetic { seed: 1, n: 4 },
        model: ModelConfig {
            token_cap: Some(16),
            ..ModelConfig::default()
        },
        ..TrainConfig::desk()
    }
}

fn train_tiny(seed: u64) -> (Trainer, Vec<StepRecord>) {
    let cfg = tiny_config(seed);
    let samples = cfg.data.load(Split::Train, cfg.extents(), cfg.kn).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let mut hist = Vec::new();
    t.fit(&samples, |_, r| {
        hist.push(r.clone());
        Ok(())
    })
    .unwrap();
    (t, hist)
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (a, ha) = train_tiny(5);
    let (b, hb) = train_tiny(5);
    assert_eq!(ha.len(), 2);
    for (x, y) in ha.iter().zip(&hb) {
        assert_eq!(
            (x.loss.to_bits(), x.main.to_bits(), x.lr.to_bits()),
            (y.loss.to_bits(), y.main.to_bits(), y.lr.to_bits())
        );
    }
    assert_eq!(export_weights(&a.model), export_weights(&b.model));
    let (c, _) = train_tiny(6);
    assert_ne!(export_weights(&a.model), export_weights(&c.model));
}

#[test]
fn checkpoint_round_trip_preserves_weights_and_metrics() {
    let (t, _) = train_tiny(3);
    let samples = t.cfg.data.load(Split::Train, t.cfg.extents(), t.cfg.kn).unwrap();
    let (_, before) = evaluate(&t.model, &samples, 2).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let p1 = tmp.path().join("a.rfck");
    let p2 = tmp.path().join("b.rfck");
    t.checkpoint(None).unwrap().save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let restored = Trainer::from_checkpoint(&loaded).unwrap();
    assert_eq!(restored.step, t.step);
    assert_eq!(restored.opt.m, t.opt.m);
    let (_, after) = evaluate(&restored.model, &samples, 2).unwrap();
    assert!((before.maxf - after.maxf).abs() < 1e-6);
    assert!((before.iou - after.iou).abs() < 1e-6);
    assert_eq!(before.counts, after.counts);
}

#[test]
fn renamed_tensor_is_rejected_by_name() {
    let net = RoadFuseNet::<f32>::new(ModelConfig::baseline(), 0).unwrap();
    let mut w = export_weights(&net);
    w[7].name = "decoder.renamed".into();
    let err = import_weights(&net, &w).unwrap_err().to_string();
    assert!(err.contains("decoder.renamed"), "{err}");
    let mut w = export_weights(&net);
    w[3].shape = vec![1, 2, 3];
    assert!(import_weights(&net, &w).is_err());
}

#[test]
fn non_finite_gradient_rejects_the_step() {
    let mut rng = SeedRng::new(0);
    let conv = Conv2d::<f32>::pointwise(2, 1, &mut rng);
    let before = conv.weight.to_vec();
    let mut opt = AdamW::new(&conv);
    let x = Tensor::from_vec(&[1, 2, 1, 1], vec![f32::NAN, 1.0]).unwrap();
    conv.forward(&x).unwrap().sum().backward().unwrap();
    let h = AdamWHyper {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let err = opt.step(&conv, &h, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "weight"), "{err}");
    assert_eq!(conv.weight.to_vec(), before);
    assert_eq!(opt.t, 0);
}

#[test]
fn batches_stack_samples_in_order() {
    let cfg = tiny_config(0);
    let samples = cfg.data.load(Split::Train, cfg.extents(), cfg.kn).unwrap();
    let b = make_batch(&[&samples[1], &samples[0]]).unwrap();
    assert_eq!(b.rgb.shape(), &[2, 3, 32, 64]);
    assert_eq!(&b.rgb.data()[..3 * 32 * 64], &samples[1].rgb_input()[..]);
    let net = RoadFuseNet::<f32>::new(cfg.model, 0).unwrap();
    let out = net.forward(&b.rgb, Some(&b.adi), &Ctx::eval()).unwrap();
    assert_eq!(out.main.shape(), &[2, 1, 32, 64]);
    assert!(net.param_count() > 0);
}
