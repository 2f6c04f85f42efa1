//! Samples, KITTI-Road ingestion, ground-truth decoding and the procedural
//! dataset used for desk-scale training.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use roadfuse_tensor::{SeedRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::adi::{self, Adi, Calibration, Intrinsics, PointCloud};
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Network input extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extents {
    pub height: usize,
    pub width: usize,
}

impl Extents {
    pub const KITTI: Extents = Extents {
        height: 384,
        width: 1248,
    };

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// One frame ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Interleaved 8-bit RGB, kept for rendering.
    pub rgb: Vec<u8>,
    pub adi: Adi,
    pub truth: Vec<bool>,
    pub valid: Vec<bool>,
}

/// `[3, H, W]` planes scaled to `[0, 1]` then standardized per channel.
pub fn normalize_planes(planes: [&[u8]; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(planes[0].len() * 3);
    for (c, plane) in planes.iter().enumerate() {
        out.extend(
            plane
                .iter()
                .map(|&v| (v as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]),
        );
    }
    out
}

impl Sample {
    pub fn rgb_input(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let planes: Vec<Vec<u8>> = (0..3).map(|c| (0..n).map(|i| self.rgb[3 * i + c]).collect()).collect();
        normalize_planes([&planes[0], &planes[1], &planes[2]])
    }

    /// The ADI replicated into three channels, then standardized like RGB.
    pub fn adi_input(&self) -> Vec<f32> {
        let p = &self.adi.pixels;
        normalize_planes([p, p, p])
    }

    pub fn truth_f32(&self) -> Vec<f32> {
        self.truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()
    }

    pub fn flipped(&self) -> Sample {
        let (h, w) = (self.height, self.width);
        let flip = |i: usize| (i / w) * w + (w - 1 - i % w);
        let mut s = self.clone();
        for i in 0..h * w {
            let j = flip(i);
            s.rgb[3 * i..3 * i + 3].copy_from_slice(&self.rgb[3 * j..3 * j + 3]);
            s.adi.pixels[i] = self.adi.pixels[j];
            s.adi.valid[i] = self.adi.valid[j];
            s.truth[i] = self.truth[j];
            s.valid[i] = self.valid[j];
        }
        s
    }
}

/// Network tensors for a batch of samples.
pub struct Batch {
    pub rgb: Tensor<f32>,
    pub adi: Tensor<f32>,
    pub truth: Tensor<f32>,
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Invalid(format!(
            "sample {} is {}×{}, batch is {h}×{w}",
            s.id, s.height, s.width
        )));
    }
    let b = samples.len();
    let mut rgb = Vec::with_capacity(b * 3 * h * w);
    let mut adi = Vec::with_capacity(b * 3 * h * w);
    let mut truth = Vec::with_capacity(b * h * w);
    for s in samples {
        rgb.extend(s.rgb_input());
        adi.extend(s.adi_input());
        truth.extend(s.truth_f32());
    }
    Ok(Batch {
        rgb: Tensor::from_vec(&[b, 3, h, w], rgb)?,
        adi: Tensor::from_vec(&[b, 3, h, w], adi)?,
        truth: Tensor::from_vec(&[b, 1, h, w], truth)?,
    })
}

/// KITTI-Road ground truth: road where blue > 0, valid where red > 0.
/// Grayscale images are a direct mask with every pixel valid.
pub fn decode_gt(img: &DynamicImage) -> (Vec<bool>, Vec<bool>) {
    use image::ColorType::*;
    match img.color() {
        L8 | La8 | L16 | La16 => {
            let g = img.to_luma8();
            (g.pixels().map(|p| p.0[0] > 0).collect(), vec![true; g.len()])
        }
        _ => {
            let c = img.to_rgb8();
            (
                c.pixels().map(|p| p.0[2] > 0).collect(),
                c.pixels().map(|p| p.0[0] > 0).collect(),
            )
        }
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Scale to the target width, then center-crop or zero-pad the height.
fn standardize<P: image::Pixel<Subpixel = u8> + 'static>(
    img: &ImageBuffer<P, Vec<u8>>,
    target: Extents,
    filter: FilterType,
) -> ImageBuffer<P, Vec<u8>> {
    let (w, h) = img.dimensions();
    let scaled_h = ((h as f64) * target.width as f64 / w as f64).round().max(1.0) as u32;
    let scaled = imageops::resize(img, target.width as u32, scaled_h, filter);
    let th = target.height as u32;
    let mut out = ImageBuffer::new(target.width as u32, th);
    if scaled_h >= th {
        let top = (scaled_h - th) / 2;
        imageops::replace(&mut out, &*imageops::crop_imm(&scaled, 0, top, target.width as u32, th), 0, 0);
    } else {
        imageops::replace(&mut out, &scaled, 0, ((th - scaled_h) / 2) as i64);
    }
    out
}

fn standardize_mask(mask: &[bool], w: usize, h: usize, target: Extents) -> Vec<bool> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[y as usize * w + x as usize] as u8]));
    standardize(&img, target, FilterType::Nearest).pixels().map(|p| p.0[0] > 0).collect()
}

/// File locations of one KITTI-Road frame such as `um_000012`.
#[derive(Debug, Clone)]
pub struct KittiPaths {
    pub image: PathBuf,
    pub velodyne: PathBuf,
    pub calib: PathBuf,
    pub gt: PathBuf,
}

impl KittiPaths {
    pub fn new(root: &Path, split: &str, frame: &str) -> Self {
        let dir = root.join(split);
        let gt_name = match frame.split_once('_') {
            Some((cat, num)) => format!("{cat}_road_{num}.png"),
            None => format!("{frame}.png"),
        };
        KittiPaths {
            image: dir.join("image_2").join(format!("{frame}.png")),
            velodyne: dir.join("velodyne").join(format!("{frame}.bin")),
            calib: dir.join("calib").join(format!("{frame}.txt")),
            gt: dir.join("gt_image_2").join(gt_name),
        }
    }
}

/// Loads a frame: RGB and ground truth are standardized to `target`; the
/// ADI is computed at native resolution and resized by nearest neighbour.
pub fn load_kitti_sample(root: &Path, split: &str, frame: &str, target: Extents, kn: usize) -> Result<Sample> {
    let paths = KittiPaths::new(root, split, frame);
    let img = open_image(&paths.image)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let calib = Calibration::load(&paths.calib)?;
    let cloud = PointCloud::read_velodyne(&paths.velodyne)?;
    let native = adi::cloud_to_adi(&cloud, &calib, h, w, kn)?;

    let (truth, valid) = if paths.gt.exists() {
        let gt = open_image(&paths.gt)?;
        if (gt.width() as usize, gt.height() as usize) != (w, h) {
            return Err(Error::malformed(
                &paths.gt,
                "ground truth",
                format!("{}×{} does not match image {h}×{w}", gt.height(), gt.width()),
            ));
        }
        decode_gt(&gt)
    } else {
        (vec![false; w * h], vec![false; w * h])
    };

    let rgb = standardize(&img, target, FilterType::Triangle).into_raw();
    let adi_img = GrayImage::from_raw(w as u32, h as u32, native.pixels.clone()).expect("ADI extents");
    let adi = Adi {
        height: target.height,
        width: target.width,
        kn,
        pixels: standardize(&adi_img, target, FilterType::Nearest).into_raw(),
        valid: standardize_mask(&native.valid, w, h, target),
    };
    // Padding rows are outside the source image and never evaluated.
    let inside = standardize_mask(&vec![true; w * h], w, h, target);
    let valid: Vec<bool> = standardize_mask(&valid, w, h, target)
        .into_iter()
        .zip(inside)
        .map(|(v, i)| v && i)
        .collect();
    Ok(Sample {
        id: frame.to_string(),
        height: target.height,
        width: target.width,
        rgb,
        adi,
        truth: standardize_mask(&truth, w, h, target),
        valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Frame ids of one split. A list file (one id per line, `#` comments) is
/// used as given; otherwise the sorted ids under `root/training/image_2` are
/// split with every fifth frame going to validation.
pub fn list_frames(root: &Path, list: Option<&Path>, which: Split) -> Result<Vec<String>> {
    if let Some(f) = list {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect());
    }
    let dir = root.join("training").join("image_2");
    let mut ids: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "png").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    ids.sort();
    Ok(ids
        .into_iter()
        .enumerate()
        .filter(|(i, _)| (i % 5 == 4) == (which == Split::Val))
        .map(|(_, id)| id)
        .collect())
}

/// Road area band enforced by the generator.
pub const ROAD_FRACTION: (f64, f64) = (0.2, 0.5);

/// Axis-aligned obstacle face in image space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthBox {
    pub u0: usize,
    pub u1: usize,
    /// Top row (inclusive).
    pub top: usize,
    /// Ground contact row (inclusive).
    pub bottom: usize,
    pub depth: f64,
}

/// One procedurally generated frame with its geometry.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub height: usize,
    pub width: usize,
    pub intrinsics: Intrinsics,
    pub camera_height: f64,
    pub depth: Vec<f64>,
    pub rgb: Vec<u8>,
    pub road: Vec<bool>,
    pub boxes: Vec<SynthBox>,
}

struct Trapezoid {
    top: f64,
    bottom: f64,
    top_l: f64,
    top_r: f64,
    bot_l: f64,
    bot_r: f64,
}

impl Trapezoid {
    fn contains(&self, u: f64, v: f64) -> bool {
        if v < self.top || v > self.bottom {
            return false;
        }
        let t = (v - self.top) / (self.bottom - self.top);
        let l = self.top_l + t * (self.bot_l - self.top_l);
        let r = self.top_r + t * (self.bot_r - self.top_r);
        u >= l && u <= r
    }
}

/// Draws one scene: a camera above a ground plane, sky above the horizon,
/// a grey textured road trapezoid on green/brown clutter, and boxes standing
/// on the ground off the road.
pub fn synth_scene(rng: &mut SeedRng, height: usize, width: usize) -> SynthScene {
    let (h, w) = (height as f64, width as f64);
    let k = Intrinsics {
        fx: 0.6 * w,
        fy: 0.6 * w,
        cx: w / 2.0,
        cy: 0.35 * h,
    };
    let cam_h = 1.6;

    let road = loop {
        let top = k.cy + rng.uniform_range(0.04, 0.12) * h;
        let centre_top = w * rng.uniform_range(0.35, 0.65);
        let centre_bot = w * rng.uniform_range(0.3, 0.7);
        let half_top = w * rng.uniform_range(0.02, 0.08);
        let half_bot = w * rng.uniform_range(0.25, 0.5);
        let trap = Trapezoid {
            top,
            bottom: h,
            top_l: centre_top - half_top,
            top_r: centre_top + half_top,
            bot_l: centre_bot - half_bot,
            bot_r: centre_bot + half_bot,
        };
        let mask: Vec<bool> = (0..height * width)
            .map(|i| trap.contains((i % width) as f64 + 0.5, (i / width) as f64 + 0.5))
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (height * width) as f64;
        if (ROAD_FRACTION.0..=ROAD_FRACTION.1).contains(&frac) {
            break mask;
        }
    };

    // Rows are pixel coordinates, matching the back-projection in the ADI.
    let horizon = k.cy.floor() as usize + 1;
    let mut depth = vec![f64::NAN; height * width];
    for v in horizon..height {
        let dv = v as f64 - k.cy;
        if dv > 0.0 {
            let d = k.fy * cam_h / dv;
            depth[v * width..(v + 1) * width].fill(d);
        }
    }

    let mut boxes = Vec::new();
    let wanted = rng.index(1, 4);
    for _ in 0..wanted * 8 {
        if boxes.len() == wanted {
            break;
        }
        let d = rng.uniform_range(6.0, 25.0);
        let box_h = rng.uniform_range(0.8, 2.5);
        let box_w = rng.uniform_range(0.8, 3.0);
        let bottom = (k.cy + k.fy * cam_h / d).floor() as isize;
        let top = (k.cy + k.fy * (cam_h - box_h) / d).floor() as isize;
        let half = (k.fx * box_w / d / 2.0).max(2.0);
        let cu = rng.uniform_range(0.0, w);
        let u0 = (cu - half).max(0.0) as usize;
        let u1 = ((cu + half) as usize).min(width - 1);
        if bottom >= height as isize || top < 0 || u1 <= u0 {
            continue;
        }
        let (top, bottom) = (top as usize, bottom as usize);
        let overlaps = (top..=bottom).any(|v| (u0..=u1).any(|u| road[v * width + u]));
        if overlaps {
            continue;
        }
        for v in top..=bottom {
            for u in u0..=u1 {
                let cell = &mut depth[v * width + u];
                if !(cell.is_finite() && *cell < d) {
                    *cell = d;
                }
            }
        }
        boxes.push(SynthBox {
            u0,
            u1,
            top,
            bottom,
            depth: d,
        });
    }

    let road_base = rng.uniform_range(95.0, 140.0);
    let grass = [rng.uniform_range(40.0, 80.0), rng.uniform_range(110.0, 160.0), rng.uniform_range(30.0, 60.0)];
    let soil = [rng.uniform_range(110.0, 150.0), rng.uniform_range(80.0, 100.0), rng.uniform_range(40.0, 60.0)];
    let box_colors: Vec<[f64; 3]> = boxes
        .iter()
        .map(|_| std::array::from_fn(|_| rng.uniform_range(30.0, 230.0)))
        .collect();
    let mut rgb = vec![0u8; 3 * height * width];
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            let noise = rng.uniform_range(-12.0, 12.0);
            let px: [f64; 3] = if let Some(b) = boxes
                .iter()
                .position(|b| (b.top..=b.bottom).contains(&v) && (b.u0..=b.u1).contains(&u))
            {
                box_colors[b].map(|c| c + noise * 0.5)
            } else if v < horizon {
                let t = v as f64 / horizon.max(1) as f64;
                [120.0 + 60.0 * t, 170.0 + 40.0 * t, 235.0].map(|c| c + noise * 0.3)
            } else if road[i] {
                [road_base + noise; 3]
            } else {
                // Low-frequency blend between grass and soil.
                let t = 0.5 + 0.5 * ((u as f64 * 0.07).sin() * (v as f64 * 0.11).cos());
                std::array::from_fn(|c| grass[c] * t + soil[c] * (1.0 - t) + noise)
            };
            for c in 0..3 {
                rgb[3 * i + c] = px[c].clamp(0.0, 255.0).round() as u8;
            }
        }
    }

    SynthScene {
        height,
        width,
        intrinsics: k,
        camera_height: cam_h,
        depth,
        rgb,
        road,
        boxes,
    }
}

/// `n` deterministic samples for `seed`; every pixel is valid.
pub fn synth_dataset(seed: u64, n: usize, extents: Extents, kn: usize) -> Result<Vec<Sample>> {
    let mut root = SeedRng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.split();
            let scene = synth_scene(&mut rng, extents.height, extents.width);
            let adi = adi::depth_to_adi(&scene.depth, scene.height, scene.width, scene.intrinsics, kn)?;
            Ok(Sample {
                id: format!("synth_{seed}_{i:04}"),
                height: scene.height,
                width: scene.width,
                rgb: scene.rgb,
                adi,
                truth: scene.road,
                valid: vec![true; extents.pixels()],
            })
        })
        .collect()
}

/// Writes the RGB input of a sample as PNG.
pub fn save_rgb_png(sample: &Sample, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(sample.width as u32, sample.height as u32, |x, y| {
        let i = 3 * (y as usize * sample.width + x as usize);
        Rgb([sample.rgb[i], sample.rgb[i + 1], sample.rgb[i + 2]])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
