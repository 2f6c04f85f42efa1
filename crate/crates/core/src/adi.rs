//! Altitude Difference Image generation.
//!
//! LiDAR points are projected into the camera image, each hit pixel keeps one
//! height, and every hit pixel is assigned the mean distance-weighted absolute
//! height difference to the other hits in its `K_n × K_n` window. The result
//! is min-max normalized to 8 bits.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use roadfuse_tensor::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_KN: usize = 11;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    /// Reads a KITTI velodyne scan: little-endian `f32` quadruples
    /// `(x, y, z, reflectance)`; reflectance is dropped.
    pub fn read_velodyne(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_velodyne_bytes(&bytes).map_err(|detail| Error::malformed(path, "velodyne scan", detail))
    }

    pub fn from_velodyne_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() % 16 != 0 {
            return Err(format!("{} bytes is not a multiple of 16", bytes.len()));
        }
        let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        let points = bytes
            .chunks_exact(16)
            .map(|c| [f(&c[0..4]), f(&c[4..8]), f(&c[8..12])])
            .filter(|p| p.iter().all(|v| v.is_finite()))
            .collect();
        Ok(PointCloud { points })
    }

    pub fn to_velodyne_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in p.iter().copied().chain([0.0]) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// KITTI-style calibration: `P2` (3×4), `R0_rect` (3×3) and `Tr_velo_to_cam`
/// (3×4, implicitly completed with `[0 0 0 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

const ORTHONORMAL_TOL: f64 = 1e-5;

impl Calibration {
    /// Camera looking down `+z` with identity extrinsics and rectification.
    pub fn pinhole(k: Intrinsics) -> Self {
        Calibration {
            p2: [[k.fx, 0.0, k.cx, 0.0], [0.0, k.fy, k.cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|detail| Error::malformed(path, "calibration", detail))
    }

    /// Parses `key: v0 v1 ...` lines. Unknown keys are ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut p2 = None;
        let mut r0 = None;
        let mut tr = None;
        for line in text.lines() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let slot = match key.trim() {
                "P2" => &mut p2,
                "R0_rect" => &mut r0,
                "Tr_velo_to_cam" => &mut tr,
                _ => continue,
            };
            let vals = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| format!("{}: `{t}`: {e}", key.trim())))
                .collect::<Result<Vec<_>, _>>()?;
            *slot = Some(vals);
        }
        let take = |v: Option<Vec<f64>>, name: &str, n: usize| -> Result<Vec<f64>, String> {
            let v = v.ok_or_else(|| format!("missing `{name}:` row"))?;
            if v.len() != n {
                return Err(format!("`{name}` has {} values, expected {n}", v.len()));
            }
            Ok(v)
        };
        let p2 = take(p2, "P2", 12)?;
        let r0 = take(r0, "R0_rect", 9)?;
        let tr = take(tr, "Tr_velo_to_cam", 12)?;
        let calib = Calibration {
            p2: std::array::from_fn(|i| std::array::from_fn(|j| p2[i * 4 + j])),
            r0_rect: std::array::from_fn(|i| std::array::from_fn(|j| r0[i * 3 + j])),
            tr_velo_to_cam: std::array::from_fn(|i| std::array::from_fn(|j| tr[i * 4 + j])),
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn to_kitti_text(&self) -> String {
        let row = |v: Vec<f64>| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        format!(
            "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
            row(self.p2.iter().flatten().copied().collect()),
            row(self.r0_rect.iter().flatten().copied().collect()),
            row(self.tr_velo_to_cam.iter().flatten().copied().collect()),
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.p2[0][0] <= 0.0 || self.p2[1][1] <= 0.0 {
            return Err("P2 focal terms must be positive".into());
        }
        let tr_rot: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| self.tr_velo_to_cam[i][j]));
        for (name, r) in [("R0_rect", &self.r0_rect), ("Tr_velo_to_cam rotation", &tr_rot)] {
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    if (dot - want).abs() > ORTHONORMAL_TOL {
                        return Err(format!("{name} is not orthonormal (row {i}·row {j} = {dot})"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.p2[0][0],
            fy: self.p2[1][1],
            cx: self.p2[0][2],
            cy: self.p2[1][2],
        }
    }

    /// LiDAR point to rectified camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let t = &self.tr_velo_to_cam;
        let c: [f64; 3] = std::array::from_fn(|i| t[i][0] * p[0] + t[i][1] * p[1] + t[i][2] * p[2] + t[i][3]);
        let r = &self.r0_rect;
        std::array::from_fn(|i| r[i][0] * c[0] + r[i][1] * c[1] + r[i][2] * c[2])
    }
}

/// One height per hit pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoints {
    pub height: usize,
    pub width: usize,
    /// Height value per pixel, `None` where nothing projected.
    pub z: Vec<Option<f64>>,
    /// Camera depth of the kept point (collision bookkeeping).
    pub depth: Vec<f64>,
}

impl ProjectedPoints {
    pub fn empty(height: usize, width: usize) -> Self {
        ProjectedPoints {
            height,
            width,
            z: vec![None; height * width],
            depth: vec![f64::INFINITY; height * width],
        }
    }

    /// Inserts a hit; the nearer point wins a collision, equal depths keep
    /// the lower height.
    pub fn insert(&mut self, u: usize, v: usize, depth: f64, z: f64) {
        let i = v * self.width + u;
        let better = match self.z[i] {
            None => true,
            Some(old) => depth < self.depth[i] || (depth == self.depth[i] && z < old),
        };
        if better {
            self.z[i] = Some(z);
            self.depth[i] = depth;
        }
    }

    pub fn count(&self) -> usize {
        self.z.iter().filter(|z| z.is_some()).count()
    }
}

/// Projects a cloud into an `height × width` image. Height is `-y` in the
/// rectified camera frame (up positive).
pub fn project_points(cloud: &PointCloud, calib: &Calibration, height: usize, width: usize) -> ProjectedPoints {
    let mut out = ProjectedPoints::empty(height, width);
    let p = &calib.p2;
    for &pt in &cloud.points {
        let c = calib.to_camera(pt);
        if c[2] <= 0.0 {
            continue;
        }
        let h: [f64; 3] = std::array::from_fn(|i| p[i][0] * c[0] + p[i][1] * c[1] + p[i][2] * c[2] + p[i][3]);
        if h[2] <= 0.0 {
            continue;
        }
        let u = (h[0] / h[2]).round();
        let v = (h[1] / h[2]).round();
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            continue;
        }
        out.insert(u as usize, v as usize, c[2], -c[1]);
    }
    out
}

/// Pre-normalization altitude differences.
#[derive(Debug, Clone, PartialEq)]
pub struct AdiValues {
    pub height: usize,
    pub width: usize,
    pub kn: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// `V = (1/M) Σ |z − z'| / ‖(u', v') − (u, v)‖` over the other hit pixels in
/// the `kn × kn` window; pixels without hits or without neighbours are
/// invalid and hold 0.
pub fn altitude_difference(proj: &ProjectedPoints, kn: usize) -> Result<AdiValues> {
    if kn < 3 || kn % 2 == 0 {
        return Err(Error::Config(format!("ADI neighbourhood must be odd and at least 3, got {kn}")));
    }
    let (h, w) = (proj.height, proj.width);
    let r = (kn / 2) as isize;
    // Inverse distances are shared by every pixel.
    let inv_dist: Vec<f64> = (-r..=r)
        .flat_map(|dv| (-r..=r).map(move |du| (dv, du)))
        .map(|(dv, du)| if dv == 0 && du == 0 { 0.0 } else { 1.0 / ((du * du + dv * dv) as f64).sqrt() })
        .collect();
    let mut values = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    for v in 0..h {
        for u in 0..w {
            let Some(zc) = proj.z[v * w + u] else { continue };
            let mut sum = 0.0;
            let mut m = 0usize;
            for dv in -r..=r {
                let vv = v as isize + dv;
                if vv < 0 || vv >= h as isize {
                    continue;
                }
                for du in -r..=r {
                    let uu = u as isize + du;
                    if uu < 0 || uu >= w as isize || (du == 0 && dv == 0) {
                        continue;
                    }
                    if let Some(zn) = proj.z[vv as usize * w + uu as usize] {
                        sum += (zc - zn).abs() * inv_dist[((dv + r) * (2 * r + 1) + du + r) as usize];
                        m += 1;
                    }
                }
            }
            if m > 0 {
                values[v * w + u] = sum / m as f64;
                valid[v * w + u] = true;
            }
        }
    }
    Ok(AdiValues {
        height: h,
        width: w,
        kn,
        values,
        valid,
    })
}

/// 8-bit Altitude Difference Image with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Adi {
    pub height: usize,
    pub width: usize,
    pub kn: usize,
    pub pixels: Vec<u8>,
    pub valid: Vec<bool>,
}

/// Min-max maps valid values onto `0..=255` (round half up); a constant field
/// maps to 0.
pub fn normalize_adi(values: &AdiValues) -> Adi {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (v, _) in values.values.iter().zip(&values.valid).filter(|(_, ok)| **ok) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let range = hi - lo;
    let pixels = values
        .values
        .iter()
        .zip(&values.valid)
        .map(|(&v, &ok)| {
            if !ok || !(range > 0.0) {
                0
            } else {
                ((v - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Adi {
        height: values.height,
        width: values.width,
        kn: values.kn,
        pixels,
        valid: values.valid.clone(),
    }
}

/// Full pipeline from a point cloud.
pub fn cloud_to_adi(cloud: &PointCloud, calib: &Calibration, height: usize, width: usize, kn: usize) -> Result<Adi> {
    Ok(normalize_adi(&altitude_difference(&project_points(cloud, calib, height, width), kn)?))
}

/// Back-projects every valid depth pixel (finite, positive) and runs the
/// same difference/normalization steps. The height of pixel `(u, v)` at depth
/// `d` is `-(v − cy)·d/fy`.
pub fn depth_to_adi(depth: &[f64], height: usize, width: usize, k: Intrinsics, kn: usize) -> Result<Adi> {
    if depth.len() != height * width {
        return Err(Error::Invalid(format!(
            "depth map has {} values, expected {height}×{width}",
            depth.len()
        )));
    }
    let mut proj = ProjectedPoints::empty(height, width);
    for v in 0..height {
        for u in 0..width {
            let d = depth[v * width + u];
            if d.is_finite() && d > 0.0 {
                proj.insert(u, v, d, -(v as f64 - k.cy) * d / k.fy);
            }
        }
    }
    Ok(normalize_adi(&altitude_difference(&proj, kn)?))
}

/// `[1, 3, H, W]` tensor with the 8-bit ADI copied into each channel and
/// scaled into `[0, 1]`.
pub fn replicate_channels(adi: &Adi) -> Tensor<f32> {
    let plane: Vec<f32> = adi.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::from_vec(&[1, 3, adi.height, adi.width], data).expect("ADI extents")
}

/// Max-pool dilation of valid pixels; only used to make sparse ADIs readable
/// when rendered.
pub fn dilate_for_display(adi: &Adi, radius: usize) -> Adi {
    let (h, w) = (adi.height, adi.width);
    let mut out = adi.clone();
    for v in 0..h {
        for u in 0..w {
            let mut best: Option<u8> = None;
            for vv in v.saturating_sub(radius)..(v + radius + 1).min(h) {
                for uu in u.saturating_sub(radius)..(u + radius + 1).min(w) {
                    if adi.valid[vv * w + uu] {
                        best = Some(best.map_or(adi.pixels[vv * w + uu], |b| b.max(adi.pixels[vv * w + uu])));
                    }
                }
            }
            if let Some(b) = best {
                out.pixels[v * w + u] = b;
                out.valid[v * w + u] = true;
            }
        }
    }
    out
}

pub fn write_adi_png(adi: &Adi, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(adi.width as u32, adi.height as u32, |x, y| {
        Luma([adi.pixels[y as usize * adi.width + x as usize]])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an 8-bit grayscale PNG back as `(height, width, pixels)`.
pub fn read_adi_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 20.0,
            cy: 10.0,
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let proj = project_points(&PointCloud::new(vec![[0.0, 0.0, 7.5]]), &Calibration::pinhole(k()), 21, 41);
        assert_eq!(proj.z[10 * 41 + 20], Some(-0.0));
        assert_eq!(proj.count(), 1);
    }

    #[test]
    fn points_behind_or_outside_are_dropped() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, -3.0], [100.0, 0.0, 1.0]]);
        assert_eq!(project_points(&cloud, &Calibration::pinhole(k()), 21, 41).count(), 0);
    }

    #[test]
    fn nearer_point_wins_collision() {
        // Both project to pixel (20, 0); the one at depth 5 is kept.
        let cloud = PointCloud::new(vec![[0.0, -1.0, 10.0], [0.0, -0.5, 5.0]]);
        let proj = project_points(&cloud, &Calibration::pinhole(k()), 21, 41);
        assert_eq!(proj.count(), 1);
        assert_eq!(proj.z[20], Some(0.5));

        let mut p = ProjectedPoints::empty(1, 1);
        p.insert(0, 0, 10.0, 3.0);
        p.insert(0, 0, 5.0, 4.0);
        p.insert(0, 0, 5.0, 2.0);
        p.insert(0, 0, 7.0, 1.0);
        assert_eq!(p.z[0], Some(2.0));
    }

    #[test]
    fn single_neighbour_by_hand() {
        let mut p = ProjectedPoints::empty(3, 3);
        p.insert(1, 1, 1.0, 1.0);
        p.insert(2, 1, 1.0, 0.0);
        let v = altitude_difference(&p, 3).unwrap();
        assert_eq!(v.values[4], 1.0);
        assert!(v.valid[4] && v.valid[5]);
        assert!(!v.valid[0]);
    }

    #[test]
    fn flat_plane_is_zero() {
        let mut p = ProjectedPoints::empty(4, 4);
        for i in 0..16 {
            p.insert(i % 4, i / 4, 1.0, 2.5);
        }
        let v = altitude_difference(&p, 3).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
        assert!(v.valid.iter().all(|&ok| ok));
    }

    #[test]
    fn even_window_rejected() {
        assert!(altitude_difference(&ProjectedPoints::empty(2, 2), 4).is_err());
        assert!(altitude_difference(&ProjectedPoints::empty(2, 2), 1).is_err());
    }

    #[test]
    fn normalization_rounding() {
        let vals = AdiValues {
            height: 1,
            width: 4,
            kn: 3,
            values: vec![0.0, 2.0, 4.0, 9.0],
            valid: vec![true, true, true, false],
        };
        // 2/4·255 = 127.5 rounds up.
        assert_eq!(normalize_adi(&vals).pixels, vec![0, 128, 255, 0]);
        let flat = AdiValues {
            values: vec![3.0; 4],
            valid: vec![true; 4],
            ..vals
        };
        assert_eq!(normalize_adi(&flat).pixels, vec![0; 4]);
    }

    #[test]
    fn single_valid_depth_pixel_gives_invalid_adi() {
        let mut depth = vec![f64::NAN; 25];
        depth[12] = 4.0;
        let adi = depth_to_adi(&depth, 5, 5, k(), 3).unwrap();
        assert!(adi.valid.iter().all(|&v| !v));
        assert!(adi.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn replicated_channels_are_identical() {
        let adi = Adi {
            height: 1,
            width: 2,
            kn: 3,
            pixels: vec![255, 51],
            valid: vec![true, true],
        };
        let t = replicate_channels(&adi);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.2, 1.0, 0.2, 1.0, 0.2]);
    }

    #[test]
    fn calibration_text_round_trip() {
        let calib = Calibration::pinhole(k());
        assert_eq!(Calibration::parse(&calib.to_kitti_text()).unwrap(), calib);
        assert!(Calibration::parse("P2: 1 2 3").is_err());
    }

    #[test]
    fn velodyne_bytes_round_trip() {
        let cloud = PointCloud::new(vec![[1.5, -2.0, 0.25], [3.0, 4.0, 5.0]]);
        assert_eq!(PointCloud::from_velodyne_bytes(&cloud.to_velodyne_bytes()).unwrap(), cloud);
        assert!(PointCloud::from_velodyne_bytes(&[0; 10]).is_err());
    }
}
