//! Pixel metrics over an 8-bit threshold sweep, error-map rendering and
//! latency statistics.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// 8-bit level of a probability, round half up.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn check_lengths(prob: usize, truth: usize, mask: Option<usize>) -> Result<()> {
    if prob != truth || mask.is_some_and(|m| m != prob) {
        return Err(Error::Invalid(format!(
            "metric inputs differ in length: prob {prob}, truth {truth}, mask {mask:?}"
        )));
    }
    Ok(())
}

/// Counts at a probability threshold: predicted positive when `p ≥ threshold`.
pub fn confusion_at(prob: &[f64], truth: &[bool], mask: Option<&[bool]>, threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(prob.len(), truth.len(), mask.map(<[bool]>::len))?;
    let mut c = ConfusionCounts::default();
    for i in 0..prob.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        match (prob[i] >= threshold, truth[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Per-level histograms of positives and negatives; summing these across
/// images aggregates a dataset before the sweep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreHistogram {
    pub pos: Vec<u64>,
    pub neg: Vec<u64>,
}

impl Default for ScoreHistogram {
    fn default() -> Self {
        ScoreHistogram {
            pos: vec![0; LEVELS],
            neg: vec![0; LEVELS],
        }
    }
}

impl ScoreHistogram {
    pub fn add(&mut self, prob: &[f64], truth: &[bool], mask: Option<&[bool]>) -> Result<()> {
        check_lengths(prob.len(), truth.len(), mask.map(<[bool]>::len))?;
        for i in 0..prob.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let q = quantize(prob[i]) as usize;
            if truth[i] {
                self.pos[q] += 1;
            } else {
                self.neg[q] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ScoreHistogram) {
        for k in 0..LEVELS {
            self.pos[k] += other.pos[k];
            self.neg[k] += other.neg[k];
        }
    }

    /// Counts for every level `k` (positive when `q ≥ k`), from one
    /// cumulative pass.
    pub fn curve(&self) -> Vec<ConfusionCounts> {
        let total_pos: u64 = self.pos.iter().sum();
        let total_neg: u64 = self.neg.iter().sum();
        let mut out = vec![ConfusionCounts::default(); LEVELS];
        let (mut tp, mut fp) = (0u64, 0u64);
        for k in (0..LEVELS).rev() {
            tp += self.pos[k];
            fp += self.neg[k];
            out[k] = ConfusionCounts {
                tp,
                fp,
                fn_: total_pos - tp,
                tn: total_neg - fp,
            };
        }
        out
    }
}

/// Accuracy part of the report; metrics are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub maxf: f64,
    pub pre: f64,
    pub rec: f64,
    pub iou: f64,
    /// Best 8-bit level; the probability threshold is `level / 255`.
    pub level: u8,
    pub counts: ConfusionCounts,
    /// No positive ground truth: recall is undefined and reported as 0.
    pub no_positives: bool,
    /// F1 (percent) at every level.
    pub curve: Vec<f64>,
}

impl SweepResult {
    pub fn threshold(&self) -> f64 {
        self.level as f64 / 255.0
    }
}

/// MaxF over the 256 levels; ties go to the lowest level.
pub fn maxf_sweep(hist: &ScoreHistogram) -> SweepResult {
    let curve = hist.curve();
    let mut best = 0;
    for k in 1..LEVELS {
        if curve[k].f1() > curve[best].f1() {
            best = k;
        }
    }
    let c = curve[best];
    SweepResult {
        maxf: 100.0 * c.f1(),
        pre: 100.0 * c.precision(),
        rec: 100.0 * c.recall(),
        iou: 100.0 * c.iou(),
        level: best as u8,
        counts: c,
        no_positives: c.tp + c.fn_ == 0,
        curve: curve.iter().map(|c| 100.0 * c.f1()).collect(),
    }
}

/// Sweep over a single probability map.
pub fn maxf_single(prob: &[f64], truth: &[bool], mask: Option<&[bool]>) -> Result<SweepResult> {
    let mut h = ScoreHistogram::default();
    h.add(prob, truth, mask)?;
    Ok(maxf_sweep(&h))
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const TN_BRIGHTNESS: f64 = 0.4;

/// Colour-coded prediction errors over the input image (interleaved RGB
/// bytes, `height × width`). True negatives and invalid pixels show the
/// dimmed input.
pub fn render_error_map(
    rgb: &[u8],
    prob: &[f64],
    truth: &[bool],
    mask: Option<&[bool]>,
    threshold: f64,
    height: usize,
    width: usize,
) -> Result<RgbImage> {
    check_lengths(prob.len(), truth.len(), mask.map(<[bool]>::len))?;
    if prob.len() != height * width || rgb.len() != 3 * height * width {
        return Err(Error::Invalid(format!(
            "error map inputs do not match {height}×{width}"
        )));
    }
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        let valid = mask.is_none_or(|m| m[i]);
        let color = match (valid, prob[i] >= threshold, truth[i]) {
            (true, true, true) => Some(TP_COLOR),
            (true, true, false) => Some(FP_COLOR),
            (true, false, true) => Some(FN_COLOR),
            _ => None,
        };
        Rgb(color.unwrap_or_else(|| {
            std::array::from_fn(|c| (rgb[3 * i + c] as f64 * TN_BRIGHTNESS).round() as u8)
        }))
    }))
}

/// Writes the map as PNG plus a sidecar `.txt` with per-image F1 and IoU.
pub fn save_error_map(img: &RgbImage, counts: &ConfusionCounts, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let side = path.with_extension("txt");
    let text = format!(
        "f1 {:.2}\niou {:.2}\ntp {}\nfp {}\nfn {}\ntn {}\n",
        100.0 * counts.f1(),
        100.0 * counts.iou(),
        counts.tp,
        counts.fp,
        counts.fn_,
        counts.tn
    );
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

/// Latency summary in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Config("benchmark needs at least one timed iteration".into()));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        // Nearest rank.
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(LatencyStats {
            iters: n,
            mean_ms: mean,
            median_ms: median,
            p95_ms: s[rank - 1],
            fps: 1000.0 / mean,
        })
    }
}

/// Times `iters` calls of `f` after `warmup` untimed calls.
pub fn bench_latency(warmup: usize, iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    if iters == 0 {
        return Err(Error::Config("benchmark needs at least one timed iteration".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = std::time::Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    LatencyStats::from_samples(&samples)
}

/// Machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub maxf: f64,
    pub pre: f64,
    pub rec: f64,
    pub iou: f64,
    pub threshold: f64,
    pub params: usize,
    pub fps_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_positives: bool,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl MetricsReport {
    pub fn new(sweep: &SweepResult, params: usize, latency: Option<LatencyStats>) -> Self {
        MetricsReport {
            maxf: round2(sweep.maxf),
            pre: round2(sweep.pre),
            rec: round2(sweep.rec),
            iou: round2(sweep.iou),
            threshold: sweep.threshold(),
            params,
            fps_mean: latency.as_ref().map(|l| l.fps),
            latency,
            no_positives: sweep.no_positives,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "MaxF {:.2}  PRE {:.2}  REC {:.2}  IoU {:.2}  threshold {:.4}  params {}",
            self.maxf, self.pre, self.rec, self.iou, self.threshold, self.params
        );
        if let Some(l) = &self.latency {
            s += &format!(
                "\nlatency mean {:.2} ms  median {:.2} ms  p95 {:.2} ms  FPS {:.2}",
                l.mean_ms, l.median_ms, l.p95_ms, l.fps
            );
        }
        if self.no_positives {
            s += "\nwarning: no positive ground-truth pixels; recall undefined";
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let truth = [true, false, true, false];
        let prob = [1.0, 0.0, 1.0, 0.0];
        let r = maxf_single(&prob, &truth, None).unwrap();
        assert_eq!((r.maxf, r.iou), (100.0, 100.0));
        let c = confusion_at(&prob, &truth, None, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
    }

    #[test]
    fn constant_half_probability() {
        let truth = [true, true, false, false];
        let r = maxf_single(&[0.5; 4], &truth, None).unwrap();
        assert!((r.maxf - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.level, 0);
    }

    #[test]
    fn threshold_zero_predicts_everything() {
        let c = confusion_at(&[0.0, 0.3], &[true, false], None, 0.0).unwrap();
        assert_eq!(c.fn_, 0);
        assert_eq!(c.tp + c.fp, 2);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn no_positive_truth_is_flagged() {
        let r = maxf_single(&[0.2, 0.9], &[false, false], None).unwrap();
        assert!(r.no_positives);
        assert_eq!(r.rec, 0.0);
    }

    #[test]
    fn latency_statistics() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.p95_ms, 4.0);
        assert_eq!(s.fps, 400.0);
        assert!(bench_latency(1, 0, || Ok(())).is_err());
    }

    #[test]
    fn all_positive_over_negative_truth_is_red() {
        let img = render_error_map(&[9; 12], &[1.0; 4], &[false; 4], None, 0.5, 2, 2).unwrap();
        assert!(img.pixels().all(|p| p.0 == FP_COLOR));
    }
}
