//! Training objective: BCE + Lovász hinge + weighted focal loss on the main
//! logits, and the same combination on each auxiliary head against a
//! nearest-neighbour downsampled truth.

use roadfuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::SegmentationOutput;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Auxiliary weights, deepest head first.
    pub aux_weights: Vec<f64>,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub focal_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            aux_weights: vec![0.5, 0.3, 0.2],
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            focal_weight: 0.5,
        }
    }
}

fn check_pair<T: Scalar>(op: &str, logits: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::Invalid(format!(
            "{op}: logits {:?} and targets {:?} differ",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.numel() == 0 {
        return Err(Error::Invalid(format!("{op}: empty input")));
    }
    Ok(())
}

/// `-log σ(z)` without overflow.
fn softplus_neg<T: Scalar>(z: T) -> T {
    let zero = T::ZERO;
    let relu = if z < zero { zero - z } else { zero };
    relu + (zero - z.abs()).exp().ln_1p()
}

/// Sign `2y − 1` of a {0,1} label.
fn sign<T: Scalar>(y: T) -> T {
    if y > T::from_f64(0.5) {
        T::ONE
    } else {
        T::ZERO - T::ONE
    }
}

fn scalar_op<T: Scalar>(
    name: &'static str,
    logits: &Tensor<T>,
    value: T,
    grad: Vec<T>,
) -> Tensor<T> {
    Tensor::from_op(name, vec![], vec![value], vec![logits.clone()], move |ctx| {
        let g = ctx.grad[0];
        vec![Some(grad.iter().map(|&d| d * g).collect())]
    })
}

/// Mean binary cross-entropy on logits.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("bce", logits, targets)?;
    let n = T::from_f64(logits.numel() as f64);
    let mut total = T::ZERO;
    let mut grad = Vec::with_capacity(logits.numel());
    for (&x, &y) in logits.data().iter().zip(targets.data()) {
        let s = sign(y);
        let z = s * x;
        total = total + softplus_neg(z);
        // d/dx softplus(-z) = -s·σ(-z)
        grad.push((T::ZERO - s) * roadfuse_tensor::sigmoid(T::ZERO - z) / n);
    }
    Ok(scalar_op("bce_loss", logits, total / n, grad))
}

/// Mean focal loss `−α_t (1 − p_t)^γ log p_t`.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Tensor<T>> {
    check_pair("focal", logits, targets)?;
    let n = T::from_f64(logits.numel() as f64);
    let g = T::from_f64(gamma);
    let mut total = T::ZERO;
    let mut grad = Vec::with_capacity(logits.numel());
    for (&x, &y) in logits.data().iter().zip(targets.data()) {
        let s = sign(y);
        let a = T::from_f64(if s > T::ZERO { alpha } else { 1.0 - alpha });
        let z = s * x;
        let nll = softplus_neg(z);
        let p = roadfuse_tensor::sigmoid(z);
        let q = T::ONE - p;
        let w = if gamma == 0.0 { T::ONE } else { q.powf(g) };
        total = total + a * w * nll;
        // d/dz = (1−p)^γ [γ p log p − (1−p)], with log p = −nll.
        let dz = w * (T::ZERO - g * p * nll - q);
        grad.push(a * s * dz / n);
    }
    Ok(scalar_op("focal_loss", logits, total / n, grad))
}

/// Gradient of the Lovász extension of the Jaccard loss for labels sorted by
/// decreasing error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let mut cum_pos = 0.0;
    let mut cum_neg = 0.0;
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_pos) / (gts + cum_neg);
        out.push(jaccard - prev);
        prev = jaccard;
    }
    out
}

/// Lovász hinge computed per image (leading axis) and averaged.
pub fn lovasz_hinge_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("lovasz", logits, targets)?;
    let b = if logits.ndim() > 1 { logits.shape()[0] } else { 1 };
    let per = logits.numel() / b;
    let x = logits.data();
    let y = targets.data();
    let mut total = 0.0;
    let mut grad = vec![T::ZERO; x.len()];
    let mut order: Vec<usize> = Vec::with_capacity(per);
    for img in 0..b {
        let off = img * per;
        let margins: Vec<f64> = (0..per)
            .map(|i| 1.0 - x[off + i].to_f64() * sign(y[off + i]).to_f64())
            .collect();
        order.clear();
        order.extend(0..per);
        // Descending by margin, ties by original index.
        order.sort_by(|&a, &c| margins[c].total_cmp(&margins[a]).then(a.cmp(&c)));
        let gt: Vec<bool> = order.iter().map(|&i| y[off + i] > T::from_f64(0.5)).collect();
        let jg = lovasz_grad(&gt);
        for (rank, &i) in order.iter().enumerate() {
            let m = margins[i];
            if m > 0.0 {
                total += m * jg[rank];
                // d m / d x = −s
                grad[off + i] = T::from_f64(-sign(y[off + i]).to_f64() * jg[rank] / b as f64);
            }
        }
    }
    Ok(scalar_op("lovasz_hinge", logits, T::from_f64(total / b as f64), grad))
}

/// `BCE + Lovász + w_f·focal` on one logit map.
pub fn combined_loss<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    let bce = bce_loss(logits, targets)?;
    let lov = lovasz_hinge_loss(logits, targets)?;
    let foc = focal_loss(logits, targets, cfg.focal_alpha, cfg.focal_gamma)?;
    Ok(Tensor::weighted_sum(&[(1.0, &bce), (1.0, &lov), (cfg.focal_weight, &foc)])?)
}

/// Nearest-neighbour resize of a `[B,1,H,W]` label map: source index
/// `floor(dst · in / out)`.
pub fn downsample_nearest<T: Scalar>(labels: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = labels.dims4()?;
    let src = labels.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        for y in 0..oh {
            let sy = y * h / oh;
            for x in 0..ow {
                out.push(src[(plane * h + sy) * w + x * w / ow]);
            }
        }
    }
    Ok(Tensor::from_vec(&[b, c, oh, ow], out)?)
}

/// Full-resolution truth plus one downsampled copy per auxiliary head.
pub struct Supervision<T: Scalar> {
    pub full: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

impl<T: Scalar> Supervision<T> {
    /// Aux extents are `H/16, H/8, H/4` (deep to shallow) for an input of `H×W`.
    pub fn new(full: Tensor<T>) -> Result<Self> {
        let (_, _, h, w) = full.dims4()?;
        let aux = [16, 8, 4]
            .iter()
            .map(|&s| downsample_nearest(&full, h / s, w / s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Supervision { full, aux })
    }
}

/// Values of each loss term, for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub aux: Vec<f64>,
}

/// `L_main + Σ w_k L_aux,k`. Auxiliary logits beyond the configured weights
/// are rejected; missing ones (inference-style output) are skipped.
pub fn total_loss<T: Scalar>(
    out: &SegmentationOutput<T>,
    sup: &Supervision<T>,
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossBreakdown)> {
    if out.aux.len() > cfg.aux_weights.len() || out.aux.len() > sup.aux.len() {
        return Err(Error::Invalid(format!(
            "{} auxiliary outputs but {} weights and {} downsampled truths",
            out.aux.len(),
            cfg.aux_weights.len(),
            sup.aux.len()
        )));
    }
    let main = combined_loss(&out.main, &sup.full, cfg)?;
    let aux = out
        .aux
        .iter()
        .zip(&sup.aux)
        .map(|(l, t)| combined_loss(l, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = vec![(1.0, &main)];
    terms.extend(cfg.aux_weights.iter().copied().zip(&aux));
    let total = Tensor::weighted_sum(&terms)?;
    let breakdown = LossBreakdown {
        total: total.item().to_f64(),
        main: main.item().to_f64(),
        aux: aux.iter().map(|a| a.item().to_f64()).collect(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(&t(&[0.0]), &t(&[1.0])).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&t(&[20.0]), &t(&[1.0])).unwrap().item() < 1e-8);
        assert!(bce_loss(&t(&[-800.0]), &t(&[1.0])).unwrap().item().is_finite());
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let x = t(&[-2.0, 0.3, 1.7, 4.0]);
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        let f = focal_loss(&x, &y, 0.5, 0.0).unwrap().item();
        let b = bce_loss(&x, &y).unwrap().item();
        assert_eq!(f, 0.5 * b);
    }

    #[test]
    fn lovasz_single_pixel_and_confident() {
        let l = lovasz_hinge_loss(&t(&[0.25]), &t(&[1.0])).unwrap().item();
        assert!((l - 0.75).abs() < 1e-12);
        let l = lovasz_hinge_loss(&t(&[3.0, -2.0, 5.0]), &t(&[1.0, 0.0, 1.0])).unwrap().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn lovasz_grad_all_background() {
        assert_eq!(lovasz_grad(&[false, false, false]), vec![1.0, 0.0, 0.0]);
        let g = lovasz_grad(&[true, false, true]);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_downsample_keeps_labels() {
        let full = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![0., 1., 1., 0., 1., 1., 0., 0.]).unwrap();
        let d = downsample_nearest(&full, 1, 2).unwrap();
        assert_eq!(d.data(), &[0.0, 1.0]);
    }
}
