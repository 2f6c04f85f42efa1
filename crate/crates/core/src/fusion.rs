//! Per-scale multi-modal fusion.
//!
//! Each scale halves both streams' channels, refines RGB with efficient
//! channel attention and LiDAR with coordinate attention, lets each modality
//! attend over the other, and mixes the three results through a learned
//! sigmoid gate before restoring the original width.

use roadfuse_tensor::{Activation, ConvSpec, Scalar, SeedRng, Tensor};

use crate::error::{Error, Result};
use crate::nn::{join, kaiming_uniform, BatchNorm2d, Conv2d, Ctx, Module, Param, Visitor};

/// Default cap on key/value tokens per attention direction.
pub const DEFAULT_TOKEN_CAP: usize = 1024;

/// Odd 1-D kernel length for `channels` descriptors (γ = 2, b = 1).
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (((channels as f64).log2() + 1.0) / 2.0).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Efficient channel attention: pooled descriptors → 1-D conv → sigmoid.
pub struct Eca<T: Scalar> {
    pub kernel: Param<T>,
}

impl<T: Scalar> Eca<T> {
    pub fn new(channels: usize, rng: &mut SeedRng) -> Self {
        let k = eca_kernel_size(channels);
        Eca {
            kernel: Param::trainable(&[k], kaiming_uniform(rng, k, k)),
        }
    }

    pub fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.adaptive_avg_pool2d(1, 1)?.channel_conv1d(&self.kernel.get())?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.mul(&self.gate(x)?)?)
    }
}

impl<T: Scalar> Module<T> for Eca<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        v(&join(prefix, "kernel"), &self.kernel);
    }
}

/// Hidden width of the coordinate-attention bottleneck.
pub fn ca_mid_channels(channels: usize) -> usize {
    (channels / 32).max(8)
}

/// Coordinate attention: separate height and width gates from directional
/// pooling through a shared bottleneck.
pub struct CoordinateAttention<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub conv_h: Conv2d<T>,
    pub conv_w: Conv2d<T>,
}

impl<T: Scalar> CoordinateAttention<T> {
    pub fn new(channels: usize, rng: &mut SeedRng) -> Self {
        let mid = ca_mid_channels(channels);
        CoordinateAttention {
            conv1: Conv2d::pointwise(channels, mid, rng),
            bn: BatchNorm2d::new(mid),
            conv_h: Conv2d::pointwise(mid, channels, rng),
            conv_w: Conv2d::pointwise(mid, channels, rng),
        }
    }

    /// Returns `(a_h [B,C,H,1], a_w [B,C,1,W])`.
    pub fn gates(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<(Tensor<T>, Tensor<T>)> {
        let (_, _, h, w) = x.dims4()?;
        let pooled_h = x.adaptive_avg_pool2d(h, 1)?;
        let pooled_w = x.adaptive_avg_pool2d(1, w)?.permute(&[0, 1, 3, 2])?;
        let y = Tensor::concat(&[&pooled_h, &pooled_w], 2)?;
        let y = self.bn.forward(&self.conv1.forward(&y)?, ctx)?.activation(Activation::HardSwish);
        let a_h = self.conv_h.forward(&y.narrow(2, 0, h)?)?.sigmoid();
        let a_w = self
            .conv_w
            .forward(&y.narrow(2, h, w)?)?
            .sigmoid()
            .permute(&[0, 1, 3, 2])?;
        Ok((a_h, a_w))
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let (a_h, a_w) = self.gates(x, ctx)?;
        Ok(x.mul(&a_h)?.mul(&a_w)?)
    }
}

impl<T: Scalar> Module<T> for CoordinateAttention<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.conv1.visit(&join(prefix, "conv1"), v);
        self.bn.visit(&join(prefix, "bn"), v);
        self.conv_h.visit(&join(prefix, "conv_h"), v);
        self.conv_w.visit(&join(prefix, "conv_w"), v);
    }
}

/// Grid the key/value map is pooled to, or `None` when it already fits.
pub fn token_grid(h: usize, w: usize, cap: Option<usize>) -> Option<(usize, usize)> {
    let cap = cap?;
    if h * w <= cap {
        return None;
    }
    let side = ((cap as f64).sqrt().floor() as usize).max(1);
    Some((side.min(h), side.min(w)))
}

/// Single-head scaled dot-product attention between feature maps.
///
/// `q` is `[B,d,H,W]`, `k` and `v` are `[B,d,h,w]`. Returns the attended
/// map `[B,d,H,W]` and the weights `[B, H·W, h·w]` (rows sum to one).
pub fn attend<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, d, h, w) = q.dims4()?;
    let (_, _, kh, kw) = k.dims4()?;
    let n = h * w;
    let m = kh * kw;
    let q = q.reshape(&[b, d, n])?.transpose_last()?;
    let k = k.reshape(&[b, d, m])?;
    let v = v.reshape(&[b, d, m])?.transpose_last()?;
    let weights = q.matmul(&k)?.mul_scalar(1.0 / (d as f64).sqrt()).softmax(2)?;
    let out = weights.matmul(&v)?.transpose_last()?.reshape(&[b, d, h, w])?;
    Ok((out, weights))
}

/// Bidirectional cross-modal attention; the two directions are summed.
pub struct CrossModalAttention<T: Scalar> {
    pub q_rgb: Conv2d<T>,
    pub k_rgb: Conv2d<T>,
    pub v_rgb: Conv2d<T>,
    pub q_lidar: Conv2d<T>,
    pub k_lidar: Conv2d<T>,
    pub v_lidar: Conv2d<T>,
    pub token_cap: Option<usize>,
}

impl<T: Scalar> CrossModalAttention<T> {
    pub fn new(d: usize, token_cap: Option<usize>, rng: &mut SeedRng) -> Self {
        let mut proj = || Conv2d::new(ConvSpec::new(d, d, 1).bias(false), rng);
        CrossModalAttention {
            q_rgb: proj(),
            k_rgb: proj(),
            v_rgb: proj(),
            q_lidar: proj(),
            k_lidar: proj(),
            v_lidar: proj(),
            token_cap,
        }
    }

    fn pooled(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = x.dims4()?;
        Ok(match token_grid(h, w, self.token_cap) {
            Some((gh, gw)) => x.adaptive_avg_pool2d(gh, gw)?,
            None => x.clone(),
        })
    }

    /// Returns the summed output and both weight matrices
    /// (RGB queries over LiDAR keys, then the reverse).
    pub fn forward_with_weights(&self, rgb: &Tensor<T>, lidar: &Tensor<T>) -> Result<(Tensor<T>, [Tensor<T>; 2])> {
        if rgb.shape() != lidar.shape() {
            return Err(Error::Invalid(format!(
                "cross-modal attention inputs differ: {:?} vs {:?}",
                rgb.shape(),
                lidar.shape()
            )));
        }
        let rgb_kv = self.pooled(rgb)?;
        let lidar_kv = self.pooled(lidar)?;
        let (a, wa) = attend(
            &self.q_rgb.forward(rgb)?,
            &self.k_lidar.forward(&lidar_kv)?,
            &self.v_lidar.forward(&lidar_kv)?,
        )?;
        let (b, wb) = attend(
            &self.q_lidar.forward(lidar)?,
            &self.k_rgb.forward(&rgb_kv)?,
            &self.v_rgb.forward(&rgb_kv)?,
        )?;
        Ok((a.add(&b)?, [wa, wb]))
    }

    pub fn forward(&self, rgb: &Tensor<T>, lidar: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(rgb, lidar)?.0)
    }
}

impl<T: Scalar> Module<T> for CrossModalAttention<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        for (name, conv) in [
            ("q_rgb", &self.q_rgb),
            ("k_rgb", &self.k_rgb),
            ("v_rgb", &self.v_rgb),
            ("q_lidar", &self.q_lidar),
            ("k_lidar", &self.k_lidar),
            ("v_lidar", &self.v_lidar),
        ] {
            conv.visit(&join(prefix, name), v);
        }
    }
}

/// Intermediate values of the gated fusion.
pub struct GateOutput<T: Scalar> {
    pub gate: Tensor<T>,
    pub mixed: Tensor<T>,
    pub out: Tensor<T>,
}

/// `recovery(g·cross + (1 − g)·(rgb + lidar))` with
/// `g = σ(gate([rgb; lidar; cross]))`.
pub struct GatedFusion<T: Scalar> {
    pub gate: Conv2d<T>,
    pub recovery: Conv2d<T>,
}

impl<T: Scalar> GatedFusion<T> {
    pub fn new(d: usize, channels: usize, rng: &mut SeedRng) -> Self {
        GatedFusion {
            gate: Conv2d::pointwise(3 * d, d, rng),
            recovery: Conv2d::pointwise(d, channels, rng),
        }
    }

    pub fn forward_parts(&self, rgb: &Tensor<T>, lidar: &Tensor<T>, cross: &Tensor<T>) -> Result<GateOutput<T>> {
        let g = self.gate.forward(&Tensor::concat(&[rgb, lidar, cross], 1)?)?.sigmoid();
        let local = rgb.add(lidar)?;
        let mixed = local.add(&g.mul(&cross.sub(&local)?)?)?;
        let out = self.recovery.forward(&mixed)?;
        Ok(GateOutput { gate: g, mixed, out })
    }

    pub fn forward(&self, rgb: &Tensor<T>, lidar: &Tensor<T>, cross: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_parts(rgb, lidar, cross)?.out)
    }
}

impl<T: Scalar> Module<T> for GatedFusion<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.gate.visit(&join(prefix, "gate"), v);
        self.recovery.visit(&join(prefix, "recovery"), v);
    }
}

/// Fusion block for one pyramid level.
pub struct Msfm<T: Scalar> {
    pub channels: usize,
    pub reduce_rgb: Conv2d<T>,
    pub reduce_lidar: Conv2d<T>,
    pub eca: Eca<T>,
    pub ca: CoordinateAttention<T>,
    pub cma: CrossModalAttention<T>,
    pub fusion: GatedFusion<T>,
}

impl<T: Scalar> Msfm<T> {
    pub fn new(channels: usize, token_cap: Option<usize>, rng: &mut SeedRng) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::Config(format!("fusion width must be even, got {channels}")));
        }
        let d = channels / 2;
        Ok(Msfm {
            channels,
            reduce_rgb: Conv2d::pointwise(channels, d, rng),
            reduce_lidar: Conv2d::pointwise(channels, d, rng),
            eca: Eca::new(d, rng),
            ca: CoordinateAttention::new(d, rng),
            cma: CrossModalAttention::new(d, token_cap, rng),
            fusion: GatedFusion::new(d, channels, rng),
        })
    }

    pub fn set_token_cap(&mut self, cap: Option<usize>) {
        self.cma.token_cap = cap;
    }

    pub fn forward(&self, rgb: &Tensor<T>, lidar: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        if rgb.shape() != lidar.shape() {
            return Err(Error::Invalid(format!(
                "fusion inputs differ: {:?} vs {:?}",
                rgb.shape(),
                lidar.shape()
            )));
        }
        let a = self.eca.forward(&self.reduce_rgb.forward(rgb)?)?;
        let b = self.ca.forward(&self.reduce_lidar.forward(lidar)?, ctx)?;
        let c = self.cma.forward(&a, &b)?;
        self.fusion.forward(&a, &b, &c)
    }
}

impl<T: Scalar> Module<T> for Msfm<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.reduce_rgb.visit(&join(prefix, "reduce_rgb"), v);
        self.reduce_lidar.visit(&join(prefix, "reduce_lidar"), v);
        self.eca.visit(&join(prefix, "eca"), v);
        self.ca.visit(&join(prefix, "ca"), v);
        self.cma.visit(&join(prefix, "cma"), v);
        self.fusion.visit(&join(prefix, "fusion"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eca_kernel_sizes() {
        assert_eq!(eca_kernel_size(480), 5);
        assert_eq!(eca_kernel_size(8), 3);
        assert_eq!(eca_kernel_size(56), 3);
        assert_eq!(eca_kernel_size(20), 3);
        assert_eq!(eca_kernel_size(12), 3);
    }

    #[test]
    fn token_grid_caps_keys() {
        assert_eq!(token_grid(12, 39, Some(1024)), None);
        assert_eq!(token_grid(24, 78, Some(1024)), Some((24, 32)));
        assert_eq!(token_grid(192, 624, Some(1024)), Some((32, 32)));
        assert_eq!(token_grid(192, 624, None), None);
    }

    #[test]
    fn odd_width_rejected() {
        let mut rng = SeedRng::new(0);
        assert!(Msfm::<f32>::new(15, None, &mut rng).is_err());
    }

    #[test]
    fn zero_input_gives_zero_attention_outputs() {
        let mut rng = SeedRng::new(1);
        let x = Tensor::<f64>::zeros(&[1, 8, 3, 3]);
        let eca = Eca::new(8, &mut rng);
        assert!(eca.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let ca = CoordinateAttention::new(8, &mut rng);
        assert!(ca.forward(&x, &Ctx::eval()).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
