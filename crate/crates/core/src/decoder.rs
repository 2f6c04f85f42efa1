//! Large-kernel bridge on the deepest fused feature and the U-shaped decoder
//! with deep-supervision heads.

use roadfuse_tensor::{Activation, ConvSpec, Scalar, SeedRng, Tensor};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvBnAct, Ctx, Module, Visitor};

pub const BRIDGE_WIDTH: usize = 128;
pub const BRIDGE_KERNEL: usize = 7;
pub const BRIDGE_DROPOUT: f64 = 0.2;
/// Bottleneck width followed by the four UpBlock widths.
pub const DECODER_WIDTHS: [usize; 5] = [128, 64, 32, 16, 16];

/// `x + up(dropout(gelu(dw7x7(down(x)))))`, without normalization.
pub struct Bridge<T: Scalar> {
    pub channels: usize,
    pub down: Conv2d<T>,
    pub depthwise: Conv2d<T>,
    pub up: Conv2d<T>,
    pub dropout: f64,
}

impl<T: Scalar> Bridge<T> {
    pub fn new(channels: usize, rng: &mut SeedRng) -> Self {
        Bridge {
            channels,
            down: Conv2d::pointwise(channels, BRIDGE_WIDTH, rng),
            depthwise: Conv2d::new(ConvSpec::depthwise(BRIDGE_WIDTH, BRIDGE_KERNEL), rng),
            up: Conv2d::pointwise(BRIDGE_WIDTH, channels, rng),
            dropout: BRIDGE_DROPOUT,
        }
    }

    /// The residual branch alone.
    pub fn branch(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Invalid(format!("bridge expects {} channels, got {c}", self.channels)));
        }
        let y = self.depthwise.forward(&self.down.forward(x)?)?.gelu();
        let y = y.dropout2d(self.dropout, ctx.training, &mut ctx.rng())?;
        self.up.forward(&y)
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        Ok(x.add(&self.branch(x, ctx)?)?)
    }
}

impl<T: Scalar> Module<T> for Bridge<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.down.visit(&join(prefix, "down"), v);
        self.depthwise.visit(&join(prefix, "depthwise"), v);
        self.up.visit(&join(prefix, "up"), v);
    }
}

/// Two 3×3 conv–BN–ReLU layers.
pub struct DoubleConv<T: Scalar> {
    pub first: ConvBnAct<T>,
    pub second: ConvBnAct<T>,
}

impl<T: Scalar> DoubleConv<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut SeedRng) -> Self {
        DoubleConv {
            first: ConvBnAct::new(ConvSpec::new(cin, cout, 3).padding(1), Some(Activation::Relu), rng),
            second: ConvBnAct::new(ConvSpec::new(cout, cout, 3).padding(1), Some(Activation::Relu), rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        self.second.forward(&self.first.forward(x, ctx)?, ctx)
    }
}

impl<T: Scalar> Module<T> for DoubleConv<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.first.visit(&join(prefix, "first"), v);
        self.second.visit(&join(prefix, "second"), v);
    }
}

/// `DoubleConv([up2(deeper); skip_adapter(skip)])`.
pub struct UpBlock<T: Scalar> {
    pub skip_adapter: Conv2d<T>,
    pub conv: DoubleConv<T>,
}

impl<T: Scalar> UpBlock<T> {
    pub fn new(deeper: usize, skip: usize, out: usize, rng: &mut SeedRng) -> Self {
        UpBlock {
            skip_adapter: Conv2d::pointwise(skip, out, rng),
            conv: DoubleConv::new(deeper + out, out, rng),
        }
    }

    pub fn forward(&self, deeper: &Tensor<T>, skip: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let (_, _, h, w) = deeper.dims4()?;
        let (_, _, sh, sw) = skip.dims4()?;
        if (2 * h, 2 * w) != (sh, sw) {
            return Err(Error::Invalid(format!(
                "upsampled decoder map is {}×{} but the skip feature is {sh}×{sw}",
                2 * h,
                2 * w
            )));
        }
        let up = deeper.bilinear_resize(sh, sw)?;
        let skip = self.skip_adapter.forward(skip)?;
        self.conv.forward(&Tensor::concat(&[&up, &skip], 1)?, ctx)
    }
}

impl<T: Scalar> Module<T> for UpBlock<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.skip_adapter.visit(&join(prefix, "skip_adapter"), v);
        self.conv.visit(&join(prefix, "conv"), v);
    }
}

/// Main logits at input resolution plus, in training, three auxiliary
/// logits from deep to shallow.
pub struct SegmentationOutput<T: Scalar> {
    pub main: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

pub struct Decoder<T: Scalar> {
    pub bottleneck: Conv2d<T>,
    pub blocks: Vec<UpBlock<T>>,
    pub aux_heads: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> Decoder<T> {
    /// `skips` are the pyramid widths shallow to deep.
    pub fn new(skips: [usize; 5], rng: &mut SeedRng) -> Self {
        let bottleneck = Conv2d::pointwise(skips[4], DECODER_WIDTHS[0], rng);
        let blocks = (0..4)
            .map(|i| UpBlock::new(DECODER_WIDTHS[i], skips[3 - i], DECODER_WIDTHS[i + 1], rng))
            .collect();
        let aux_heads = (1..4).map(|i| Conv2d::pointwise(DECODER_WIDTHS[i], 1, rng)).collect();
        let head = Conv2d::pointwise(DECODER_WIDTHS[4], 1, rng);
        Decoder {
            bottleneck,
            blocks,
            aux_heads,
            head,
        }
    }

    /// `deepest` is the enhanced level-4 map; `pyramid` supplies the skips.
    /// Auxiliary heads run only when `with_aux` is set.
    pub fn forward(
        &self,
        deepest: &Tensor<T>,
        pyramid: &FeaturePyramid<T>,
        with_aux: bool,
        ctx: &Ctx,
    ) -> Result<SegmentationOutput<T>> {
        if pyramid.len() != 5 {
            return Err(Error::Invalid(format!("decoder needs 5 pyramid levels, got {}", pyramid.len())));
        }
        let mut x = self.bottleneck.forward(deepest)?;
        let mut aux = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &pyramid[3 - i], ctx)?;
            if with_aux && i < self.aux_heads.len() {
                aux.push(self.aux_heads[i].forward(&x)?);
            }
        }
        let (_, _, h, w) = x.dims4()?;
        let main = self.head.forward(&x.bilinear_resize(2 * h, 2 * w)?)?;
        Ok(SegmentationOutput { main, aux })
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.bottleneck.visit(&join(prefix, "bottleneck"), v);
        self.blocks.visit(&join(prefix, "blocks"), v);
        self.aux_heads.visit(&join(prefix, "aux_heads"), v);
        self.head.visit(&join(prefix, "head"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bridge_count_closed_form() {
        let mut rng = SeedRng::new(0);
        let b = Bridge::<f32>::new(960, &mut rng);
        assert_eq!(b.param_count(), 960 * 128 + 128 + 128 * 49 + 128 + 128 * 960 + 960);
    }

    #[test]
    fn zero_input_passes_through_bridge() {
        let mut rng = SeedRng::new(0);
        let b = Bridge::<f64>::new(8, &mut rng);
        let y = b.forward(&Tensor::zeros(&[1, 8, 3, 3]), &Ctx::eval()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upblock_rejects_extent_mismatch() {
        let mut rng = SeedRng::new(0);
        let b = UpBlock::<f32>::new(4, 2, 3, &mut rng);
        let err = b
            .forward(&Tensor::zeros(&[1, 4, 2, 3]), &Tensor::zeros(&[1, 2, 4, 5]), &Ctx::eval())
            .unwrap_err();
        assert!(err.to_string().contains("4×6"), "{err}");
    }
}
