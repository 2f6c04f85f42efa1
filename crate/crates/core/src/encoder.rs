//! Dual-stream encoder: a MobileNetV3-Large RGB backbone and a five-block
//! depthwise-separable LiDAR stream, both producing five-level pyramids at
//! strides 2, 4, 8, 16 and 32.

use roadfuse_tensor::{Activation, ConvSpec, Scalar, SeedRng, Tensor};

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvBnAct, Ctx, Module, Visitor};

/// Channel widths of the five pyramid levels.
pub const PYRAMID_CHANNELS: [usize; 5] = [16, 24, 40, 112, 960];

/// Input extents must be divisible by the deepest stride.
pub const STRIDE: usize = 32;

/// Five feature maps, shallow to deep.
pub type FeaturePyramid<T> = Vec<Tensor<T>>;

pub fn check_extents(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % STRIDE != 0 || width % STRIDE != 0 {
        let pad = |x: usize| x.div_ceil(STRIDE).max(1) * STRIDE;
        return Err(Error::Extents {
            height,
            width,
            padded_height: pad(height),
            padded_width: pad(width),
        });
    }
    Ok(())
}

/// Rounds to the nearest multiple of 8, never dropping more than 10%.
pub fn make_divisible(v: usize) -> usize {
    let d = 8;
    let mut n = d.max((v + d / 2) / d * d);
    if (n as f64) < 0.9 * v as f64 {
        n += d;
    }
    n
}

/// One row of the MobileNetV3-Large layer table.
#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub kernel: usize,
    pub expanded: usize,
    pub out: usize,
    pub se: bool,
    pub act: Activation,
    pub stride: usize,
}

const fn row(kernel: usize, expanded: usize, out: usize, se: bool, hs: bool, stride: usize) -> BlockConfig {
    BlockConfig {
        kernel,
        expanded,
        out,
        se,
        act: if hs { Activation::HardSwish } else { Activation::Relu },
        stride,
    }
}

#[rustfmt::skip]
pub const MOBILENET_V3_LARGE: [BlockConfig; 15] = [
    row(3, 16, 16, false, false, 1),
    row(3, 64, 24, false, false, 2),
    row(3, 72, 24, false, false, 1),
    row(5, 72, 40, true, false, 2),
    row(5, 120, 40, true, false, 1),
    row(5, 120, 40, true, false, 1),
    row(3, 240, 80, false, true, 2),
    row(3, 200, 80, false, true, 1),
    row(3, 184, 80, false, true, 1),
    row(3, 184, 80, false, true, 1),
    row(3, 480, 112, true, true, 1),
    row(3, 672, 112, true, true, 1),
    row(5, 672, 160, true, true, 2),
    row(5, 960, 160, true, true, 1),
    row(5, 960, 160, true, true, 1),
];

/// Blocks whose outputs are pyramid levels 0..=3; level 4 is the final
/// 1×1 expansion.
const TAPS: [usize; 4] = [0, 2, 5, 11];
const STEM_CHANNELS: usize = 16;
const LAST_CHANNELS: usize = 960;

pub struct SqueezeExcite<T: Scalar> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}

impl<T: Scalar> SqueezeExcite<T> {
    pub fn new(channels: usize, rng: &mut SeedRng) -> Self {
        let squeeze = make_divisible(channels / 4);
        SqueezeExcite {
            fc1: Conv2d::pointwise(channels, squeeze, rng),
            fc2: Conv2d::pointwise(squeeze, channels, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.adaptive_avg_pool2d(1, 1)?;
        let s = self.fc1.forward(&s)?.relu();
        let s = self.fc2.forward(&s)?.activation(Activation::HardSigmoid);
        Ok(x.mul(&s)?)
    }
}

impl<T: Scalar> Module<T> for SqueezeExcite<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.fc1.visit(&join(prefix, "fc1"), v);
        self.fc2.visit(&join(prefix, "fc2"), v);
    }
}

pub struct InvertedResidual<T: Scalar> {
    pub expand: Option<ConvBnAct<T>>,
    pub depthwise: ConvBnAct<T>,
    pub se: Option<SqueezeExcite<T>>,
    pub project: ConvBnAct<T>,
    residual: bool,
}

impl<T: Scalar> InvertedResidual<T> {
    pub fn new(cin: usize, cfg: BlockConfig, rng: &mut SeedRng) -> Self {
        let e = cfg.expanded;
        InvertedResidual {
            expand: (e != cin).then(|| ConvBnAct::new(ConvSpec::new(cin, e, 1), Some(cfg.act), rng)),
            depthwise: ConvBnAct::new(ConvSpec::depthwise(e, cfg.kernel).stride(cfg.stride), Some(cfg.act), rng),
            se: cfg.se.then(|| SqueezeExcite::new(e, rng)),
            project: ConvBnAct::new(ConvSpec::new(e, cfg.out, 1), None, rng),
            residual: cfg.stride == 1 && cin == cfg.out,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let mut y = match &self.expand {
            Some(e) => e.forward(x, ctx)?,
            None => x.clone(),
        };
        y = self.depthwise.forward(&y, ctx)?;
        if let Some(se) = &self.se {
            y = se.forward(&y)?;
        }
        y = self.project.forward(&y, ctx)?;
        if self.residual {
            y = y.add(x)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for InvertedResidual<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.expand.visit(&join(prefix, "expand"), v);
        self.depthwise.visit(&join(prefix, "depthwise"), v);
        self.se.visit(&join(prefix, "se"), v);
        self.project.visit(&join(prefix, "project"), v);
    }
}

pub struct RgbEncoder<T: Scalar> {
    pub stem: ConvBnAct<T>,
    pub blocks: Vec<InvertedResidual<T>>,
    pub last: ConvBnAct<T>,
}

impl<T: Scalar> RgbEncoder<T> {
    pub fn new(rng: &mut SeedRng) -> Self {
        let stem = ConvBnAct::new(
            ConvSpec::new(3, STEM_CHANNELS, 3).stride(2).padding(1),
            Some(Activation::HardSwish),
            rng,
        );
        let mut cin = STEM_CHANNELS;
        let blocks = MOBILENET_V3_LARGE
            .iter()
            .map(|cfg| {
                let b = InvertedResidual::new(cin, *cfg, rng);
                cin = cfg.out;
                b
            })
            .collect();
        let last = ConvBnAct::new(ConvSpec::new(cin, LAST_CHANNELS, 1), Some(Activation::HardSwish), rng);
        RgbEncoder { stem, blocks, last }
    }

    pub fn forward(&self, image: &Tensor<T>, ctx: &Ctx) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = image.dims4()?;
        check_channels("RGB", c)?;
        check_extents(h, w)?;
        let mut x = self.stem.forward(image, ctx)?;
        let mut taps = Vec::with_capacity(5);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, ctx)?;
            if TAPS.contains(&i) {
                taps.push(x.clone());
            }
        }
        taps.push(self.last.forward(&x, ctx)?);
        Ok(taps)
    }
}

impl<T: Scalar> Module<T> for RgbEncoder<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.stem.visit(&join(prefix, "stem"), v);
        self.blocks.visit(&join(prefix, "blocks"), v);
        self.last.visit(&join(prefix, "last"), v);
    }
}

fn check_channels(stream: &str, c: usize) -> Result<()> {
    if c != 3 {
        return Err(Error::Invalid(format!("{stream} input must have 3 channels, got {c}")));
    }
    Ok(())
}

/// Depthwise 3×3 (stride 2) and pointwise 1×1, each followed by batch norm
/// and ReLU.
pub struct DsConvBlock<T: Scalar> {
    pub depthwise: ConvBnAct<T>,
    pub pointwise: ConvBnAct<T>,
}

impl<T: Scalar> DsConvBlock<T> {
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut SeedRng) -> Self {
        DsConvBlock {
            depthwise: ConvBnAct::new(ConvSpec::depthwise(cin, 3).stride(stride), Some(Activation::Relu), rng),
            pointwise: ConvBnAct::new(ConvSpec::new(cin, cout, 1), Some(Activation::Relu), rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        self.pointwise.forward(&self.depthwise.forward(x, ctx)?, ctx)
    }
}

impl<T: Scalar> Module<T> for DsConvBlock<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.depthwise.visit(&join(prefix, "depthwise"), v);
        self.pointwise.visit(&join(prefix, "pointwise"), v);
    }
}

pub struct LidarEncoder<T: Scalar> {
    pub blocks: Vec<DsConvBlock<T>>,
}

impl<T: Scalar> LidarEncoder<T> {
    pub fn new(rng: &mut SeedRng) -> Self {
        let mut cin = 3;
        let blocks = PYRAMID_CHANNELS
            .iter()
            .map(|&cout| {
                let b = DsConvBlock::new(cin, cout, 2, rng);
                cin = cout;
                b
            })
            .collect();
        LidarEncoder { blocks }
    }

    pub fn forward(&self, adi: &Tensor<T>, ctx: &Ctx) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = adi.dims4()?;
        check_channels("ADI", c)?;
        check_extents(h, w)?;
        let mut x = adi.clone();
        let mut taps = Vec::with_capacity(5);
        for block in &self.blocks {
            x = block.forward(&x, ctx)?;
            taps.push(x.clone());
        }
        Ok(taps)
    }
}

impl<T: Scalar> Module<T> for LidarEncoder<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.blocks.visit(&join(prefix, "blocks"), v);
    }
}
