//! The full network and its ablation variants.

use serde::{Deserialize, Serialize};

use roadfuse_tensor::{Scalar, SeedRng, Tensor};

use crate::decoder::{Bridge, Decoder, SegmentationOutput};
use crate::encoder::{FeaturePyramid, LidarEncoder, RgbEncoder, PYRAMID_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{Msfm, DEFAULT_TOKEN_CAP};
use crate::nn::{join, Ctx, Module, Visitor};

/// Which components are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lidar: bool,
    /// Per-scale fusion blocks; without them the two pyramids are summed.
    pub msfm: bool,
    pub bridge: bool,
    pub deep_supervision: bool,
    /// Key/value token cap for cross-modal attention; `None` disables pooling.
    pub token_cap: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lidar: true,
            msfm: true,
            bridge: true,
            deep_supervision: true,
            token_cap: Some(DEFAULT_TOKEN_CAP),
        }
    }
}

impl ModelConfig {
    /// RGB encoder and decoder only.
    pub fn baseline() -> Self {
        ModelConfig {
            lidar: false,
            msfm: false,
            bridge: false,
            deep_supervision: false,
            ..Default::default()
        }
    }

    /// The ablation ladder: baseline, +LiDAR, +fusion, +bridge, +deep supervision.
    pub fn ablation_ladder() -> [(&'static str, ModelConfig); 5] {
        let b = Self::baseline();
        let l = ModelConfig { lidar: true, ..b };
        let m = ModelConfig { msfm: true, ..l };
        let br = ModelConfig { bridge: true, ..m };
        let full = ModelConfig {
            deep_supervision: true,
            ..br
        };
        [("baseline", b), ("+lidar", l), ("+msfm", m), ("+bridge", br), ("+deepsup", full)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.msfm && !self.lidar {
            return Err(Error::Config("fusion blocks require the LiDAR stream".into()));
        }
        if self.token_cap == Some(0) {
            return Err(Error::Config("token cap must be positive".into()));
        }
        Ok(())
    }
}

pub struct RoadFuseNet<T: Scalar> {
    pub config: ModelConfig,
    pub rgb: RgbEncoder<T>,
    pub lidar: Option<LidarEncoder<T>>,
    pub fusion: Option<Vec<Msfm<T>>>,
    pub bridge: Option<Bridge<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> RoadFuseNet<T> {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut root = SeedRng::new(seed);
        let mut rng = root.split();
        let rgb = RgbEncoder::new(&mut rng);
        let mut rng = root.split();
        let lidar = config.lidar.then(|| LidarEncoder::new(&mut rng));
        let mut rng = root.split();
        let fusion = if config.msfm {
            Some(
                PYRAMID_CHANNELS
                    .iter()
                    .map(|&c| Msfm::new(c, config.token_cap, &mut rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let mut rng = root.split();
        let bridge = config.bridge.then(|| Bridge::new(PYRAMID_CHANNELS[4], &mut rng));
        let mut rng = root.split();
        let mut decoder = Decoder::new(PYRAMID_CHANNELS, &mut rng);
        if !config.deep_supervision {
            decoder.aux_heads.clear();
        }
        Ok(RoadFuseNet {
            config,
            rgb,
            lidar,
            fusion,
            bridge,
            decoder,
        })
    }

    pub fn set_token_cap(&mut self, cap: Option<usize>) {
        self.config.token_cap = cap;
        if let Some(f) = &mut self.fusion {
            f.iter_mut().for_each(|m| m.set_token_cap(cap));
        }
    }

    /// Fused pyramid before the bridge.
    pub fn encode(&self, rgb: &Tensor<T>, adi: Option<&Tensor<T>>, ctx: &Ctx) -> Result<FeaturePyramid<T>> {
        let f_rgb = self.rgb.forward(rgb, ctx)?;
        let Some(lidar) = &self.lidar else {
            return Ok(f_rgb);
        };
        let adi = adi.ok_or_else(|| Error::Invalid("model has a LiDAR stream but no ADI input was given".into()))?;
        if adi.shape() != rgb.shape() {
            return Err(Error::Invalid(format!(
                "RGB input {:?} and ADI input {:?} differ",
                rgb.shape(),
                adi.shape()
            )));
        }
        let f_lidar = lidar.forward(adi, ctx)?;
        match &self.fusion {
            Some(blocks) => blocks
                .iter()
                .zip(f_rgb.iter().zip(&f_lidar))
                .map(|(m, (a, b))| m.forward(a, b, ctx))
                .collect(),
            None => f_rgb.iter().zip(&f_lidar).map(|(a, b)| Ok(a.add(b)?)).collect(),
        }
    }

    /// Auxiliary logits are produced only in training with deep supervision.
    pub fn forward(&self, rgb: &Tensor<T>, adi: Option<&Tensor<T>>, ctx: &Ctx) -> Result<SegmentationOutput<T>> {
        let pyramid = self.encode(rgb, adi, ctx)?;
        let deepest = match &self.bridge {
            Some(b) => b.forward(&pyramid[4], ctx)?,
            None => pyramid[4].clone(),
        };
        let with_aux = ctx.training && self.config.deep_supervision;
        self.decoder.forward(&deepest, &pyramid, with_aux, ctx)
    }

    /// Trainable parameter counts per top-level component.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut rows = vec![("rgb_encoder".to_string(), self.rgb.param_count())];
        if let Some(l) = &self.lidar {
            rows.push(("lidar_encoder".into(), l.param_count()));
        }
        if let Some(f) = &self.fusion {
            for (i, m) in f.iter().enumerate() {
                rows.push((format!("msfm.{i}"), m.param_count()));
            }
        }
        if let Some(b) = &self.bridge {
            rows.push(("bridge".into(), b.param_count()));
        }
        let aux = self.decoder.aux_heads.param_count();
        rows.push(("decoder".into(), self.decoder.param_count() - aux));
        if aux > 0 {
            rows.push(("aux_heads".into(), aux));
        }
        rows
    }

    /// Parameters used at inference (auxiliary heads excluded).
    pub fn inference_param_count(&self) -> usize {
        self.param_count() - self.decoder.aux_heads.param_count()
    }
}

impl<T: Scalar> Module<T> for RoadFuseNet<T> {
    fn visit(&self, prefix: &str, v: &mut Visitor<'_, T>) {
        self.rgb.visit(&join(prefix, "rgb"), v);
        self.lidar.visit(&join(prefix, "lidar"), v);
        self.fusion.visit(&join(prefix, "fusion"), v);
        self.bridge.visit(&join(prefix, "bridge"), v);
        self.decoder.visit(&join(prefix, "decoder"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msfm_without_lidar_is_rejected() {
        let cfg = ModelConfig {
            lidar: false,
            ..Default::default()
        };
        assert!(RoadFuseNet::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn breakdown_sums_to_total() {
        let net = RoadFuseNet::<f32>::new(ModelConfig::default(), 0).unwrap();
        let sum: usize = net.breakdown().iter().map(|(_, n)| n).sum();
        assert_eq!(sum, net.param_count());
    }
}
