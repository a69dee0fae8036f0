use super::config::TrainConfig;
use super::Result;
use crate::align::{DiscKind, Discriminator};
use crate::data::NUM_CLASSES;
use crate::detect::Detector;
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Detector, discriminators and their weights.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub params: ParamStore<T>,
    pub detector: Detector,
    pub style: Vec<Discriminator>,
    pub attention: Vec<Discriminator>,
}

impl<T: Scalar> Model<T> {
    /// Full model for `cfg`: style discriminators for `sd_blocks`, attention
    /// networks and discriminators for `sa_blocks`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Self::build(cfg, true)
    }

    /// Detector only; no discriminator is constructed.
    pub fn detector_only(cfg: &TrainConfig) -> Result<Self> {
        Self::build(cfg, false)
    }

    fn build(cfg: &TrainConfig, discriminators: bool) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.backbone();
        let mut params = ParamStore::new();
        let detector = Detector::new(&mut params, &spec, cfg.sa_blocks, NUM_CLASSES, cfg.seed)?;
        let (mut style, mut attention) = (Vec::new(), Vec::new());
        if discriminators {
            let w = cfg.widths();
            for b in cfg.sd_blocks.iter() {
                style.push(Discriminator::new(&mut params, DiscKind::Style, b, spec.block_channels(b), &w, cfg.seed)?);
            }
            for b in cfg.sa_blocks.iter() {
                attention.push(Discriminator::new(
                    &mut params,
                    DiscKind::Attention,
                    b,
                    spec.block_channels(b),
                    &w,
                    cfg.seed,
                )?);
            }
        }
        Ok(Self {
            params,
            detector,
            style,
            attention,
        })
    }
}
