use serde::{Deserialize, Serialize};

use super::{DetectError, Result};
use crate::align::{attention_apply, attention_map, AlignError, AttentionNet, Block, BlockSet, FeatureMap};
use crate::nn::Conv;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Input size and per-block output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub channels: [usize; 5],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            channels: [16, 32, 64, 96, 128],
        }
    }
}

impl BackboneSpec {
    /// Side length of block `b`'s output.
    pub fn spatial(&self, block: Block) -> usize {
        self.input_size >> block.index()
    }

    pub fn grid(&self) -> usize {
        self.input_size >> 5
    }

    pub fn block_channels(&self, block: Block) -> usize {
        self.channels[block.index() as usize - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_multiple_of(32) || self.input_size == 0 || self.in_channels == 0 || self.channels.contains(&0) {
            return Err(DetectError::Align(AlignError::Config(format!(
                "backbone spec {self:?}: input size must be a positive multiple of 32 and channels positive"
            ))));
        }
        Ok(())
    }
}

/// Raw tap `Z` of one alignable block and, when attention is enabled there,
/// the reweighted map `Z_φ`.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub raw: FeatureMap,
    pub attended: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Blocks 3, 4, 5 in order.
    pub taps: [BlockOutput; 3],
    /// Final map handed to the head: `Z⁵_φ` when block 5 uses attention, else `Z⁵`.
    pub last: Var,
}

impl BackboneOutput {
    pub fn tap(&self, block: Block) -> &BlockOutput {
        &self.taps[block.index() as usize - 3]
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    convs: Vec<[Conv; 2]>,
}

impl Backbone {
    pub const PREFIX: &'static str = "bb.";

    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut c_in = spec.in_channels;
        let mut convs = Vec::with_capacity(5);
        for (i, &c) in spec.channels.iter().enumerate() {
            let b = i + 1;
            let a = Conv::new(ps, &format!("{}{b}.conv1", Self::PREFIX), c_in, c, 3, seed)?;
            let z = Conv::new(ps, &format!("{}{b}.conv2", Self::PREFIX), c, c, 3, seed)?;
            convs.push([a, z]);
            c_in = c;
        }
        Ok(Self { spec: *spec, convs })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Runs all five blocks. For every block in `sa`, the attention-weighted
    /// map replaces the raw map as input to the next block.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        attention: &[AttentionNet],
        sa: BlockSet,
    ) -> Result<BackboneOutput> {
        let expected = vec![self.spec.in_channels, self.spec.input_size, self.spec.input_size];
        if g.shape(image) != expected.as_slice() {
            return Err(DetectError::InputShape {
                got: g.shape(image).to_vec(),
                expected,
            });
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(3);
        for (i, [c1, c2]) in self.convs.iter().enumerate() {
            let block = Block::new(i as u8 + 1).expect("block index in range");
            let h = c1.forward(g, p, x)?;
            let h = g.relu(h);
            let h = c2.forward(g, p, h)?;
            let h = g.relu(h);
            x = g.max_pool2d(h, 2, 2)?;
            if !block.is_alignable() {
                continue;
            }
            let raw = FeatureMap::new(g, x, block)?;
            let attended = if sa.contains(block) {
                let net = attention.iter().find(|a| a.block == block).ok_or_else(|| {
                    AlignError::Config(format!("attention enabled on block {block} without an attention network"))
                })?;
                let phi = attention_map(g, p, &raw, net)?;
                let z = attention_apply(g, &phi, &raw)?;
                x = z.var;
                Some(z)
            } else {
                None
            };
            taps.push(BlockOutput { raw, attended });
        }
        Ok(BackboneOutput {
            taps: [taps[0], taps[1], taps[2]],
            last: x,
        })
    }
}
