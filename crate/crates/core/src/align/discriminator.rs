use serde::{Deserialize, Serialize};

use super::{AlignError, Block, Result};
use crate::nn::{Conv, Linear};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscKind {
    /// Three fully connected layers over the flattened Gram vector.
    Style,
    /// One 1x1 convolution, global average pooling, then two fully connected layers.
    Attention,
}

/// Hidden widths of the domain discriminators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorWidths {
    pub style_hidden: [usize; 2],
    pub attention_conv: usize,
    pub attention_hidden: usize,
}

impl Default for DiscriminatorWidths {
    fn default() -> Self {
        Self {
            style_hidden: [256, 128],
            attention_conv: 64,
            attention_hidden: 64,
        }
    }
}

#[derive(Debug, Clone)]
enum Layers {
    Style([Linear; 3]),
    Attention { conv: Conv, fc: [Linear; 2] },
}

/// Domain classifier returning P(source) for one input.
#[derive(Debug, Clone)]
pub struct Discriminator {
    kind: DiscKind,
    block: Block,
    input_channels: usize,
    layers: Layers,
}

impl Discriminator {
    pub fn prefix(kind: DiscKind, block: Block) -> String {
        match kind {
            DiscKind::Style => format!("dstyle{block}."),
            DiscKind::Attention => format!("datt{block}."),
        }
    }

    /// `channels` is `C` of the block output the discriminator judges.
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        kind: DiscKind,
        block: Block,
        channels: usize,
        widths: &DiscriminatorWidths,
        seed: u64,
    ) -> Result<Self> {
        let pre = Self::prefix(kind, block);
        let layers = match kind {
            DiscKind::Style => {
                let [h1, h2] = widths.style_hidden;
                Layers::Style([
                    Linear::new(ps, &format!("{pre}fc1"), channels * channels, h1, seed)?,
                    Linear::new(ps, &format!("{pre}fc2"), h1, h2, seed)?,
                    Linear::new(ps, &format!("{pre}fc3"), h2, 1, seed)?,
                ])
            }
            DiscKind::Attention => Layers::Attention {
                conv: Conv::new(ps, &format!("{pre}conv"), channels, widths.attention_conv, 1, seed)?,
                fc: [
                    Linear::new(
                        ps,
                        &format!("{pre}fc1"),
                        widths.attention_conv,
                        widths.attention_hidden,
                        seed,
                    )?,
                    Linear::new(ps, &format!("{pre}fc2"), widths.attention_hidden, 1, seed)?,
                ],
            },
        };
        Ok(Self {
            kind,
            block,
            input_channels: channels,
            layers,
        })
    }

    pub fn kind(&self) -> DiscKind {
        self.kind
    }

    pub fn block(&self) -> Block {
        self.block
    }

    /// Probability in (0, 1) that `x` came from the source domain, as a `[1, 1]` node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let logit = self.forward_logit(g, p, x)?;
        Ok(g.sigmoid(logit))
    }

    /// Pre-sigmoid score; losses are computed from this to avoid saturation.
    pub fn forward_logit<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        Ok(match &self.layers {
            Layers::Style(fc) => {
                let h = fc[0].forward(g, p, x)?;
                let h = g.relu(h);
                let h = fc[1].forward(g, p, h)?;
                let h = g.relu(h);
                fc[2].forward(g, p, h)?
            }
            Layers::Attention { conv, fc } => {
                let h = conv.forward(g, p, x)?;
                let h = g.relu(h);
                let h = g.global_avg_pool(h)?;
                let h = fc[0].forward(g, p, h)?;
                let h = g.relu(h);
                fc[1].forward(g, p, h)?
            }
        })
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.shape(x);
        match self.kind {
            DiscKind::Style => {
                let want = self.input_channels * self.input_channels;
                if shape != [1, want] {
                    return Err(AlignError::Config(format!(
                        "style discriminator for block {} expects [1, {want}], got {shape:?}",
                        self.block
                    )));
                }
            }
            DiscKind::Attention => {
                if shape.first() != Some(&self.input_channels) || shape.len() != 3 {
                    return Err(AlignError::Config(format!(
                        "attention discriminator for block {} expects [{}, H, W], got {shape:?}",
                        self.block, self.input_channels
                    )));
                }
            }
        }
        Ok(())
    }
}
