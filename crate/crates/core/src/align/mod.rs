//! Cross-domain feature alignment.
//!
//! Two adversarial mechanisms act on backbone block outputs:
//!
//! * depthwise style alignment: each block output is reduced to its
//!   normalized channel Gram matrix, and a per-block discriminator tries to
//!   tell source from target styles;
//! * spatial-attention alignment: a 7x7 attention network produces a
//!   single-channel map that reweights every channel, and a second
//!   discriminator tries to tell the reweighted maps apart.
//!
//! Both discriminators are trained with a focal binary loss. The feature
//! extractor sits behind a gradient-reversal node, so a single backward pass
//! trains the discriminators to separate the domains and the extractor to
//! confuse them.

mod attention;
mod block;
mod discriminator;
mod focal;
mod gram;

pub use attention::{attention_apply, attention_map, AttentionMap, AttentionNet};
pub use block::{Block, BlockSet};
pub use discriminator::{DiscKind, Discriminator, DiscriminatorWidths};
pub use focal::{focal_domain_loss, focal_domain_loss_logits, focal_domain_loss_var, Domain, PROB_CLAMP};
pub use gram::{gram, style_forward, GramStyle};

use thiserror::Error;

use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// A block output `Z` of shape `[C, H, W]` on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub block: Block,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new<T: Scalar>(g: &Graph<T>, var: Var, block: Block) -> Result<Self> {
        match *g.shape(var) {
            [c, h, w] => Ok(Self {
                var,
                block,
                channels: c,
                height: h,
                width: w,
            }),
            ref s => Err(AlignError::Config(format!(
                "feature map for block {block} must be [C, H, W], got {s:?}"
            ))),
        }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

/// Whether the discriminator input passes through a gradient-reversal node.
/// Training always reverses; the plain variant exists to check the sign contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reversal {
    Reversed,
    Plain,
}

fn check_disc(d: &Discriminator, kind: DiscKind, blocks: [Block; 2]) -> Result<()> {
    if d.kind() != kind {
        return Err(AlignError::Config(format!(
            "expected a {kind:?} discriminator, got {:?}",
            d.kind()
        )));
    }
    if blocks.iter().any(|&b| b != d.block()) {
        return Err(AlignError::Config(format!(
            "block mismatch: inputs from blocks {} and {}, discriminator for block {}",
            blocks[0],
            blocks[1],
            d.block()
        )));
    }
    Ok(())
}

/// Added to the mean square before the joint normalization of a pair.
pub const PAIR_RMS_EPS: f64 = 1e-6;

/// Divides both inputs by their joint root mean square. The relative scale of
/// source and target stays visible to the discriminator, but rescaling both
/// together does not change its input, so the reversed objective cannot grow
/// without bound through the feature magnitude.
pub fn joint_rms_normalize<T: Scalar>(g: &mut Graph<T>, source: Var, target: Var) -> Result<(Var, Var)> {
    let ss = g.square(source);
    let ms = g.mean(ss);
    let ts = g.square(target);
    let mt = g.mean(ts);
    let both = g.add(ms, mt)?;
    let avg = g.affine(both, T::lit(0.5), T::lit(PAIR_RMS_EPS));
    let inv = g.powf(avg, T::lit(-0.5))?;
    Ok((g.mul_scalar(source, inv)?, g.mul_scalar(target, inv)?))
}

fn pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    d: &Discriminator,
    source: Var,
    target: Var,
    modulation: f64,
    reversal: Reversal,
) -> Result<Var> {
    let (source, target) = match reversal {
        Reversal::Reversed => (g.grad_reverse(source), g.grad_reverse(target)),
        Reversal::Plain => (source, target),
    };
    let (source, target) = joint_rms_normalize(g, source, target)?;
    let mut side = |x: Var, domain: Domain| -> Result<Var> {
        let logit = d.forward_logit(g, p, x)?;
        focal_domain_loss_logits(g, logit, domain, modulation)
    };
    let ls = side(source, Domain::Source)?;
    let lt = side(target, Domain::Target)?;
    let both = g.add(ls, lt)?;
    Ok(g.scale(both, T::lit(0.5)))
}

/// `½ [focal(D(g_s), source) + focal(D(g_t), target)]` for one block.
pub fn style_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    source: &GramStyle,
    target: &GramStyle,
    d: &Discriminator,
    gamma: f64,
    reversal: Reversal,
) -> Result<Var> {
    check_disc(d, DiscKind::Style, [source.block, target.block])?;
    pair_loss(g, p, d, source.vector, target.vector, gamma, reversal)
}

/// Focal adversarial loss on attention-weighted maps for one block.
pub fn attention_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    source: &FeatureMap,
    target: &FeatureMap,
    d: &Discriminator,
    epsilon: f64,
    reversal: Reversal,
) -> Result<Var> {
    check_disc(d, DiscKind::Attention, [source.block, target.block])?;
    pair_loss(g, p, d, source.var, target.var, epsilon, reversal)
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: Vec<Var>) -> Result<Option<Var>> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = g.add(acc, t)?;
    }
    Ok(Some(acc))
}

/// One block's inputs to a multi-level loss: the source map, the target map,
/// and the discriminator for that block.
pub struct LevelInput<'a> {
    pub source: FeatureMap,
    pub target: FeatureMap,
    pub discriminator: &'a Discriminator,
}

/// Sum of per-block style losses. Errors when no block is supplied.
pub fn multi_level_style_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    levels: &[LevelInput<'_>],
    gamma: f64,
) -> Result<Var> {
    if levels.is_empty() {
        return Err(AlignError::Config(
            "style alignment enabled with an empty block set".into(),
        ));
    }
    let mut terms = Vec::with_capacity(levels.len());
    for lv in levels {
        let gs = style_forward(g, &lv.source)?;
        let gt = style_forward(g, &lv.target)?;
        terms.push(style_alignment_loss(
            g,
            p,
            &gs,
            &gt,
            lv.discriminator,
            gamma,
            Reversal::Reversed,
        )?);
    }
    Ok(sum_terms(g, terms)?.expect("non-empty"))
}

/// Sum of per-block attention losses; `epsilon(block)` gives the modulation for each block.
/// Returns `None` for an empty block set.
pub fn multi_level_attention_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    levels: &[LevelInput<'_>],
    epsilon: impl Fn(Block) -> f64,
) -> Result<Option<Var>> {
    let mut terms = Vec::with_capacity(levels.len());
    for lv in levels {
        terms.push(attention_alignment_loss(
            g,
            p,
            &lv.source,
            &lv.target,
            lv.discriminator,
            epsilon(lv.source.block),
            Reversal::Reversed,
        )?);
    }
    sum_terms(g, terms)
}
