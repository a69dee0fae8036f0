use super::{AlignError, Block, FeatureMap, Result};
use crate::nn::Conv;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Kernel size of the attention convolution.
pub const ATTENTION_KERNEL: usize = 7;

/// Spatial attention network: `[mean_c Z; max_c Z]` → 7x7 conv (2 → 1) → sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNet {
    pub block: Block,
    pub conv: Conv,
}

impl AttentionNet {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, block: Block, seed: u64) -> Result<Self> {
        let conv = Conv::new(ps, &format!("att{block}.conv"), 2, 1, ATTENTION_KERNEL, seed)?;
        Ok(Self { block, conv })
    }

    /// Parameter name prefix; useful for binding selections.
    pub fn prefix(block: Block) -> String {
        format!("att{block}.")
    }
}

/// Single-channel map `φ ∈ (0,1)^{1×H×W}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMap {
    pub var: Var,
    pub block: Block,
    pub height: usize,
    pub width: usize,
}

pub fn attention_map<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    z: &FeatureMap,
    net: &AttentionNet,
) -> Result<AttentionMap> {
    if net.block != z.block {
        return Err(AlignError::Config(format!(
            "attention net for block {} applied to block {}",
            net.block, z.block
        )));
    }
    let desc = g.channel_mean_max(z.var)?;
    let logits = net.conv.forward(g, p, desc)?;
    let var = g.sigmoid(logits);
    Ok(AttentionMap {
        var,
        block: z.block,
        height: z.height,
        width: z.width,
    })
}

/// `Z_φ[c, h, w] = φ[0, h, w] · Z[c, h, w]`.
pub fn attention_apply<T: Scalar>(g: &mut Graph<T>, phi: &AttentionMap, z: &FeatureMap) -> Result<FeatureMap> {
    if (phi.height, phi.width) != (z.height, z.width) {
        return Err(AlignError::Tensor(crate::tensor::TensorError::ShapeMismatch {
            op: "attention_apply",
            lhs: vec![z.channels, z.height, z.width],
            rhs: vec![1, phi.height, phi.width],
        }));
    }
    let var = g.mul(z.var, phi.var)?;
    Ok(FeatureMap { var, ..*z })
}
