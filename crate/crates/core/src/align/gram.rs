use super::{Block, FeatureMap, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Normalized channel Gram matrix of one block output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GramStyle {
    /// `[C, C]` matrix `f fᵀ / M`.
    pub matrix: Var,
    /// Row-major flattening of `matrix` as a `[1, C²]` row vector.
    pub vector: Var,
    pub block: Block,
    pub channels: usize,
    /// Number of spatial positions `M = H W`.
    pub divisor: usize,
}

/// Gram matrix of a `[C, M]` feature matrix, divided by `M`.
pub fn gram<T: Scalar>(g: &mut Graph<T>, f: Var, block: Block) -> Result<GramStyle> {
    let shape = g.shape(f).to_vec();
    let (c, m) = match shape[..] {
        [c, m] => (c, m),
        _ => {
            return Err(super::AlignError::Config(format!(
                "gram expects a [C, M] matrix, got {shape:?}"
            )))
        }
    };
    let matrix = g.gram(f, T::lit(m as f64))?;
    let vector = g.reshape(matrix, &[1, c * c])?;
    Ok(GramStyle {
        matrix,
        vector,
        block,
        channels: c,
        divisor: m,
    })
}

/// Reshapes `Z: [C, H, W]` to `[C, H W]` and takes its Gram style.
pub fn style_forward<T: Scalar>(g: &mut Graph<T>, z: &FeatureMap) -> Result<GramStyle> {
    let f = g.reshape(z.var, &[z.channels, z.spatial()])?;
    gram(g, f, z.block)
}
