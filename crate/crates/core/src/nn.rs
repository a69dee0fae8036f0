//! Layer building blocks over [`ParamStore`] parameters.

use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Result, Var};

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Square `k x k` convolution with "same" padding for stride 1.
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let weight = ps.add_he(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k, seed)?;
        let bias = ps.add_const(&format!("{name}.b"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Row-vector affine layer: `[1, in] -> [1, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let weight = ps.add_he(&format!("{name}.w"), &[d_in, d_out], d_in, seed)?;
        let bias = ps.add_const(&format!("{name}.b"), &[1, d_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}
