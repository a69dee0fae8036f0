use serde::{Deserialize, Serialize};

use super::{AlignError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

fn check_modulation(m: f64) -> Result<()> {
    if m >= 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(AlignError::Config(format!(
            "focal modulation must be finite and non-negative, got {m}"
        )))
    }
}

/// Focal binary loss for a discriminator output `p` = P(source).
///
/// Source: `(1-p)^m · -ln p`. Target: `p^m · -ln(1-p)`.
pub fn focal_domain_loss(p: f64, domain: Domain, modulation: f64) -> Result<f64> {
    check_modulation(modulation)?;
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(match domain {
        Domain::Source => (1.0 - p).powf(modulation) * -p.ln(),
        Domain::Target => p.powf(modulation) * -(1.0 - p).ln(),
    })
}

/// Graph version of [`focal_domain_loss`] for a probability node (any shape; summed).
pub fn focal_domain_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    domain: Domain,
    modulation: f64,
) -> Result<Var> {
    check_modulation(modulation)?;
    let eps = T::lit(PROB_CLAMP);
    let pc = g.clamp(p, eps, T::one() - eps);
    let q = g.affine(pc, -T::one(), T::one());
    let (weight_base, log_arg) = match domain {
        Domain::Source => (q, pc),
        Domain::Target => (pc, q),
    };
    let w = g.powf(weight_base, T::lit(modulation))?;
    let l = g.log(log_arg)?;
    let nl = g.neg(l);
    let prod = g.mul(w, nl)?;
    Ok(g.sum(prod))
}

/// [`focal_domain_loss_var`] evaluated from logits `z` with `p = σ(z)`.
///
/// The log term is computed as a softplus, so the gradient with respect to
/// `z` never vanishes when the discriminator is confidently wrong.
pub fn focal_domain_loss_logits<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    domain: Domain,
    modulation: f64,
) -> Result<Var> {
    check_modulation(modulation)?;
    let label = match domain {
        Domain::Source => T::one(),
        Domain::Target => T::zero(),
    };
    let shape = g.shape(z).to_vec();
    let n = shape.iter().product();
    let t = g.constant(crate::tensor::Tensor::from_vec(&shape, vec![label; n])?);
    let nll = g.bce_with_logits(z, t)?;
    if modulation == 0.0 {
        return Ok(g.sum(nll));
    }
    // source weight (1-p) = σ(-z); target weight p = σ(z)
    let base = match domain {
        Domain::Source => {
            let nz = g.neg(z);
            g.sigmoid(nz)
        }
        Domain::Target => g.sigmoid(z),
    };
    let w = g.powf(base, T::lit(modulation))?;
    let prod = g.mul(w, nll)?;
    Ok(g.sum(prod))
}
