use super::{HarnessError, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

/// Momentum SGD with coupled weight decay:
/// `v ← m·v + g + wd·w`, `w ← w − lr·v`.
///
/// When `clip_norm > 0` the gradients of one step are rescaled so that their
/// joint L2 norm is at most `clip_norm` before the update.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: Vec<Option<Vec<T>>>,
    steps: u64,
}

/// One update of a single parameter tensor.
pub fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = m * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            clip_norm: 0.0,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Velocity buffer of a parameter, if it has been updated at least once.
    pub fn velocity(&self, index: usize) -> Option<&[T]> {
        self.velocity.get(index).and_then(|v| v.as_deref())
    }

    /// Updates every parameter bound in `bound` using `grads` from
    /// [`ParamStore::unbind`]. Unbound parameters are left untouched.
    pub fn with_clip_norm(mut self, clip_norm: f64) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn step(&mut self, ps: &mut ParamStore<T>, bound: &Bound, mut grads: Vec<Option<Vec<T>>>) -> Result<()> {
        if self.velocity.len() < ps.len() {
            self.velocity.resize(ps.len(), None);
        }
        if self.clip_norm > 0.0 {
            let sq: f64 = bound
                .bound_ids()
                .filter_map(|id| grads.get(id.index()).and_then(|g| g.as_ref()))
                .flat_map(|g| g.iter())
                .map(|&v| v.as_f64() * v.as_f64())
                .sum();
            let norm = sq.sqrt();
            if norm > self.clip_norm {
                let s = T::lit(self.clip_norm / norm);
                for g in grads.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        for id in bound.bound_ids() {
            let i = id.index();
            let g = grads[i].as_ref().ok_or_else(|| {
                HarnessError::Consistency(format!("trainable parameter {} received no gradient", ps.name(id)))
            })?;
            if g.len() != ps.get(id).len() {
                return Err(HarnessError::Consistency(format!(
                    "gradient of {} has {} entries for {} weights",
                    ps.name(id),
                    g.len(),
                    ps.get(id).len()
                )));
            }
            let w = ps.get_mut(id).data_mut();
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
            sgd_update(w, g, v, self.lr, self.momentum, self.weight_decay);
        }
        self.steps += 1;
        Ok(())
    }
}
