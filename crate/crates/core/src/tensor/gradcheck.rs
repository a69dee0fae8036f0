//! Central finite-difference oracle for autodiff gradients.

use super::{Graph, Tensor, TensorError, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-7)`. The floor keeps coordinates whose true
/// derivative vanishes from dominating through rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn evaluate<F, E>(f: &F, x: &Tensor<f64>) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let root = f(&mut g, v)?;
    Ok(g.value(root).item())
}

/// Compares the autodiff gradient of `f` at `x` against `(f(x+h e_i) - f(x-h e_i)) / 2h`
/// for every coordinate.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, &coords, h, tol)
}

/// Same as [`finite_diff_check`] restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F, E>(
    f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let root = f(&mut g, v)?;
    g.backward(root)?;
    let full: Vec<f64> = match g.grad_data(v) {
        Some(d) => d.to_vec(),
        None => vec![0.0; x.len()],
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let n = (up - down) / (2.0 * h);
        let a = full[i];
        let err = relative_error(a, n);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
        tol,
    })
}
