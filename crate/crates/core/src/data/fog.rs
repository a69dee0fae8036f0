use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Per-image fog severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    /// Fog luminance `L`.
    pub luminance: f64,
    /// Blend weight `α` of the fog layer.
    pub alpha: f64,
    /// Gaussian blur standard deviation in pixels.
    pub sigma: f64,
    /// Contrast factor applied about the per-channel mean.
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FogRanges {
    pub luminance: (f64, f64),
    pub alpha: (f64, f64),
    pub sigma: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for FogRanges {
    fn default() -> Self {
        Self {
            luminance: (0.7, 0.9),
            alpha: (0.4, 0.7),
            sigma: (0.5, 1.5),
            contrast: (0.6, 0.9),
        }
    }
}

impl FogRanges {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> FogParams {
        FogParams {
            luminance: rng.gen_range(self.luminance.0..=self.luminance.1),
            alpha: rng.gen_range(self.alpha.0..=self.alpha.1),
            sigma: rng.gen_range(self.sigma.0..=self.sigma.1),
            contrast: rng.gen_range(self.contrast.0..=self.contrast.1),
        }
    }

    pub fn contains(&self, f: &FogParams) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        within(f.luminance, self.luminance)
            && within(f.alpha, self.alpha)
            && within(f.sigma, self.sigma)
            && within(f.contrast, self.contrast)
    }
}

/// Separable Gaussian blur of every channel of a `[C, H, W]` image, with
/// edge pixels replicated. `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(img: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => panic!("gaussian_blur expects [C, H, W], got {:?}", img.shape()),
    };
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    s += k * src[base + y * w + clampi(x as isize + j as isize - radius, w)];
                }
                tmp[base + y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    s += k * tmp[base + clampi(y as isize + j as isize - radius, h) * w + x];
                }
                out[base + y * w + x] = s;
            }
        }
    }
    Tensor::from_vec(img.shape(), out).expect("shape preserved")
}

/// Blur, blend toward the fog luminance, reduce contrast about each
/// channel's mean, then clip to `[0, 1]`.
pub fn apply_fog(img: &Tensor<f64>, fog: &FogParams) -> Tensor<f64> {
    let mut out = gaussian_blur(img, fog.sigma);
    let plane = out.shape()[1] * out.shape()[2];
    for ch in out.data_mut().chunks_mut(plane) {
        for v in ch.iter_mut() {
            *v = (1.0 - fog.alpha) * *v + fog.alpha * fog.luminance;
        }
        let mean = ch.iter().sum::<f64>() / plane as f64;
        for v in ch.iter_mut() {
            *v = (mean + fog.contrast * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    out
}
