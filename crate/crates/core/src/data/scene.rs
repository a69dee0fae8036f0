use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result, IMAGE_SIZE, PLACEMENT_ATTEMPTS};
use crate::detect::BoundingBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Square, Shape::Triangle];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the point `(x, y)` lies in the shape centred at `(cx, cy)` with half-extent `r`.
    /// Triangles point up: apex `(cx, cy - r)`, base from `(cx - r, cy + r)` to `(cx + r, cy + r)`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => dy <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub cx: i32,
    pub cy: i32,
    /// Half-extent in pixels: disk radius, half side, triangle half base.
    pub scale: i32,
    pub color: [f64; 3],
}

/// Scene sampling ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub objects: (usize, usize),
    pub scale: (i32, i32),
    pub min_center_distance: f64,
    /// Coarse noise lattice size of the background.
    pub background_cells: usize,
    pub background_level: (f64, f64),
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            objects: (1, 4),
            scale: (6, 16),
            min_center_distance: 8.0,
            background_cells: 5,
            background_level: (0.3, 0.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub objects: Vec<ObjectSpec>,
    /// `[3, n, n]` lattice values bilinearly upsampled to form the background.
    pub background: Vec<f64>,
    pub background_cells: usize,
}

/// Draws a scene from `seed`. Object centres are integers, objects lie fully
/// inside the image and centres are at least `min_center_distance` apart.
pub fn sample_scene(seed: u64, ranges: &SceneRanges) -> Result<SceneSpec> {
    let size = IMAGE_SIZE as i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ranges.background_cells;
    let (lo, hi) = ranges.background_level;
    let background: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(lo..=hi)).collect();
    let count = rng.gen_range(ranges.objects.0..=ranges.objects.1);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for object in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            let scale = rng.gen_range(ranges.scale.0..=ranges.scale.1);
            let cx = rng.gen_range(scale..=size - scale);
            let cy = rng.gen_range(scale..=size - scale);
            let far = objects.iter().all(|o| {
                let (dx, dy) = ((o.cx - cx) as f64, (o.cy - cy) as f64);
                (dx * dx + dy * dy).sqrt() >= ranges.min_center_distance
            });
            if far {
                // saturated channels keep shapes visible on the mid-grey background
                let color = [0; 3].map(|_: i32| {
                    let v: f64 = rng.gen_range(0.0..0.2);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        1.0 - v
                    }
                });
                placed = Some(ObjectSpec {
                    shape,
                    cx,
                    cy,
                    scale,
                    color,
                });
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(DataError::Placement {
                    seed,
                    object,
                    attempts: PLACEMENT_ATTEMPTS,
                })
            }
        }
    }
    Ok(SceneSpec {
        seed,
        size: IMAGE_SIZE,
        objects,
        background,
        background_cells: n,
    })
}

/// Pixels covered by `o`, sampled at pixel centres, row-major over `size x size`.
pub fn shape_mask(o: &ObjectSpec, size: usize) -> Vec<bool> {
    let (cx, cy, r) = (o.cx as f64, o.cy as f64, o.scale as f64);
    let mut mask = vec![false; size * size];
    for py in 0..size {
        for px in 0..size {
            mask[py * size + px] = o.shape.contains(px as f64 + 0.5, py as f64 + 0.5, cx, cy, r);
        }
    }
    mask
}

fn tight_box(mask: &[bool], size: usize, class: usize) -> Option<BoundingBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (px, py) = (i % size, i / size);
        x1 = x1.min(px);
        y1 = y1.min(py);
        x2 = x2.max(px + 1);
        y2 = y2.max(py + 1);
    }
    (x1 != usize::MAX).then_some(BoundingBox {
        x1: x1 as f64,
        y1: y1 as f64,
        x2: x2 as f64,
        y2: y2 as f64,
        class,
    })
}

fn background(spec: &SceneSpec) -> Vec<f64> {
    let (s, n) = (spec.size, spec.background_cells);
    let mut out = vec![0.0; 3 * s * s];
    let step = (n - 1) as f64 / (s - 1) as f64;
    for c in 0..3 {
        let lat = &spec.background[c * n * n..(c + 1) * n * n];
        for py in 0..s {
            let fy = py as f64 * step;
            let y0 = (fy.floor() as usize).min(n - 2);
            let ty = fy - y0 as f64;
            for px in 0..s {
                let fx = px as f64 * step;
                let x0 = (fx.floor() as usize).min(n - 2);
                let tx = fx - x0 as f64;
                let v = |y: usize, x: usize| lat[y * n + x];
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
                let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
                out[c * s * s + py * s + px] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Rasterises the scene into a `[3, size, size]` image in `[0, 1]` and
/// returns the tight pixel box of every object. Later objects paint over
/// earlier ones; boxes always describe the full shape.
pub fn render_image(spec: &SceneSpec) -> Result<(Tensor<f64>, Vec<BoundingBox>)> {
    if spec.background_cells < 2 || spec.background.len() != 3 * spec.background_cells.pow(2) {
        return Err(DataError::Config("background lattice must be at least 2x2 per channel".into()));
    }
    let s = spec.size;
    let mut img = background(spec);
    let mut boxes = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let mask = shape_mask(o, s);
        let b = tight_box(&mask, s, o.shape.class())
            .ok_or_else(|| DataError::Config(format!("object {o:?} covers no pixel")))?;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for c in 0..3 {
                img[c * s * s + i] = o.color[c];
            }
        }
        boxes.push(b);
    }
    let t = Tensor::from_f64(&[3, s, s], &img).map_err(|e| DataError::Config(e.to_string()))?;
    Ok((t, boxes))
}
