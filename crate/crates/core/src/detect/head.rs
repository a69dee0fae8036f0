use super::boxes::{BoundingBox, Detection};
use super::{DetectError, Result};
use crate::nn::Conv;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Width of the hidden 1x1 convolution.
pub const HEAD_HIDDEN: usize = 64;

/// Per-cell predictions from the final feature map.
///
/// Output channels: `[objectness, class_0 .. class_{K-1}, tx, ty, tw, th]`.
/// With cell size `s = input / grid`, a cell `(gx, gy)` and box centre
/// `(cx, cy)`: `tx = cx / s - gx`, `ty = cy / s - gy`, `tw = ln(w / s)`,
/// `th = ln(h / s)`.
#[derive(Debug, Clone, Copy)]
pub struct DetectionHead {
    pub hidden: Conv,
    pub out: Conv,
    pub num_classes: usize,
    pub grid: usize,
    pub input_size: usize,
}

impl DetectionHead {
    pub const PREFIX: &'static str = "head.";

    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        in_channels: usize,
        num_classes: usize,
        grid: usize,
        input_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 || grid == 0 {
            return Err(DetectError::Eval("head needs at least one class and one cell".into()));
        }
        let hidden = Conv::new(ps, &format!("{}hidden", Self::PREFIX), in_channels, HEAD_HIDDEN, 1, seed)?;
        let out = Conv::new(ps, &format!("{}out", Self::PREFIX), HEAD_HIDDEN, 5 + num_classes, 1, seed)?;
        Ok(Self {
            hidden,
            out,
            num_classes,
            grid,
            input_size,
        })
    }

    pub fn channels(&self) -> usize {
        5 + self.num_classes
    }

    pub fn cell_size(&self) -> f64 {
        self.input_size as f64 / self.grid as f64
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        let out = self.out.forward(g, p, h)?;
        let want = [self.channels(), self.grid, self.grid];
        if g.shape(out) != want {
            return Err(DetectError::InputShape {
                got: g.shape(out).to_vec(),
                expected: want.to_vec(),
            });
        }
        Ok(out)
    }
}

/// Cell index (row-major) and regression targets for a box.
pub fn encode_box(b: &BoundingBox, grid: usize, input_size: usize) -> Result<(usize, [f64; 4])> {
    b.validate()?;
    let s = input_size as f64 / grid as f64;
    let (cx, cy) = b.center();
    let gx = ((cx / s).floor().max(0.0) as usize).min(grid - 1);
    let gy = ((cy / s).floor().max(0.0) as usize).min(grid - 1);
    let t = [
        cx / s - gx as f64,
        cy / s - gy as f64,
        (b.width() / s).ln(),
        (b.height() / s).ln(),
    ];
    Ok((gy * grid + gx, t))
}

/// Inverse of [`encode_box`], clipped to the image. `None` if clipping leaves
/// a degenerate box or the offsets are not finite.
pub fn decode_box(cell: usize, t: [f64; 4], class: usize, grid: usize, input_size: usize) -> Option<BoundingBox> {
    let s = input_size as f64 / grid as f64;
    let (gx, gy) = ((cell % grid) as f64, (cell / grid) as f64);
    let cx = (gx + t[0]) * s;
    let cy = (gy + t[1]) * s;
    let w = t[2].exp() * s;
    let h = t[3].exp() * s;
    let lim = input_size as f64;
    let b = BoundingBox {
        x1: (cx - 0.5 * w).clamp(0.0, lim),
        y1: (cy - 0.5 * h).clamp(0.0, lim),
        x2: (cx + 0.5 * w).clamp(0.0, lim),
        y2: (cy + 0.5 * h).clamp(0.0, lim),
        class,
    };
    b.validate().ok().map(|_| b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub cell: usize,
    pub class: usize,
    pub offsets: [f64; 4],
}

/// Training targets on a `grid x grid` map.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    pub grid: usize,
    pub num_classes: usize,
    /// Objectness target per cell, row-major.
    pub objectness: Vec<f64>,
    /// Positive cells in ascending cell order.
    pub positives: Vec<Positive>,
}

/// Each box goes to the cell containing its centre. When several boxes share
/// a cell the largest area wins; equal areas keep the earlier box.
pub fn assign_targets(
    boxes: &[BoundingBox],
    grid: usize,
    input_size: usize,
    num_classes: usize,
) -> Result<CellTargets> {
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; grid * grid];
    let mut enc = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        if b.class >= num_classes {
            return Err(DetectError::InvalidBox(format!("class {} with {num_classes} classes", b.class)));
        }
        let (cell, t) = encode_box(b, grid, input_size)?;
        enc.push(t);
        let area = b.area();
        if owner[cell].is_none_or(|(_, a)| area > a) {
            owner[cell] = Some((i, area));
        }
    }
    let mut objectness = vec![0.0; grid * grid];
    let mut positives = Vec::new();
    for (cell, o) in owner.iter().enumerate() {
        if let Some((i, _)) = *o {
            objectness[cell] = 1.0;
            positives.push(Positive {
                cell,
                class: boxes[i].class,
                offsets: enc[i],
            });
        }
    }
    Ok(CellTargets {
        grid,
        num_classes,
        objectness,
        positives,
    })
}

/// `mean_cells BCE(obj) + [Σ_pos CE(class) + Σ_pos smoothL1(offsets)] / max(#pos, 1)`.
///
/// Every label-derived constant carries `label_tag`, so callers can prove
/// which annotations a loss depends on.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    head_out: Var,
    targets: &CellTargets,
    label_tag: &'static str,
) -> Result<Var> {
    let (k, n) = (targets.num_classes, targets.grid);
    let want = [5 + k, n, n];
    if g.shape(head_out) != want {
        return Err(DetectError::InputShape {
            got: g.shape(head_out).to_vec(),
            expected: want.to_vec(),
        });
    }
    let obj = g.slice_channels(head_out, 0, 1)?;
    let obj_t = g.constant_tagged(Tensor::from_f64(&[1, n, n], &targets.objectness)?, label_tag);
    let bce = g.bce_with_logits(obj, obj_t)?;
    let obj_loss = g.mean(bce);
    if targets.positives.is_empty() {
        return Ok(obj_loss);
    }

    let cls = g.slice_channels(head_out, 1, k)?;
    let picks: Vec<(usize, usize)> = targets.positives.iter().map(|p| (p.cell, p.class)).collect();
    let ce = g.softmax_xent(cls, &picks)?;
    // the pick list itself is label data; tag it through a zero-valued dependency
    let pick_marker = g.constant_tagged(Tensor::scalar(T::zero()), label_tag);
    let ce = g.add(ce, pick_marker)?;

    let reg = g.slice_channels(head_out, 1 + k, 4)?;
    let cells = n * n;
    let mut mask = vec![0.0; 4 * cells];
    let mut target = vec![0.0; 4 * cells];
    for p in &targets.positives {
        for (j, &t) in p.offsets.iter().enumerate() {
            mask[j * cells + p.cell] = 1.0;
            target[j * cells + p.cell] = t;
        }
    }
    let mask = g.constant_tagged(Tensor::from_f64(&[4, n, n], &mask)?, label_tag);
    let target = g.constant_tagged(Tensor::from_f64(&[4, n, n], &target)?, label_tag);
    let diff = g.sub(reg, target)?;
    let diff = g.mul(diff, mask)?;
    let sl1 = g.smooth_l1(diff);
    let reg_loss = g.sum(sl1);

    let per_pos = g.add(ce, reg_loss)?;
    let per_pos = g.scale(per_pos, T::lit(1.0 / targets.positives.len() as f64));
    Ok(g.add(obj_loss, per_pos)?)
}

/// Every (cell, class) pair as a detection with score `σ(obj) · softmax(class)`.
pub fn decode<T: Scalar>(head_out: &Tensor<T>, head: &DetectionHead) -> Result<Vec<Detection>> {
    let (k, n) = (head.num_classes, head.grid);
    let want = [5 + k, n, n];
    if head_out.shape() != want {
        return Err(DetectError::InputShape {
            got: head_out.shape().to_vec(),
            expected: want.to_vec(),
        });
    }
    let cells = n * n;
    let v = |ch: usize, cell: usize| head_out.data()[ch * cells + cell].as_f64();
    let mut out = Vec::new();
    for cell in 0..cells {
        let obj = 1.0 / (1.0 + (-v(0, cell)).exp());
        let logits: Vec<f64> = (0..k).map(|c| v(1 + c, cell)).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let t = [v(1 + k, cell), v(2 + k, cell), v(3 + k, cell), v(4 + k, cell)];
        for (class, e) in exps.iter().enumerate() {
            let score = obj * e / z;
            if !score.is_finite() {
                continue;
            }
            if let Some(bbox) = decode_box(cell, t, class, n, head.input_size) {
                out.push(Detection { bbox, score });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Init};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, class: usize) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, class).unwrap()
    }

    #[test]
    fn single_box_single_positive() {
        let t = assign_targets(&[bx(4.0, 4.0, 20.0, 20.0, 1)], 2, 64, 3).unwrap();
        assert_eq!(t.objectness, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(t.positives.len(), 1);
        assert_eq!((t.positives[0].cell, t.positives[0].class), (0, 1));
        assert!(assign_targets(&[], 2, 64, 3).unwrap().positives.is_empty());
    }

    #[test]
    fn larger_box_wins_cell() {
        let small = bx(10.0, 10.0, 14.0, 14.0, 0);
        let large = bx(2.0, 2.0, 22.0, 22.0, 2);
        for boxes in [[small, large], [large, small]] {
            let t = assign_targets(&boxes, 2, 64, 3).unwrap();
            assert_eq!(t.positives.len(), 1);
            assert_eq!(t.positives[0].class, 2);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x1 = rng.gen_range(0.0..50.0);
            let y1 = rng.gen_range(0.0..50.0);
            let b = bx(x1, y1, rng.gen_range(x1 + 0.5..64.0), rng.gen_range(y1 + 0.5..64.0), 2);
            let (cell, t) = encode_box(&b, 2, 64).unwrap();
            let d = decode_box(cell, t, 2, 2, 64).unwrap();
            for (u, v) in [(b.x1, d.x1), (b.y1, d.y1), (b.x2, d.x2), (b.y2, d.y2)] {
                assert!((u - v).abs() <= 1e-9, "{b:?} {d:?}");
            }
        }
    }

    #[test]
    fn decode_clips_to_image() {
        let d = decode_box(0, [0.1, 0.1, 3.0, 3.0], 0, 2, 64).unwrap();
        assert!(d.inside(64.0, 64.0));
        assert!(decode_box(0, [-50.0, 0.5, 0.0, 0.0], 0, 2, 64).is_none());
    }

    fn saturated(targets: &CellTargets, big: f64) -> Tensor<f64> {
        let (k, n) = (targets.num_classes, targets.grid);
        let cells = n * n;
        let mut d = vec![0.0; (5 + k) * cells];
        for (v, &o) in d.iter_mut().zip(&targets.objectness) {
            *v = if o > 0.5 { big } else { -big };
        }
        for p in &targets.positives {
            for c in 0..k {
                d[(1 + c) * cells + p.cell] = if c == p.class { big } else { -big };
            }
            for j in 0..4 {
                d[(1 + k + j) * cells + p.cell] = p.offsets[j];
            }
        }
        Tensor::from_f64(&[5 + k, n, n], &d).unwrap()
    }

    #[test]
    fn loss_limits() {
        let targets = assign_targets(&[bx(4.0, 4.0, 20.0, 20.0, 1), bx(40.0, 36.0, 60.0, 62.0, 0)], 2, 64, 3).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(saturated(&targets, 30.0));
        let l = detection_loss(&mut g, x, &targets, "label:source").unwrap();
        assert!(g.value(l).item() < 1e-3);
        assert!(g.value(l).item() >= 0.0);
        assert!(g.depends_on_tag(l, "label:source"));

        let x = g.constant(Tensor::zeros(&[8, 2, 2]).unwrap());
        let l = detection_loss(&mut g, x, &targets, "label:source").unwrap();
        assert!(g.value(l).item() > 1.0);

        // no positives: objectness BCE only
        let empty = assign_targets(&[], 2, 64, 3).unwrap();
        let raw = Tensor::<f64>::construct(&[8, 2, 2], Init::Uniform { seed: 3, lo: -2.0, hi: 2.0 }).unwrap();
        let x = g.constant(raw.clone());
        let l = detection_loss(&mut g, x, &empty, "label:source").unwrap();
        let expect: f64 = raw.data()[..4].iter().map(|&z| (1.0 + z.exp()).ln()).sum::<f64>() / 4.0;
        assert!((g.value(l).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let targets = assign_targets(&[bx(4.0, 4.0, 20.0, 20.0, 1), bx(40.0, 36.0, 60.0, 62.0, 2)], 2, 64, 3).unwrap();
        for seed in 0..10 {
            let x = Tensor::<f64>::construct(&[8, 2, 2], Init::Uniform { seed, lo: -2.0, hi: 2.0 }).unwrap();
            let r = finite_diff_check(|g, v| detection_loss(g, v, &targets, "label:source"), &x, 1e-6, 1e-4).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn decode_scores_and_boxes() {
        let mut ps = ParamStore::<f64>::new();
        let head = DetectionHead::new(&mut ps, 4, 3, 2, 64, 0).unwrap();
        let targets = assign_targets(&[bx(4.0, 4.0, 20.0, 20.0, 1)], 2, 64, 3).unwrap();
        let dets = decode(&saturated(&targets, 30.0), &head).unwrap();
        assert_eq!(dets.len(), 12);
        let best = dets.iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
        assert_eq!(best.bbox.class, 1);
        assert!(best.score > 0.999);
        assert!((best.bbox.x1 - 4.0).abs() < 1e-9 && (best.bbox.y2 - 20.0).abs() < 1e-9);
        assert!(dets.iter().all(|d| (0.0..=1.0).contains(&d.score)));
    }
}
