//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use dualalign::align::{
    attention_alignment_loss, attention_apply, attention_map, focal_domain_loss, focal_domain_loss_logits,
    focal_domain_loss_var, joint_rms_normalize, multi_level_attention_loss, multi_level_style_loss,
    style_alignment_loss, style_forward, AlignError, AttentionNet, Block, BlockSet, DiscKind, Discriminator,
    DiscriminatorWidths, Domain, FeatureMap, LevelInput, Reversal,
};
use dualalign::data::{generate_dataset, load_dataset, Dataset, GenerateOptions};
use dualalign::detect::{
    assign_targets, average_precision, detection_loss, iou, nms, BackboneSpec, BoundingBox, DetectError, Detection,
    Detector, Tagged,
};
use dualalign::harness::{
    ablate, sweep, total_loss, train_model, HarnessError, Model, OrderingCheck, SweepParam, TrainConfig,
};
use dualalign::params::Bound;
use dualalign::tensor::{finite_diff_check_at, relative_error, GradCheckReport, Tensor, TensorError, Var};
use dualalign::{Graph64, ParamStore64, Tensor64};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "gram properties", gram_properties),
        (3, "focal reduction", focal_reduction),
        (4, "reversal contract", reversal_contract),
        (5, "AP and NMS oracles", ap_nms_oracles),
        (6, "ordering experiment", ordering_experiment),
        (7, "degenerate-weight identity", degenerate_weights),
        (8, "determinism", determinism),
        (9, "sensitivity smoke test", sensitivity_smoke),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} ({name}): {verdict} [{:.1}s] {}",
            start.elapsed().as_secs_f64(),
            out.detail
        );
        if !out.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// shared helpers

#[derive(Debug)]
struct E(String);

impl From<TensorError> for E {
    fn from(e: TensorError) -> Self {
        E(e.to_string())
    }
}
impl From<AlignError> for E {
    fn from(e: AlignError) -> Self {
        E(e.to_string())
    }
}
impl From<DetectError> for E {
    fn from(e: DetectError) -> Self {
        E(e.to_string())
    }
}
impl From<HarnessError> for E {
    fn from(e: HarnessError) -> Self {
        E(e.to_string())
    }
}

type R<T> = Result<T, E>;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 10;
/// Coordinates probed per point for large inputs.
const MAX_COORDS: usize = 40;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values that stay at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor64 {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Pairwise distinct values (spacing >= 0.05) in random order, so max
/// selections are stable under perturbation.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 0.1 * i as f64 + rng.gen_range(0.0..0.05)).collect();
    data.shuffle(rng);
    Tensor::from_vec(shape, data).unwrap()
}

/// `Σ w ⊙ y` with fixed random weights, reducing any output to a scalar.
fn wsum(g: &mut Graph64, y: Var, seed: u64) -> R<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len > MAX_COORDS {
        all.shuffle(rng);
        all.truncate(MAX_COORDS);
        all.sort_unstable();
    }
    all
}

/// Worst relative error between `sign ·` autodiff and central differences.
fn max_error(r: &GradCheckReport, sign: f64) -> f64 {
    r.analytic
        .iter()
        .zip(&r.numeric)
        .map(|(&a, &n)| relative_error(sign * a, n))
        .fold(0.0, f64::max)
}

struct GradSuite {
    worst: Vec<(String, f64)>,
    errors: Vec<String>,
}

impl GradSuite {
    fn new() -> Self {
        Self {
            worst: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// Checks `f` at `POINTS` random points drawn by `sample`. `sign = -1`
    /// for functions whose gradient is reversed by construction.
    fn check<S, F>(&mut self, name: &str, sign: f64, sample: S, f: F)
    where
        S: Fn(&mut ChaCha8Rng) -> Tensor64,
        F: Fn(&mut Graph64, Var, u64) -> R<Var>,
    {
        let mut worst: f64 = 0.0;
        for point in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0000 + point);
            let x = sample(&mut rng);
            let cs = coords(&mut rng, x.len());
            match finite_diff_check_at(|g: &mut Graph64, v| f(g, v, point), &x, &cs, H, TOL) {
                Ok(r) => worst = worst.max(max_error(&r, sign)),
                Err(E(msg)) => self.errors.push(format!("{name}: {msg}")),
            }
        }
        self.worst.push((name.to_string(), worst));
    }
}

fn block(i: u8) -> Block {
    Block::new(i).unwrap()
}

fn small_widths() -> DiscriminatorWidths {
    DiscriminatorWidths {
        style_hidden: [6, 5],
        attention_conv: 4,
        attention_hidden: 3,
    }
}

fn fmap(g: &Graph64, v: Var, b: Block) -> R<FeatureMap> {
    Ok(FeatureMap::new(g, v, b)?)
}

// ---------------------------------------------------------------------------
// criterion 1

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut s = GradSuite::new();
    let any = |lo: f64, hi: f64, shape: &'static [usize]| move |r: &mut ChaCha8Rng| uniform(r, shape, lo, hi);
    const S34: &[usize] = &[3, 4];
    const S322: &[usize] = &[3, 2, 2];
    const S122: &[usize] = &[1, 2, 2];

    s.check("relu", 1.0, |r| away_from(r, S34, -2.0, 2.0, &[0.0], 0.05), |g, x, k| {
        let y = g.relu(x);
        wsum(g, y, k)
    });
    s.check("sigmoid", 1.0, any(-4.0, 4.0, S34), |g, x, k| {
        let y = g.sigmoid(x);
        wsum(g, y, k)
    });
    s.check("neg", 1.0, any(-2.0, 2.0, S34), |g, x, k| {
        let y = g.neg(x);
        wsum(g, y, k)
    });
    s.check("log", 1.0, any(0.2, 3.0, S34), |g, x, k| {
        let y = g.log(x)?;
        wsum(g, y, k)
    });
    s.check("square", 1.0, any(-2.0, 2.0, S34), |g, x, k| {
        let y = g.square(x);
        wsum(g, y, k)
    });
    s.check("exp", 1.0, any(-2.0, 2.0, S34), |g, x, k| {
        let y = g.unary(dualalign::tensor::Unary::Exp, x)?;
        wsum(g, y, k)
    });
    s.check("smooth_l1", 1.0, |r| away_from(r, S34, -3.0, 3.0, &[-1.0, 1.0], 0.05), |g, x, k| {
        let y = g.smooth_l1(x);
        wsum(g, y, k)
    });
    s.check("powf", 1.0, any(0.3, 2.0, S34), |g, x, k| {
        let y = g.powf(x, 2.7)?;
        wsum(g, y, k)
    });
    s.check("affine", 1.0, any(-2.0, 2.0, S34), |g, x, k| {
        let y = g.affine(x, 1.7, -0.3);
        wsum(g, y, k)
    });
    s.check("scale", 1.0, any(-2.0, 2.0, S34), |g, x, k| {
        let y = g.scale(x, -2.5);
        wsum(g, y, k)
    });
    s.check("clamp", 1.0, |r| away_from(r, S34, -1.5, 1.5, &[-0.5, 0.5], 0.05), |g, x, k| {
        let y = g.clamp(x, -0.5, 0.5);
        wsum(g, y, k)
    });
    for (name, rhs) in [("add", false), ("add rhs", true)] {
        s.check(name, 1.0, any(-2.0, 2.0, S322), move |g, x, k| {
            let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
            let y = if rhs { g.add(c, x)? } else { g.add(x, c)? };
            wsum(g, y, k)
        });
    }
    for (name, rhs) in [("sub", false), ("sub rhs", true)] {
        s.check(name, 1.0, any(-2.0, 2.0, S322), move |g, x, k| {
            let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
            let y = if rhs { g.sub(c, x)? } else { g.sub(x, c)? };
            wsum(g, y, k)
        });
    }
    for (name, rhs) in [("mul", false), ("mul rhs", true)] {
        s.check(name, 1.0, any(-2.0, 2.0, S322), move |g, x, k| {
            let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
            let y = if rhs { g.mul(c, x)? } else { g.mul(x, c)? };
            wsum(g, y, k)
        });
    }
    s.check("add broadcast plane", 1.0, any(-2.0, 2.0, S122), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
        let y = g.add(c, x)?;
        wsum(g, y, k)
    });
    s.check("sub broadcast plane", 1.0, any(-2.0, 2.0, S122), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
        let y = g.sub(c, x)?;
        wsum(g, y, k)
    });
    s.check("mul broadcast plane", 1.0, any(-2.0, 2.0, S122), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
        let y = g.mul(c, x)?;
        wsum(g, y, k)
    });
    s.check("mul broadcast channels", 1.0, any(-2.0, 2.0, S322), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S122, -1.0, 1.0));
        let y = g.mul(x, c)?;
        wsum(g, y, k)
    });
    s.check("mul_scalar", 1.0, any(-2.0, 2.0, S322), |g, x, k| {
        let c = g.constant(Tensor::scalar(0.5 + k as f64 * 0.1));
        let y = g.mul_scalar(x, c)?;
        wsum(g, y, k)
    });
    s.check("mul_scalar factor", 1.0, any(-2.0, 2.0, &[1]), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
        let y = g.mul_scalar(c, x)?;
        wsum(g, y, k)
    });
    s.check("matmul lhs", 1.0, any(-1.0, 1.0, &[2, 3]), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), &[3, 4], -1.0, 1.0));
        let y = g.matmul(x, c)?;
        wsum(g, y, k)
    });
    s.check("matmul rhs", 1.0, any(-1.0, 1.0, &[2, 3]), |g, x, k| {
        let c = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), &[4, 2], -1.0, 1.0));
        let y = g.matmul(c, x)?;
        wsum(g, y, k)
    });
    s.check("reshape", 1.0, any(-1.0, 1.0, S322), |g, x, k| {
        let y = g.reshape(x, &[4, 3])?;
        wsum(g, y, k)
    });
    s.check("gram", 1.0, any(-1.0, 1.0, &[3, 6]), |g, x, k| {
        let y = g.gram(x, 6.0)?;
        wsum(g, y, k)
    });
    for (name, kk, stride, pad) in [("conv2d 3x3", 3, 1, 1), ("conv2d stride 2", 3, 2, 1), ("conv2d 1x1", 1, 1, 0), ("conv2d 7x7", 7, 1, 3)] {
        s.check(&format!("{name} input"), 1.0, any(-1.0, 1.0, &[2, 5, 5]), move |g, x, k| {
            let mut r = ChaCha8Rng::seed_from_u64(k);
            let w = g.constant(uniform(&mut r, &[3, 2, kk, kk], -1.0, 1.0));
            let b = g.constant(uniform(&mut r, &[3], -1.0, 1.0));
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            wsum(g, y, k)
        });
        s.check(&format!("{name} weight"), 1.0, move |r: &mut ChaCha8Rng| uniform(r, &[3, 2, kk, kk], -1.0, 1.0), move |g, w, k| {
            let mut r = ChaCha8Rng::seed_from_u64(k);
            let x = g.constant(uniform(&mut r, &[2, 5, 5], -1.0, 1.0));
            let b = g.constant(uniform(&mut r, &[3], -1.0, 1.0));
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            wsum(g, y, k)
        });
    }
    s.check("conv2d bias", 1.0, any(-1.0, 1.0, &[3]), |g, b, k| {
        let mut r = ChaCha8Rng::seed_from_u64(k);
        let x = g.constant(uniform(&mut r, &[2, 5, 5], -1.0, 1.0));
        let w = g.constant(uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0));
        let y = g.conv2d(x, w, Some(b), 1, 1)?;
        wsum(g, y, k)
    });
    s.check("max_pool2d", 1.0, |r| distinct(r, &[2, 4, 4]), |g, x, k| {
        let y = g.max_pool2d(x, 2, 2)?;
        wsum(g, y, k)
    });
    s.check("channel_mean_max", 1.0, |r| distinct(r, &[3, 3, 3]), |g, x, k| {
        let y = g.channel_mean_max(x)?;
        wsum(g, y, k)
    });
    s.check("global_avg_pool", 1.0, any(-1.0, 1.0, S322), |g, x, k| {
        let y = g.global_avg_pool(x)?;
        wsum(g, y, k)
    });
    s.check("slice_channels", 1.0, any(-1.0, 1.0, &[4, 2, 2]), |g, x, k| {
        let y = g.slice_channels(x, 1, 2)?;
        wsum(g, y, k)
    });
    s.check("sum", 1.0, any(-1.0, 1.0, S34), |g, x, _| {
        let y = g.square(x);
        Ok(g.sum(y))
    });
    s.check("mean", 1.0, any(-1.0, 1.0, S34), |g, x, _| {
        let y = g.square(x);
        Ok(g.mean(y))
    });
    s.check("grad_reverse", -1.0, any(-1.0, 1.0, S34), |g, x, k| {
        let y = g.grad_reverse(x);
        let y = g.square(y);
        wsum(g, y, k)
    });
    s.check("bce_with_logits logits", 1.0, any(-4.0, 4.0, S34), |g, x, k| {
        let t = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S34, 0.0, 1.0));
        let y = g.bce_with_logits(x, t)?;
        wsum(g, y, k)
    });
    s.check("bce_with_logits targets", 1.0, any(0.0, 1.0, S34), |g, t, k| {
        let x = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S34, -4.0, 4.0));
        let y = g.bce_with_logits(x, t)?;
        wsum(g, y, k)
    });
    s.check("softmax_xent", 1.0, any(-3.0, 3.0, S322), |g, x, k| {
        let picks = [(0, (k % 3) as usize), (3, ((k + 1) % 3) as usize), (1, 0)];
        Ok(g.softmax_xent(x, &picks)?)
    });

    // composite losses
    for &(domain, m) in &[(Domain::Source, 0.0), (Domain::Source, 5.0), (Domain::Target, 2.0), (Domain::Target, 5.0)] {
        s.check(&format!("focal {domain} m={m} (probability)"), 1.0, any(-3.0, 3.0, &[1, 1]), move |g, x, _| {
            let p = g.sigmoid(x);
            Ok(focal_domain_loss_var(g, p, domain, m)?)
        });
        s.check(&format!("focal {domain} m={m} (logit)"), 1.0, any(-6.0, 6.0, &[1, 1]), move |g, x, _| {
            Ok(focal_domain_loss_logits(g, x, domain, m)?)
        });
    }
    s.check("joint rms normalization", 1.0, any(-1.0, 1.0, S322), |g, x, k| {
        let t = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k), S322, -1.0, 1.0));
        let (a, b) = joint_rms_normalize(g, x, t)?;
        let sa = wsum(g, a, k)?;
        let sb = wsum(g, b, k + 100)?;
        Ok(g.add(sa, sb)?)
    });

    let mut ps = ParamStore64::new();
    let w = small_widths();
    let b3 = block(3);
    let b4 = block(4);
    let d_style3 = Discriminator::new(&mut ps, DiscKind::Style, b3, 3, &w, 7).unwrap();
    let d_style4 = Discriminator::new(&mut ps, DiscKind::Style, b4, 4, &w, 7).unwrap();
    let d_att4 = Discriminator::new(&mut ps, DiscKind::Attention, b4, 3, &w, 7).unwrap();
    let d_att5 = Discriminator::new(&mut ps, DiscKind::Attention, block(5), 4, &w, 7).unwrap();
    let att4 = AttentionNet::new(&mut ps, b4, 7).unwrap();
    let ps = &ps;
    let target_map = |g: &mut Graph64, shape: &[usize], k: u64, b: Block| -> R<FeatureMap> {
        let v = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k ^ 0x7a), shape, -1.0, 1.0));
        fmap(g, v, b)
    };

    s.check("style alignment loss", 1.0, any(-1.0, 1.0, &[3, 3, 3]), |g, x, k| {
        let p = ps.bind_copy(g, |_| true);
        let zs = fmap(g, x, b3)?;
        let zt = target_map(g, &[3, 3, 3], k, b3)?;
        let gs = style_forward(g, &zs)?;
        let gt = style_forward(g, &zt)?;
        Ok(style_alignment_loss(g, &p, &gs, &gt, &d_style3, 5.0, Reversal::Plain)?)
    });
    s.check("multi-level style loss (reversed)", -1.0, any(-1.0, 1.0, &[3, 3, 3]), |g, x, k| {
        let p = ps.bind_copy(g, |_| true);
        let zs3 = fmap(g, x, b3)?;
        let zt3 = target_map(g, &[3, 3, 3], k, b3)?;
        let zs4 = target_map(g, &[4, 2, 2], k + 1, b4)?;
        let zt4 = target_map(g, &[4, 2, 2], k + 2, b4)?;
        let levels = [
            LevelInput {
                source: zs3,
                target: zt3,
                discriminator: &d_style3,
            },
            LevelInput {
                source: zs4,
                target: zt4,
                discriminator: &d_style4,
            },
        ];
        Ok(multi_level_style_loss(g, &p, &levels, 5.0)?)
    });
    s.check("attention map and product", 1.0, |r| distinct(r, &[3, 3, 3]), |g, x, k| {
        let p = ps.bind_copy(g, |_| true);
        let z = fmap(g, x, b4)?;
        let phi = attention_map(g, &p, &z, &att4)?;
        let zp = attention_apply(g, &phi, &z)?;
        wsum(g, zp.var, k)
    });
    s.check("attention alignment loss", 1.0, |r| distinct(r, &[3, 3, 3]), |g, x, k| {
        let p = ps.bind_copy(g, |_| true);
        let z = fmap(g, x, b4)?;
        let phi = attention_map(g, &p, &z, &att4)?;
        let zs = attention_apply(g, &phi, &z)?;
        let zt = target_map(g, &[3, 3, 3], k, b4)?;
        Ok(attention_alignment_loss(g, &p, &zs, &zt, &d_att4, 4.0, Reversal::Plain)?)
    });
    s.check("multi-level attention loss (reversed)", -1.0, any(-1.0, 1.0, &[3, 3, 3]), |g, x, k| {
        let p = ps.bind_copy(g, |_| true);
        let zs4 = fmap(g, x, b4)?;
        let zt4 = target_map(g, &[3, 3, 3], k, b4)?;
        let zs5 = target_map(g, &[4, 2, 2], k + 1, block(5))?;
        let zt5 = target_map(g, &[4, 2, 2], k + 2, block(5))?;
        let levels = [
            LevelInput {
                source: zs4,
                target: zt4,
                discriminator: &d_att4,
            },
            LevelInput {
                source: zs5,
                target: zt5,
                discriminator: &d_att5,
            },
        ];
        let eps = |b: Block| if b.index() == 4 { 4.0 } else { 5.0 };
        Ok(multi_level_attention_loss(g, &p, &levels, eps)?.expect("two levels"))
    });
    s.check("detection loss", 1.0, |r| away_from(r, &[8, 2, 2], -2.0, 2.0, &[], 0.0), |g, x, k| {
        let boxes = random_boxes(&mut ChaCha8Rng::seed_from_u64(k), 1 + (k % 3) as usize);
        let t = assign_targets(&boxes, 2, 64, 3)?;
        // smooth L1 kinks sit at |reg - target| = 1; the sampled head output keeps clear of them
        Ok(detection_loss(g, x, &t, "label")?)
    });
    check_total_loss(&mut s);

    let secs = start.elapsed().as_secs_f64();
    let failures: Vec<String> = s
        .worst
        .iter()
        .filter(|(_, e)| e.is_nan() || *e > TOL)
        .map(|(n, e)| format!("{n} ({e:.2e})"))
        .chain(s.errors.iter().cloned())
        .collect();
    let worst = s.worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = failures.is_empty() && secs < 120.0;
    let mut detail = format!(
        "{} functions x {POINTS} points, worst relative error {worst:.2e} (limit {TOL:e}), {secs:.1}s (limit 120s)",
        s.worst.len()
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failing: {}", failures.join(", ")));
    }
    Outcome::new(pass, detail)
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let (w, h) = (rng.gen_range(6.0..20.0), rng.gen_range(6.0..20.0));
            let (x, y) = (rng.gen_range(0.0..64.0 - w), rng.gen_range(0.0..64.0 - h));
            BoundingBox::new(x, y, x + w, y + h, rng.gen_range(0..3)).unwrap()
        })
        .collect()
}

/// `L_det + λ L_style + μ L_att` through a small full detector, with the
/// alignment terms in their non-reversed form so the whole objective is an
/// ordinary function of the source image.
fn check_total_loss(s: &mut GradSuite) {
    let spec = BackboneSpec {
        input_size: 64,
        in_channels: 3,
        channels: [3, 3, 4, 4, 5],
    };
    let sa = BlockSet::of(&[4, 5]).unwrap();
    let mut ps = ParamStore64::new();
    let det = Detector::new(&mut ps, &spec, sa, 3, 11).unwrap();
    let w = small_widths();
    let style: Vec<Discriminator> = [3u8, 4, 5]
        .iter()
        .map(|&b| Discriminator::new(&mut ps, DiscKind::Style, block(b), spec.block_channels(block(b)), &w, 11).unwrap())
        .collect();
    let att: Vec<Discriminator> = [4u8, 5]
        .iter()
        .map(|&b| {
            Discriminator::new(&mut ps, DiscKind::Attention, block(b), spec.block_channels(block(b)), &w, 11).unwrap()
        })
        .collect();
    let ps = &ps;
    let (det, style, att) = (&det, &style, &att);
    s.check("total objective", 1.0, |r| uniform(r, &[3, 64, 64], 0.0, 1.0), move |g, x, k| {
        let p = ps.bind_copy(g, |_| true);
        let (os, head) = det.forward(g, &p, x, sa)?;
        let boxes = random_boxes(&mut ChaCha8Rng::seed_from_u64(k), 2);
        let targets = assign_targets(&boxes, spec.grid(), spec.input_size, 3)?;
        let l_det = detection_loss(g, head, &targets, "label")?;
        let xt = g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(k ^ 0xf0), &[3, 64, 64], 0.3, 0.9));
        let ot = det.backbone.forward(g, &p, xt, &det.attention, sa)?;
        let mut l_style = None;
        for d in style {
            let gs = style_forward(g, &os.tap(d.block()).raw)?;
            let gt = style_forward(g, &ot.tap(d.block()).raw)?;
            let term = style_alignment_loss(g, &p, &gs, &gt, d, 5.0, Reversal::Plain)?;
            l_style = Some(match l_style {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let mut l_att = None;
        for d in att {
            let zs = os.tap(d.block()).attended.expect("attention enabled");
            let zt = ot.tap(d.block()).attended.expect("attention enabled");
            let eps = f64::from(d.block().index());
            let term = attention_alignment_loss(g, &p, &zs, &zt, d, eps, Reversal::Plain)?;
            l_att = Some(match l_att {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(total_loss(g, l_det, l_style, l_att, 1.0, 0.5)?)
    });
}

// ---------------------------------------------------------------------------
// criterion 2

fn gram_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut asym, mut min_eig, mut perm_bad) = (0usize, f64::INFINITY, 0usize);
    for _ in 0..100 {
        let c = rng.gen_range(1..=8);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let z = uniform(&mut rng, &[c, h, w], -3.0, 3.0);
        let gmat = gram_of(&z);
        for i in 0..c {
            for j in 0..c {
                if gmat[i * c + j].to_bits() != gmat[j * c + i].to_bits() {
                    asym += 1;
                }
            }
        }
        let m = DMatrix::from_row_slice(c, c, &gmat);
        let eig = m.symmetric_eigen().eigenvalues.min();
        min_eig = min_eig.min(eig);

        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let plane = h * w;
        let mut permuted = vec![0.0; c * plane];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * plane..(dst + 1) * plane].copy_from_slice(&z.data()[src * plane..(src + 1) * plane]);
        }
        let gp = gram_of(&Tensor::from_vec(&[c, h, w], permuted).unwrap());
        for i in 0..c {
            for j in 0..c {
                if gp[i * c + j].to_bits() != gmat[perm[i] * c + perm[j]].to_bits() {
                    perm_bad += 1;
                }
            }
        }
    }
    let pass = asym == 0 && min_eig >= -1e-9 && perm_bad == 0;
    Outcome::new(
        pass,
        format!(
            "100 maps: asymmetric entries {asym}, min eigenvalue {min_eig:.3e} (limit -1e-9), permutation mismatches {perm_bad}"
        ),
    )
}

fn gram_of(z: &Tensor64) -> Vec<f64> {
    let mut g = Graph64::new();
    let v = g.constant(z.clone());
    let fm = FeatureMap::new(&g, v, block(3)).unwrap();
    let gs = style_forward(&mut g, &fm).unwrap();
    g.value(gs.matrix).data().to_vec()
}

// ---------------------------------------------------------------------------
// criterion 3

fn focal_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        for (domain, bce) in [(Domain::Source, -p.ln()), (Domain::Target, -(1.0 - p).ln())] {
            let scalar = focal_domain_loss(p, domain, 0.0).unwrap();
            let mut g = Graph64::new();
            let pv = g.constant(Tensor::scalar(p));
            let lv = focal_domain_loss_var(&mut g, pv, domain, 0.0).unwrap();
            let graph = g.value(lv).item();
            let zv = g.constant(Tensor::scalar((p / (1.0 - p)).ln()));
            let ll = focal_domain_loss_logits(&mut g, zv, domain, 0.0).unwrap();
            let logit = g.value(ll).item();
            for v in [scalar, graph, logit] {
                worst = worst.max((v - bce).abs());
            }
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("1000 probabilities x 2 domains x 3 forms, max |focal - BCE| = {worst:.2e} (limit 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// criterion 4

/// Two-layer convolutional extractor shared by both domains.
struct TwoLayer {
    ps: ParamStore64,
    conv: [dualalign::nn::Conv; 2],
    att: AttentionNet,
    style: Discriminator,
    attention: Discriminator,
}

impl TwoLayer {
    fn new() -> Self {
        let mut ps = ParamStore64::new();
        let conv = [
            dualalign::nn::Conv::new(&mut ps, "ex.c1", 2, 3, 3, 4).unwrap(),
            dualalign::nn::Conv::new(&mut ps, "ex.c2", 3, 4, 3, 4).unwrap(),
        ];
        let att = AttentionNet::new(&mut ps, block(4), 4).unwrap();
        let w = small_widths();
        let style = Discriminator::new(&mut ps, DiscKind::Style, block(4), 4, &w, 4).unwrap();
        let attention = Discriminator::new(&mut ps, DiscKind::Attention, block(4), 4, &w, 4).unwrap();
        Self {
            ps,
            conv,
            att,
            style,
            attention,
        }
    }

    fn extract(&self, g: &mut Graph64, p: &Bound, x: Var) -> R<FeatureMap> {
        let h = self.conv[0].forward(g, p, x)?;
        let h = g.relu(h);
        let z = self.conv[1].forward(g, p, h)?;
        fmap(g, z, block(4))
    }

    /// Gradients of every parameter, by name, for one alignment loss.
    fn grads(&mut self, style: bool, reversal: Option<Reversal>, xs: &Tensor64, xt: &Tensor64) -> BTreeMap<String, Vec<f64>> {
        let mut g = Graph64::new();
        let p = self.ps.bind(&mut g, |_| true);
        let build = |g: &mut Graph64| -> R<Var> {
            let vs = g.constant(xs.clone());
            let vt = g.constant(xt.clone());
            let zs = self.extract(g, &p, vs)?;
            let zt = self.extract(g, &p, vt)?;
            if style {
                match reversal {
                    Some(r) => {
                        let gs = style_forward(g, &zs)?;
                        let gt = style_forward(g, &zt)?;
                        Ok(style_alignment_loss(g, &p, &gs, &gt, &self.style, 5.0, r)?)
                    }
                    None => {
                        let lv = [LevelInput {
                            source: zs,
                            target: zt,
                            discriminator: &self.style,
                        }];
                        Ok(multi_level_style_loss(g, &p, &lv, 5.0)?)
                    }
                }
            } else {
                let phs = attention_map(g, &p, &zs, &self.att)?;
                let pht = attention_map(g, &p, &zt, &self.att)?;
                let zs = attention_apply(g, &phs, &zs)?;
                let zt = attention_apply(g, &pht, &zt)?;
                match reversal {
                    Some(r) => Ok(attention_alignment_loss(g, &p, &zs, &zt, &self.attention, 4.0, r)?),
                    None => {
                        let lv = [LevelInput {
                            source: zs,
                            target: zt,
                            discriminator: &self.attention,
                        }];
                        Ok(multi_level_attention_loss(g, &p, &lv, |_| 4.0)?.expect("one level"))
                    }
                }
            }
        };
        let root = build(&mut g).expect("loss builds");
        g.backward(root).unwrap();
        let grads = self.ps.unbind(&mut g, &p);
        self.ps
            .ids()
            .map(|id| (self.ps.name(id).to_string(), grads[id.index()].clone().unwrap_or_default()))
            .collect()
    }
}

fn reversal_contract() -> Outcome {
    let mut net = TwoLayer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let xt = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let mut worst: f64 = 0.0;
    let mut disc_worst: f64 = 0.0;
    let mut nonzero = true;
    let mut compared = 0;
    for style in [true, false] {
        let plain = net.grads(style, Some(Reversal::Plain), &xs, &xt);
        for reversed in [net.grads(style, Some(Reversal::Reversed), &xs, &xt), net.grads(style, None, &xs, &xt)] {
            for (name, gp) in &plain {
                let gr = &reversed[name];
                let extractor = name.starts_with("ex.") || name.starts_with("att");
                let on_path = if style { !name.starts_with("att") && !name.starts_with("datt") } else { !name.starts_with("dstyle") };
                if !on_path {
                    continue;
                }
                nonzero &= gp.iter().any(|v| *v != 0.0);
                compared += 1;
                for (a, b) in gp.iter().zip(gr) {
                    if extractor {
                        worst = worst.max((a + b).abs());
                    } else {
                        disc_worst = disc_worst.max((a - b).abs());
                    }
                }
            }
        }
    }
    let pass = worst <= 1e-12 && disc_worst <= 1e-12 && nonzero;
    Outcome::new(
        pass,
        format!(
            "{compared} parameter gradients; extractor max |g_rev + g_plain| = {worst:.2e}, discriminator max |g_rev - g_plain| = {disc_worst:.2e} (limit 1e-12), all non-zero: {nonzero}"
        ),
    )
}

// ---------------------------------------------------------------------------
// criterion 5

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area = |r: &BoundingBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    if inter == 0.0 {
        0.0
    } else {
        inter / (area(a) + area(b) - inter)
    }
}

/// True-positive count of the `k` highest-scoring detections, matched from scratch.
fn prefix_tp(sorted: &[Tagged<Detection>], gts: &[Tagged<BoundingBox>], k: usize, thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in &sorted[..k] {
        let mut best = (-1.0, usize::MAX);
        for (j, gt) in gts.iter().enumerate() {
            if !used[j] && gt.image == d.image {
                let v = oracle_iou(&d.item.bbox, &gt.item);
                if v > best.0 {
                    best = (v, j);
                }
            }
        }
        if best.1 != usize::MAX && best.0 >= thr {
            used[best.1] = true;
            tp += 1;
        }
    }
    tp
}

/// AP as the area under the interpolated precision envelope, from every
/// score cut-off evaluated independently.
fn oracle_ap(dets: &[Tagged<Detection>], gts: &[Tagged<BoundingBox>], class: usize, thr: f64) -> Option<f64> {
    let gts: Vec<_> = gts.iter().filter(|g| g.item.class == class).copied().collect();
    if gts.is_empty() {
        return None;
    }
    let mut sorted: Vec<_> = dets.iter().filter(|d| d.item.bbox.class == class).copied().collect();
    sorted.sort_by(|a, b| b.item.score.total_cmp(&a.item.score));
    let n_gt = gts.len() as f64;
    let points: Vec<(f64, f64)> = (1..=sorted.len())
        .map(|k| {
            let tp = prefix_tp(&sorted, &gts, k, thr) as f64;
            (tp / n_gt, tp / k as f64)
        })
        .collect();
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    Some(ap)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Tagged<Detection>>, Vec<Tagged<BoundingBox>>) {
    let images = rng.gen_range(1..=2);
    let mut gts = Vec::new();
    for image in 0..images {
        for _ in 0..rng.gen_range(0..=3) {
            let (x, y, s) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), rng.gen_range(5.0..20.0));
            gts.push(Tagged {
                image,
                item: BoundingBox::new(x, y, x + s, y + s * rng.gen_range(0.7..1.3), rng.gen_range(0..2)).unwrap(),
            });
        }
    }
    let n = rng.gen_range(0..=10);
    let dets = (0..n)
        .map(|_| {
            let near = !gts.is_empty() && rng.gen_bool(0.7);
            let (image, bbox) = if near {
                let gt: &Tagged<BoundingBox> = gts.choose(rng).unwrap();
                let j = |r: &mut ChaCha8Rng| r.gen_range(-3.0..3.0);
                let b = gt.item;
                let (x1, y1) = (b.x1 + j(rng), b.y1 + j(rng));
                let (x2, y2) = ((b.x2 + j(rng)).max(x1 + 1.0), (b.y2 + j(rng)).max(y1 + 1.0));
                let class = if rng.gen_bool(0.8) { b.class } else { 1 - b.class };
                (gt.image, BoundingBox::new(x1, y1, x2, y2, class).unwrap())
            } else {
                let (x, y, s) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(3.0..20.0));
                (rng.gen_range(0..images), BoundingBox::new(x, y, x + s, y + s, rng.gen_range(0..2)).unwrap())
            };
            Tagged {
                image,
                item: Detection {
                    bbox,
                    score: rng.gen_range(0.0..1.0),
                },
            }
        })
        .collect();
    (dets, gts)
}

/// The set greedy NMS must return, found by trying every subset: a box is
/// kept exactly when no kept box of higher priority overlaps it above `thr`.
fn exhaustive_nms(dets: &[Detection], thr: f64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let rank: Vec<usize> = {
        let mut r = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos;
        }
        r
    };
    let mut fixed_points = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                inside(j)
                    && rank[j] < rank[i]
                    && dets[j].bbox.class == dets[i].bbox.class
                    && oracle_iou(&dets[j].bbox, &dets[i].bbox) > thr
            });
            inside(i) == !blocked
        });
        if consistent {
            let mut kept: Vec<usize> = (0..n).filter(|&i| inside(i)).collect();
            kept.sort_by_key(|&i| rank[i]);
            fixed_points.push(kept);
        }
    }
    (fixed_points, order)
}

fn ap_nms_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ap_bad, mut ap_cases, mut ap_worst) = (0, 0, 0.0f64);
    for _ in 0..200 {
        let (dets, gts) = random_instance(&mut rng);
        for class in 0..2 {
            let got = average_precision(&dets, &gts, class, 0.5).unwrap();
            let want = oracle_ap(&dets, &gts, class, 0.5);
            ap_cases += 1;
            match (got, want) {
                (Some(a), Some(b)) => {
                    ap_worst = ap_worst.max((a - b).abs());
                    if (a - b).abs() > 1e-12 {
                        ap_bad += 1;
                    }
                }
                (None, None) => {}
                _ => ap_bad += 1,
            }
        }
    }
    let (mut nms_bad, mut nms_cases) = (0, 0);
    for _ in 0..300 {
        let n = rng.gen_range(0..=8);
        let cx = rng.gen_range(10.0..30.0);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (cx + rng.gen_range(-6.0..6.0), cx + rng.gen_range(-6.0..6.0));
                let s = rng.gen_range(6.0..14.0);
                Detection {
                    bbox: BoundingBox::new(x, y, x + s, y + s, rng.gen_range(0..2)).unwrap(),
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let kept = nms(&dets, 0.5).unwrap();
        let (fixed, _) = exhaustive_nms(&dets, 0.5);
        nms_cases += 1;
        let want: Vec<Detection> = fixed.first().map(|k| k.iter().map(|&i| dets[i]).collect()).unwrap_or_default();
        if fixed.len() != 1 || kept != want {
            nms_bad += 1;
        }
    }
    // sanity: the matching threshold is inclusive, as in the library
    let probe = BoundingBox::new(0.0, 0.0, 2.0, 1.0, 0).unwrap();
    let half = BoundingBox::new(0.0, 0.0, 1.0, 1.0, 0).unwrap();
    let inclusive = iou(&probe, &half).unwrap() == 0.5;
    let pass = ap_bad == 0 && nms_bad == 0 && inclusive;
    Outcome::new(
        pass,
        format!(
            "AP: {ap_bad}/{ap_cases} mismatches over 200 instances (max diff {ap_worst:.1e}); NMS: {nms_bad}/{nms_cases} mismatches against exhaustive search"
        ),
    )
}

// ---------------------------------------------------------------------------
// criteria 6-9

fn dataset(dir: &Path, seed: u64, n: (usize, usize, usize)) -> Dataset {
    generate_dataset(dir, &GenerateOptions::new(seed, n.0, n.1, n.2)).expect("dataset generates");
    load_dataset(dir).expect("dataset loads")
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Longest-processing-time schedule of `times` on `workers` machines.
fn makespan(times: &[f64], workers: usize) -> f64 {
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut load = vec![0.0f64; workers.max(1)];
    for t in sorted {
        let i = (0..load.len()).min_by(|&a, &b| load[a].total_cmp(&load[b])).unwrap();
        load[i] += t;
    }
    load.into_iter().fold(0.0, f64::max)
}

fn ordering_experiment() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 0, (400, 400, 100));
    let base = TrainConfig::default();
    let start = Instant::now();
    let rows = match ablate(&base, &data, Some(&tmp.path().join("runs")), &[0, 1, 2], false, jobs()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("ablation failed: {e}")),
    };
    let wall = start.elapsed().as_secs_f64();
    let Some(check) = OrderingCheck::from_rows(&rows) else {
        return Outcome::new(false, "ablation is missing a component variant");
    };
    let results = check.checks();
    let run_secs: Vec<f64> = rows.iter().map(|r| r.wall_clock_secs).collect();
    let projected = makespan(&run_secs, 8);
    let ordered = results.iter().all(|(_, ok)| *ok);
    let summary: Vec<String> = results
        .iter()
        .map(|(name, ok)| format!("{name}: {}", if *ok { "yes" } else { "no" }))
        .collect();
    Outcome::new(
        ordered && projected < 45.0 * 60.0,
        format!(
            "mean best mAP over seeds 0-2 (points): source-only {:.2}, sd-only {:.2}, sa-only {:.2}, sd+sa {:.2}; {}; measured wall clock {:.0}s with {} worker(s), projected 8-worker makespan {:.0}s (limit 2700s)",
            check.source_only,
            check.sd_only,
            check.sa_only,
            check.full,
            summary.join(", "),
            wall,
            jobs(),
            projected
        ),
    )
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn degenerate_weights() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 7, (24, 24, 12));
    let cfg = TrainConfig {
        lambda: 0.0,
        mu: 0.0,
        seed: 5,
        ..small_config()
    };
    let run = |mut m: Model<f32>| train_model(&mut m, &cfg, &data, None).map(|r| r.metrics());
    let with_modules = run(Model::new(&cfg).unwrap());
    let without = run(Model::detector_only(&cfg).unwrap());
    match (with_modules, without) {
        (Ok(a), Ok(b)) => Outcome::new(
            a == b,
            format!(
                "lambda = mu = 0 with SD on {} and SA on {} vs detector-only model: metrics {}",
                cfg.sd_blocks,
                cfg.sa_blocks,
                if a == b { "bitwise identical" } else { "differ" }
            ),
        ),
        (a, b) => Outcome::new(false, format!("run failed: {:?} / {:?}", a.err(), b.err())),
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), 8, (24, 24, 12));
    let mut same = true;
    let mut tried = Vec::new();
    for (seed, precision) in [(3, "f32"), (4, "f64")] {
        let cfg = TrainConfig {
            seed,
            precision: precision.parse().unwrap(),
            ..small_config()
        };
        let once = dualalign::harness::train(&cfg, &data, None).map(|r| r.metrics());
        let twice = dualalign::harness::train(&cfg, &data, None).map(|r| r.metrics());
        match (once, twice) {
            (Ok(a), Ok(b)) => same &= a == b,
            (a, b) => return Outcome::new(false, format!("run failed: {:?} / {:?}", a.err(), b.err())),
        }
        tried.push(format!("seed {seed} {precision}"));
    }
    Outcome::new(
        same,
        format!(
            "full model ({}) trained twice: RunRecord metrics {}",
            tried.join(", "),
            if same { "identical" } else { "differ" }
        ),
    )
}

fn sensitivity_smoke() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 9, (16, 16, 8));
    let base = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for (param, values) in [(SweepParam::Gamma, vec![3.0, 4.0, 5.0, 6.0]), (SweepParam::Mu, vec![0.1, 0.5, 1.0])] {
        let out = tmp.path().join("sweeps");
        if let Err(e) = sweep(param, &values, &base, &data, Some(&out), jobs()) {
            return Outcome::new(false, format!("{param} sweep failed: {e}"));
        }
        let path = out.join(format!("sweep_{param}.csv"));
        let (good, note) = check_sweep_csv(&path, &values);
        ok &= good;
        notes.push(format!("{param}: {note}"));
    }
    Outcome::new(ok, notes.join("; "))
}

fn check_sweep_csv(path: &Path, values: &[f64]) -> (bool, String) {
    let mut reader = match csv::Reader::from_path(path) {
        Ok(r) => r,
        Err(e) => return (false, format!("cannot read {}: {e}", path.display())),
    };
    let headers = reader.headers().cloned().unwrap_or_default();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(vcol), Some(bcol), Some(fcol)) = (col("value"), col("best_map"), col("final_map")) else {
        return (false, format!("unexpected header {headers:?}"));
    };
    let rows: Vec<csv::StringRecord> = reader.records().filter_map(|r| r.ok()).collect();
    let parse = |r: &csv::StringRecord, c: usize| r.get(c).and_then(|v| v.parse::<f64>().ok());
    let seen: Vec<Option<f64>> = rows.iter().map(|r| parse(r, vcol)).collect();
    let in_order = seen.len() == values.len() && seen.iter().zip(values).all(|(a, b)| *a == Some(*b));
    let maps_ok = rows.iter().all(|r| {
        [bcol, fcol]
            .iter()
            .all(|&c| parse(r, c).is_some_and(|m| (0.0..=1.0).contains(&m)))
    });
    (
        in_order && maps_ok,
        format!("{} rows for {} values, values in order {in_order}, mAP in [0,1] {maps_ok}", rows.len(), values.len()),
    )
}
