use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{Precision, TrainConfig};
use super::model::Model;
use super::optim::Sgd;
use super::{HarnessError, Result};
use crate::align::{multi_level_attention_loss, multi_level_style_loss, LevelInput};
use crate::data::{Dataset, SplitKind};
use crate::detect::{
    assign_targets, detection_loss, evaluate, BoundingBox, Detector, EvalResult, Inference, SCORE_THRESHOLD,
};
use crate::params::splitmix;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Provenance tag on constants derived from source annotations.
pub const SOURCE_LABEL_TAG: &str = "label:source";
/// Provenance tag on constants derived from target annotations. No training loss may depend on it.
pub const TARGET_LABEL_TAG: &str = "label:target";

pub const RUN_RECORD_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

const SOURCE_ORDER_SALT: u64 = 0x736f_7572_6365;
const TARGET_ORDER_SALT: u64 = 0x7461_7267_6574;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub det: f64,
    pub style: f64,
    pub att: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.det, self.style, self.att, self.total].iter().all(|v| v.is_finite())
    }
}

/// `L_det + λ·L_style + μ·L_att` on scalars.
pub fn total_loss_value(det: f64, style: f64, att: f64, lambda: f64, mu: f64) -> f64 {
    det + lambda * style + mu * att
}

/// `L_det + λ·L_style + μ·L_att` on the graph. Absent terms and terms with a
/// zero weight are left out, so the result is then `L_det` itself.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    det: Var,
    style: Option<Var>,
    att: Option<Var>,
    lambda: f64,
    mu: f64,
) -> Result<Var> {
    let mut acc = det;
    for (term, w) in [(style, lambda), (att, mu)] {
        if let Some(t) = term.filter(|_| w != 0.0) {
            let scaled = g.scale(t, T::lit(w));
            acc = g.add(acc, scaled)?;
        }
    }
    Ok(acc)
}

/// Errors if `root` depends on any target-domain annotation.
pub fn assert_no_target_labels<T: Scalar>(g: &Graph<T>, root: Var) -> Result<()> {
    if g.depends_on_tag(root, TARGET_LABEL_TAG) {
        return Err(HarnessError::TargetLabelLeak);
    }
    Ok(())
}

/// One joint update on a source image with its boxes and an unlabeled target image.
///
/// Only parameters on the active loss path are bound: discriminators of a
/// disabled or zero-weight term are neither read nor updated.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    cfg: &TrainConfig,
    source: &Tensor<T>,
    source_boxes: &[BoundingBox],
    target: &Tensor<T>,
) -> Result<LossComponents> {
    let style_on = cfg.style_active() && !model.style.is_empty();
    let att_on = cfg.attention_active() && !model.attention.is_empty();
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, |n| {
        Detector::owns(n) || (style_on && n.starts_with("dstyle")) || (att_on && n.starts_with("datt"))
    });

    let forward = |g: &mut Graph<T>| -> Result<LossComponents> {
        let det_net = &model.detector;
        let xs = g.constant(source.clone());
        let (os, head) = det_net.forward(g, &bound, xs, cfg.sa_blocks)?;
        let spec = det_net.backbone.spec();
        let targets = assign_targets(source_boxes, spec.grid(), spec.input_size, det_net.num_classes)?;
        let det = detection_loss(g, head, &targets, SOURCE_LABEL_TAG)?;

        let (mut style, mut att) = (None, None);
        if style_on || att_on {
            let xt = g.constant(target.clone());
            let ot = det_net.backbone.forward(g, &bound, xt, &det_net.attention, cfg.sa_blocks)?;
            if style_on {
                let levels: Vec<LevelInput> = model
                    .style
                    .iter()
                    .map(|d| LevelInput {
                        source: os.tap(d.block()).raw,
                        target: ot.tap(d.block()).raw,
                        discriminator: d,
                    })
                    .collect();
                style = Some(multi_level_style_loss(g, &bound, &levels, cfg.gamma)?);
            }
            if att_on {
                let mut levels = Vec::with_capacity(model.attention.len());
                for d in &model.attention {
                    let (s, t) = (os.tap(d.block()).attended, ot.tap(d.block()).attended);
                    let (Some(source), Some(target)) = (s, t) else {
                        return Err(HarnessError::Consistency(format!(
                            "attention discriminator on block {} without attention in the backbone",
                            d.block()
                        )));
                    };
                    levels.push(LevelInput {
                        source,
                        target,
                        discriminator: d,
                    });
                }
                let eps = |b| cfg.epsilon_for(b).expect("validated config has epsilon for every SA block");
                att = multi_level_attention_loss(g, &bound, &levels, eps)?;
            }
        }
        let total = total_loss(g, det, style, att, cfg.lambda, cfg.mu)?;
        assert_no_target_labels(g, total)?;
        let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let losses = LossComponents {
            det: val(g, Some(det)),
            style: val(g, style),
            att: val(g, att),
            total: val(g, Some(total)),
        };
        if !losses.is_finite() {
            return Err(HarnessError::NonFinite {
                epoch: 0,
                step: 0,
                losses,
                checkpoint: None,
            });
        }
        g.backward(total)?;
        Ok(losses)
    };
    let outcome = forward(&mut g);
    // parameters go back to the store whether or not the step succeeded
    let grads = model.params.unbind(&mut g, &bound);
    let losses = outcome?;
    opt.step(&mut model.params, &bound, grads)?;
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of each component over the epoch's steps.
    pub losses: LossComponents,
    pub eval: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Completed,
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    /// Evaluation before the first update.
    pub initial_eval: EvalResult,
    pub epochs: Vec<EpochRecord>,
    /// 0 denotes the initial evaluation.
    pub best_epoch: usize,
    pub best_eval: EvalResult,
    pub final_eval: EvalResult,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub status: RunStatus,
}

impl RunRecord {
    /// Everything except wall-clock time and file locations.
    pub fn metrics(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("record serializes");
        let obj = v.as_object_mut().expect("record is an object");
        obj.remove("wall_clock_secs");
        obj.remove("checkpoint");
        v
    }

    pub fn best_map(&self) -> f64 {
        self.best_eval.map
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("record serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Target images in an order reshuffled each time the split is exhausted,
/// independent of the source order.
struct TargetStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl TargetStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ TARGET_ORDER_SALT));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn eval_target<T: Scalar>(model: &Model<T>, cfg: &TrainConfig, data: &Dataset) -> Result<EvalResult> {
    let test = data.split(SplitKind::TargetTest);
    let inf = Inference {
        detector: &model.detector,
        params: &model.params,
        sa: cfg.sa_blocks,
    };
    Ok(evaluate(&inf, &test.images, &test.annotations, SCORE_THRESHOLD)?)
}

/// Trains `model` under `cfg`. With `out`, writes the last good checkpoint
/// after every epoch and the run record at the end, including on abort.
pub fn train_model<T: Scalar>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let src = data.split(SplitKind::SourceTrain);
    let tgt = data.split(SplitKind::TargetTrain);
    let src_images: Vec<Tensor<T>> = src.images.iter().map(Tensor::cast).collect();
    // target annotations are never read during training
    let tgt_images: Vec<Tensor<T>> = tgt.images.iter().map(Tensor::cast).collect();

    let mut opt = Sgd::<T>::new(cfg.lr, cfg.momentum, cfg.weight_decay).with_clip_norm(cfg.grad_clip);
    let mut src_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ SOURCE_ORDER_SALT));
    let mut src_order: Vec<usize> = (0..src_images.len()).collect();
    let mut tgt_stream = TargetStream::new(tgt_images.len(), cfg.seed);

    let initial_eval = eval_target(model, cfg, data)?;
    let mut record = RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        initial_eval: initial_eval.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_eval: initial_eval.clone(),
        final_eval: initial_eval,
        wall_clock_secs: 0.0,
        checkpoint: None,
        status: RunStatus::Completed,
    };
    let ck_path = out.map(|d| d.join(CHECKPOINT_FILE));

    for epoch in 1..=cfg.epochs {
        src_order.shuffle(&mut src_rng);
        let mut sum = LossComponents::default();
        for (step, &i) in src_order.iter().enumerate() {
            let j = tgt_stream.next();
            match train_step(model, &mut opt, cfg, &src_images[i], &src.annotations[i], &tgt_images[j]) {
                Ok(l) => {
                    sum.det += l.det;
                    sum.style += l.style;
                    sum.att += l.att;
                    sum.total += l.total;
                }
                Err(HarnessError::NonFinite { losses, .. }) => {
                    let err = HarnessError::NonFinite {
                        epoch,
                        step,
                        losses,
                        checkpoint: record.checkpoint.clone(),
                    };
                    record.status = RunStatus::Aborted {
                        reason: err.to_string(),
                    };
                    record.wall_clock_secs = start.elapsed().as_secs_f64();
                    if let Some(dir) = out {
                        record.write(&dir.join(RUN_RECORD_FILE))?;
                    }
                    return Err(err);
                }
                Err(e) => return Err(e),
            }
        }
        let n = src_order.len().max(1) as f64;
        let losses = LossComponents {
            det: sum.det / n,
            style: sum.style / n,
            att: sum.att / n,
            total: sum.total / n,
        };
        let eval = eval_target(model, cfg, data)?;
        if eval.map > record.best_eval.map {
            record.best_epoch = epoch;
            record.best_eval = eval.clone();
        }
        record.final_eval = eval.clone();
        log::info!(
            "seed {} epoch {epoch}/{}: loss det {:.4} style {:.4} att {:.4} total {:.4}; target mAP {:.4} ({:.0}s)",
            cfg.seed,
            cfg.epochs,
            losses.det,
            losses.style,
            losses.att,
            losses.total,
            eval.map,
            start.elapsed().as_secs_f64()
        );
        record.epochs.push(EpochRecord { epoch, losses, eval });
        if let Some(p) = &ck_path {
            checkpoint::save(p, cfg, &model.params)?;
            record.checkpoint = Some(p.clone());
        }
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        record.write(&dir.join(RUN_RECORD_FILE))?;
    }
    Ok(record)
}

/// Builds the full model for `cfg` and trains it at the configured precision.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<RunRecord> {
    match cfg.precision {
        Precision::F32 => train_model(&mut Model::<f32>::new(cfg)?, cfg, data, out),
        Precision::F64 => train_model(&mut Model::<f64>::new(cfg)?, cfg, data, out),
    }
}
