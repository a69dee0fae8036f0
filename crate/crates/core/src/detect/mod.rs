//! Toy single-stage detector, box geometry and mAP evaluation.
//!
//! The backbone is five conv-relu-conv-relu-maxpool blocks. Blocks 3 to 5 are
//! exposed as taps for alignment, and any of them may be reweighted by a
//! spatial attention map before feeding the next block. A 1x1 convolutional
//! head predicts, for every cell of the final grid, an objectness logit,
//! `K` class logits and four box offsets.

mod backbone;
mod boxes;
mod head;
mod metrics;

pub use backbone::{Backbone, BackboneOutput, BackboneSpec, BlockOutput};
pub use boxes::{iou, nms, priority_order, BoundingBox, Detection};
pub use head::{
    assign_targets, decode, decode_box, detection_loss, encode_box, CellTargets, DetectionHead, Positive,
    HEAD_HIDDEN,
};
pub use metrics::{
    average_precision, evaluate, match_detections, score_detections, EvalResult, Predict, Tagged, EVAL_IOU,
    NMS_IOU, SCORE_THRESHOLD,
};

use thiserror::Error;

use crate::align::{AlignError, AttentionNet, Block, BlockSet};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("input shape {got:?}, expected {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// Backbone, per-block attention networks and detection head.
///
/// Attention networks exist for every block in `attention_blocks`; whether a
/// forward pass applies them is decided per call.
#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone: Backbone,
    pub attention: Vec<AttentionNet>,
    pub head: DetectionHead,
    pub num_classes: usize,
}

impl Detector {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        spec: &BackboneSpec,
        attention_blocks: BlockSet,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let backbone = Backbone::new(ps, spec, seed)?;
        let attention = attention_blocks
            .iter()
            .map(|b| AttentionNet::new(ps, b, seed))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = DetectionHead::new(ps, spec.channels[4], num_classes, spec.grid(), spec.input_size, seed)?;
        Ok(Self {
            backbone,
            attention,
            head,
            num_classes,
        })
    }

    /// Whether a parameter name belongs to the detector (as opposed to a discriminator).
    pub fn owns(name: &str) -> bool {
        name.starts_with(Backbone::PREFIX) || name.starts_with("att") || name.starts_with(DetectionHead::PREFIX)
    }

    pub fn attention_net(&self, block: Block) -> Option<&AttentionNet> {
        self.attention.iter().find(|a| a.block == block)
    }

    /// Backbone plus head. `sa` selects which blocks are attention-enhanced;
    /// each selected block must have an attention network.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        sa: BlockSet,
    ) -> Result<(BackboneOutput, Var)> {
        let out = self.backbone.forward(g, p, image, &self.attention, sa)?;
        let head = self.head.forward(g, p, out.last)?;
        Ok((out, head))
    }
}

/// A detector together with its weights, ready for inference.
pub struct Inference<'a, T: Scalar> {
    pub detector: &'a Detector,
    pub params: &'a ParamStore<T>,
    pub sa: BlockSet,
}

impl<T: Scalar> Inference<'_, T> {
    /// Raw head output `[5 + K, G, G]` for one image.
    pub fn head_output(&self, image: &Tensor<f64>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_copy(&mut g, Detector::owns);
        let x = g.constant(image.cast());
        let (_, head) = self.detector.forward(&mut g, &p, x, self.sa)?;
        Ok(g.value(head).clone())
    }
}

impl<T: Scalar> Predict for Inference<'_, T> {
    fn predict(&self, image: &Tensor<f64>) -> Result<Vec<Detection>> {
        decode(&self.head_output(image)?, &self.detector.head)
    }

    fn num_classes(&self) -> usize {
        self.detector.num_classes
    }
}
