//! Two-stage face detector: anchor proposals from a fully convolutional
//! region head, face/background logits per proposal from a fixed-size crop
//! of backbone features, then thresholding and NMS.

mod anchors;
mod network;
mod nms;
mod train;

pub use anchors::{Anchor, AnchorConfig};
pub use network::{FEATURE_STRIDE, ROI_BINS};
pub use nms::nms;
pub use train::{train_detector, DetectorTrainConfig, DetectorTrainer, EpochRecord};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::data::{chw_to_hwc, ImageTensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use network::{BackboneTrace, ClassifierTrace, DetectorNet, RpnTrace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Proposal cap while training the attack generator.
pub const TRAIN_PROPOSAL_CAP: usize = 2000;
/// Proposal cap at evaluation time.
pub const TEST_PROPOSAL_CAP: usize = 300;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
/// Logit column of the background class.
pub const BACKGROUND: usize = 0;
/// Logit column of the face class.
pub const FACE: usize = 1;

const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    /// Objectness probability of each box, descending.
    pub objectness: Vec<f64>,
    pub capped_n: usize,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Unnormalized `(background, face)` logits, one row per proposal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreMatrix {
    pub logits: Vec<[f64; 2]>,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.logits.len()
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|v| v.is_finite())
    }

    pub fn probabilities(&self) -> Vec<[f64; 2]> {
        self.logits.iter().map(softmax2).collect()
    }

    /// Softmax face probability per row.
    pub fn face_probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|z| softmax2(z)[FACE]).collect()
    }
}

pub(crate) fn softmax2(z: &[f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let a = (z[0] - m).exp();
    let b = (z[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionList {
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f64>,
    pub threshold_used: f64,
}

impl DetectionList {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Checkpoint header describing how the weights were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub anchors: AnchorConfig,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

/// Detector parameters: backbone, region head and classifier head.
#[derive(Debug, Clone)]
pub struct DetectorWeights {
    meta: DetectorMeta,
    params: Vec<f64>,
    net: DetectorNet,
}

impl PartialEq for DetectorWeights {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta && self.params == other.params
    }
}

impl DetectorWeights {
    /// Freshly initialized, untrained weights.
    pub fn initialize(anchors: AnchorConfig, input: (usize, usize), seed: u64) -> Self {
        let net = DetectorNet::new(anchors.per_cell());
        let params = net.init(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            meta: DetectorMeta {
                version: WEIGHTS_VERSION,
                seed,
                epochs: 0,
                input_height: input.0,
                input_width: input.1,
                anchors,
                epoch_losses: Vec::new(),
            },
            params,
            net,
        }
    }

    pub fn meta(&self) -> &DetectorMeta {
        &self.meta
    }

    pub(crate) fn meta_mut(&mut self) -> &mut DetectorMeta {
        &mut self.meta
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn net(&self) -> &DetectorNet {
        &self.net
    }

    /// Anchors laid over the feature grid of an `rows × cols` feature map.
    pub fn anchors(&self, rows: usize, cols: usize) -> Vec<Anchor> {
        self.meta.anchors.grid(rows, cols, FEATURE_STRIDE)
    }

    pub(crate) fn sections(&self) -> Vec<(String, Vec<f64>)> {
        let (b, r) = (self.net.backbone_end, self.net.rpn_end);
        vec![
            ("backbone".into(), self.params[..b].to_vec()),
            ("rpn_head".into(), self.params[b..r].to_vec()),
            ("classifier_head".into(), self.params[r..].to_vec()),
        ]
    }

    /// Rebuild from a checkpoint, consuming its parameter sections.
    pub(crate) fn from_checkpoint<H>(meta: DetectorMeta, ckpt: &mut Checkpoint<H>) -> Result<Self>
    where
        H: Serialize + serde::de::DeserializeOwned,
    {
        let net = DetectorNet::new(meta.anchors.per_cell());
        let mut params = Vec::with_capacity(net.num_params);
        for name in ["backbone", "rpn_head", "classifier_head"] {
            let block = ckpt
                .take_section(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))?;
            params.extend(block);
        }
        if params.len() != net.num_params {
            return Err(Error::Checkpoint(format!(
                "expected {} detector parameters, found {}",
                net.num_params,
                params.len()
            )));
        }
        Ok(Self { meta, params, net })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Checkpoint {
            header: self.meta.clone(),
            sections: self.sections(),
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut ckpt = Checkpoint::<DetectorMeta>::from_bytes(bytes)?;
        if ckpt.header.version != WEIGHTS_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported detector version {}",
                ckpt.header.version
            )));
        }
        let meta = ckpt.header.clone();
        Self::from_checkpoint(meta, &mut ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes().expect("detector header serializes"))
    }

    pub(crate) fn backbone(&self, x: &ImageTensor) -> BackboneTrace {
        self.net.backbone_forward(&self.params, &x.to_feature_map())
    }

    fn rpn(&self, trace: &BackboneTrace) -> RpnTrace {
        self.net.rpn_forward(&self.params, trace.features())
    }
}

/// Decoded, clipped proposals for every anchor, unsorted, plus objectness logits.
pub(crate) fn decode_all(
    anchors: &[Anchor],
    rpn: &RpnTrace,
    height: usize,
    width: usize,
) -> (Vec<BBox>, Vec<f64>) {
    let k = rpn.objectness.channels;
    let (rows, cols) = (rpn.objectness.height, rpn.objectness.width);
    let plane = rows * cols;
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut logits = Vec::with_capacity(anchors.len());
    for cell in 0..plane {
        for a in 0..k {
            let idx = cell * k + a;
            let deltas: Vec<f64> = (0..4)
                .map(|j| rpn.deltas.data[(4 * a + j) * plane + cell])
                .collect();
            boxes.push(anchors[idx].decode(&deltas).clip(width as f64, height as f64));
            logits.push(rpn.objectness.data[a * plane + cell]);
        }
    }
    (boxes, logits)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `cap` largest values, descending, ties by lower index.
pub(crate) fn top_k(values: &[f64], cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(cap);
    order
}

fn proposals_from(
    weights: &DetectorWeights,
    trace: &BackboneTrace,
    height: usize,
    width: usize,
    cap: usize,
    min_objectness: f64,
) -> ProposalSet {
    let rpn = weights.rpn(trace);
    let anchors = weights.anchors(rpn.objectness.height, rpn.objectness.width);
    let (boxes, logits) = decode_all(&anchors, &rpn, height, width);
    let mut order = top_k(&logits, cap);
    order.retain(|&i| sigmoid(logits[i]) >= min_objectness);
    ProposalSet {
        boxes: order.iter().map(|&i| boxes[i]).collect(),
        objectness: order.iter().map(|&i| sigmoid(logits[i])).collect(),
        capped_n: cap,
    }
}

/// Top-`cap` proposals by objectness, boxes clipped to the image.
pub fn propose(x: &ImageTensor, weights: &DetectorWeights, cap: usize) -> ProposalSet {
    propose_filtered(x, weights, cap, 0.0)
}

/// Like [`propose`] but drops proposals whose objectness is below `min_objectness`.
pub fn propose_filtered(
    x: &ImageTensor,
    weights: &DetectorWeights,
    cap: usize,
    min_objectness: f64,
) -> ProposalSet {
    let trace = weights.backbone(x);
    proposals_from(weights, &trace, x.height(), x.width(), cap, min_objectness)
}

/// Classifier logits for each proposal.
pub fn score(x: &ImageTensor, proposals: &ProposalSet, weights: &DetectorWeights) -> ScoreMatrix {
    let trace = weights.backbone(x);
    let cls = weights
        .net
        .classify(&weights.params, trace.features(), &proposals.boxes);
    to_score_matrix(&cls)
}

fn to_score_matrix(cls: &ClassifierTrace) -> ScoreMatrix {
    ScoreMatrix {
        logits: cls.logits.chunks_exact(2).map(|r| [r[0], r[1]]).collect(),
    }
}

/// Threshold face probability at `alpha`, then greedy NMS.
pub fn detect(
    x: &ImageTensor,
    weights: &DetectorWeights,
    alpha: f64,
    cap: usize,
    nms_iou: f64,
) -> DetectionList {
    DetectorPass::run(x, weights, cap).detections(alpha, nms_iou)
}

/// One full forward pass (proposals and scores) kept around so the input
/// gradient of any function of the logits can be taken without recomputing.
pub struct DetectorPass<'w> {
    weights: &'w DetectorWeights,
    height: usize,
    width: usize,
    backbone: BackboneTrace,
    classifier: ClassifierTrace,
    pub proposals: ProposalSet,
    pub scores: ScoreMatrix,
}

impl<'w> DetectorPass<'w> {
    pub fn run(x: &ImageTensor, weights: &'w DetectorWeights, cap: usize) -> Self {
        let backbone = weights.backbone(x);
        let proposals = proposals_from(weights, &backbone, x.height(), x.width(), cap, 0.0);
        Self::finish(x, weights, backbone, proposals)
    }

    /// Score a caller-supplied proposal set instead of proposing.
    pub fn with_proposals(x: &ImageTensor, weights: &'w DetectorWeights, proposals: ProposalSet) -> Self {
        let backbone = weights.backbone(x);
        Self::finish(x, weights, backbone, proposals)
    }

    fn finish(
        x: &ImageTensor,
        weights: &'w DetectorWeights,
        backbone: BackboneTrace,
        proposals: ProposalSet,
    ) -> Self {
        let classifier = weights
            .net
            .classify(&weights.params, backbone.features(), &proposals.boxes);
        let scores = to_score_matrix(&classifier);
        Self {
            weights,
            height: x.height(),
            width: x.width(),
            backbone,
            classifier,
            proposals,
            scores,
        }
    }

    pub fn detections(&self, alpha: f64, nms_iou: f64) -> DetectionList {
        let probs = self.scores.face_probabilities();
        let kept: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= alpha).collect();
        let boxes: Vec<BBox> = kept.iter().map(|&i| self.proposals.boxes[i]).collect();
        let confs: Vec<f64> = kept.iter().map(|&i| probs[i]).collect();
        let order = nms(&boxes, &confs, nms_iou);
        DetectionList {
            boxes: order.iter().map(|&i| boxes[i]).collect(),
            confidences: order.iter().map(|&i| confs[i]).collect(),
            threshold_used: alpha,
        }
    }

    /// Gradient with respect to the input pixels (HWC layout) of
    /// `Σ_i d_logits[i] · logits[i]`, with proposal boxes held fixed.
    pub fn input_gradient(&self, d_logits: &[[f64; 2]]) -> Vec<f64> {
        assert_eq!(d_logits.len(), self.scores.rows());
        let flat: Vec<f64> = d_logits.iter().flatten().copied().collect();
        let net = &self.weights.net;
        let params = &self.weights.params;
        let d_features =
            net.classify_backward(params, self.backbone.features(), &self.classifier, &flat, None);
        let d_input = net
            .backbone_backward(params, &self.backbone, d_features, None, true)
            .expect("input grad requested");
        debug_assert_eq!((d_input.height, d_input.width), (self.height, self.width));
        chw_to_hwc(&d_input)
    }
}
