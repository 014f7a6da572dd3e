//! Supervised training of the detector on clean images.

use super::network::RpnTrace;
use super::{decode_all, sigmoid, softmax2, top_k, Anchor, AnchorConfig, DetectorMeta, DetectorWeights};
use crate::checkpoint::Checkpoint;
use crate::data::{ImageTensor, Sample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Adam, FeatureMap};
use crate::{par, seeding};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

const RPN_POSITIVE_IOU: f64 = 0.5;
const RPN_NEGATIVE_IOU: f64 = 0.3;
const ROI_POSITIVE_IOU: f64 = 0.5;
/// Current top proposals fed to the classifier per image.
const ROI_FROM_PROPOSALS: usize = 32;
const ROI_JITTER_PER_BOX: usize = 4;
const ROI_RANDOM_ANCHORS: usize = 16;
/// Stream tag for the per-epoch shuffle, distinct from any image index.
const SHUFFLE_TAG: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Random horizontal flips.
    pub flip: bool,
    pub anchors: AnchorConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            seed: 0,
            learning_rate: 3e-3,
            batch_size: 8,
            flip: true,
            anchors: AnchorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub classifier: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct LossParts {
    rpn_objectness: f64,
    rpn_box: f64,
    classifier: f64,
}

impl LossParts {
    fn total(&self) -> f64 {
        self.rpn_objectness + self.rpn_box + self.classifier
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerHeader {
    meta: DetectorMeta,
    config: DetectorTrainConfig,
    history: Vec<EpochRecord>,
    adam: Adam,
}

/// Resumable detector training state.
pub struct DetectorTrainer {
    weights: DetectorWeights,
    adam: Adam,
    config: DetectorTrainConfig,
    history: Vec<EpochRecord>,
}

impl DetectorTrainer {
    pub fn new(config: DetectorTrainConfig, input: (usize, usize)) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(config.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        let weights = DetectorWeights::initialize(config.anchors.clone(), input, config.seed);
        let adam = Adam::new(weights.num_params(), config.learning_rate);
        Ok(Self {
            weights,
            adam,
            config,
            history: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn config(&self) -> &DetectorTrainConfig {
        &self.config
    }

    pub fn weights(&self) -> &DetectorWeights {
        &self.weights
    }

    pub fn into_weights(self) -> DetectorWeights {
        self.weights
    }

    /// Run epochs until `config.epochs` have completed, calling `on_epoch`
    /// after each one (for logging or checkpointing).
    pub fn run<F>(&mut self, data: &[Sample], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Self, &EpochRecord) -> Result<()>,
    {
        while self.epochs_done() < self.config.epochs {
            let record = self.run_epoch(data)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        check_data(data, &self.weights)?;
        let epoch = self.epochs_done();
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeding::stream(seed, &[epoch as u64, SHUFFLE_TAG]));

        let mut sums = LossParts::default();
        let n = self.weights.num_params();
        for batch in order.chunks(self.config.batch_size) {
            let weights = &self.weights;
            let flip = self.config.flip;
            let results = par::map(batch, |&i| {
                let mut rng = seeding::stream(seed, &[epoch as u64, i as u64]);
                image_loss_and_grad(weights, &data[i], flip, &mut rng)
            });
            let mut grads = vec![0.0; n];
            for (parts, g) in &results {
                if !parts.total().is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: "detector epoch",
                        index: epoch,
                    });
                }
                sums.rpn_objectness += parts.rpn_objectness;
                sums.rpn_box += parts.rpn_box;
                sums.classifier += parts.classifier;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            self.adam.step(self.weights.params_mut(), &grads);
        }

        let count = data.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sums.total() / count,
            rpn_objectness: sums.rpn_objectness / count,
            rpn_box: sums.rpn_box / count,
            classifier: sums.classifier / count,
        };
        if !record.loss.is_finite() || self.weights.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss {
                stage: "detector epoch",
                index: epoch,
            });
        }
        log::info!(
            "detector epoch {epoch}: loss {:.4} (rpn obj {:.4}, rpn box {:.4}, cls {:.4})",
            record.loss,
            record.rpn_objectness,
            record.rpn_box,
            record.classifier
        );
        self.history.push(record);
        let meta = self.weights.meta_mut();
        meta.epochs = self.history.len();
        meta.epoch_losses.push(record.loss);
        Ok(record)
    }

    /// Serialize weights together with optimizer state and history.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (m, v) = self.adam.moments();
        let mut sections = self.weights.sections();
        sections.push(("adam_first_moment".into(), m.to_vec()));
        sections.push(("adam_second_moment".into(), v.to_vec()));
        Checkpoint {
            header: TrainerHeader {
                meta: self.weights.meta().clone(),
                config: self.config.clone(),
                history: self.history.clone(),
                adam: self.adam.clone(),
            },
            sections,
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut ckpt = Checkpoint::<TrainerHeader>::from_bytes(bytes)?;
        let header = ckpt.header.clone();
        let weights = DetectorWeights::from_checkpoint(header.meta, &mut ckpt)?;
        let first = ckpt.take_section("adam_first_moment");
        let second = ckpt.take_section("adam_second_moment");
        let (Some(first), Some(second)) = (first, second) else {
            return Err(Error::Checkpoint("missing optimizer state".into()));
        };
        if first.len() != weights.num_params() || second.len() != weights.num_params() {
            return Err(Error::Checkpoint("optimizer state has wrong length".into()));
        }
        let mut adam = header.adam;
        adam.restore_moments(first, second);
        Ok(Self {
            weights,
            adam,
            config: header.config,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Allow a resumed run to continue for more epochs than originally planned.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }
}

/// Train a detector from scratch on clean samples.
pub fn train_detector(data: &[Sample], config: &DetectorTrainConfig) -> Result<DetectorWeights> {
    let first = data.first().ok_or(Error::NoPositives)?;
    let mut trainer = DetectorTrainer::new(config.clone(), first.image.shape())?;
    trainer.run(data, |_, _| Ok(()))?;
    Ok(trainer.into_weights())
}

fn check_data(data: &[Sample], weights: &DetectorWeights) -> Result<()> {
    let meta = weights.meta();
    let expected = (meta.input_height, meta.input_width);
    for s in data {
        if s.image.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", expected.0, expected.1),
                actual: format!("{}x{}", s.image.height(), s.image.width()),
            });
        }
    }
    if data.iter().all(|s| s.boxes.is_empty()) {
        return Err(Error::NoPositives);
    }
    Ok(())
}

fn flip_sample(sample: &Sample) -> (ImageTensor, Vec<BBox>) {
    let (h, w) = sample.image.shape();
    let src = sample.image.values();
    let mut values = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let from = (y * w + (w - 1 - x)) * 3;
            let to = (y * w + x) * 3;
            values[to..to + 3].copy_from_slice(&src[from..from + 3]);
        }
    }
    let wf = w as f64;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| BBox::new(wf - b.x_max, b.y_min, wf - b.x_min, b.y_max))
        .collect();
    (ImageTensor::clamped(h, w, values), boxes)
}

fn max_iou(b: &BBox, gts: &[BBox]) -> (f64, usize) {
    gts.iter()
        .enumerate()
        .map(|(j, g)| (b.iou(g), j))
        .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Region-head loss and its gradients w.r.t. the objectness/delta maps.
fn rpn_loss(anchors: &[Anchor], rpn: &RpnTrace, gts: &[BBox]) -> (f64, f64, FeatureMap, FeatureMap) {
    let k = rpn.objectness.channels;
    let plane = rpn.objectness.height * rpn.objectness.width;
    let anchor_boxes: Vec<BBox> = anchors.iter().map(Anchor::to_box).collect();
    let matches: Vec<(f64, usize)> = anchor_boxes.iter().map(|a| max_iou(a, gts)).collect();

    // label: 1 positive, 0 negative, -1 ignored
    let mut labels: Vec<i8> = matches
        .iter()
        .map(|&(iou, _)| {
            if iou >= RPN_POSITIVE_IOU {
                1
            } else if iou < RPN_NEGATIVE_IOU {
                0
            } else {
                -1
            }
        })
        .collect();
    let mut targets: Vec<usize> = matches.iter().map(|m| m.1).collect();
    for (j, gt) in gts.iter().enumerate() {
        let ious: Vec<f64> = anchor_boxes.iter().map(|a| a.iou(gt)).collect();
        let best = ious.iter().copied().fold(0.0, f64::max);
        if best > 0.0 {
            for (i, &v) in ious.iter().enumerate() {
                if v == best {
                    labels[i] = 1;
                    targets[i] = j;
                }
            }
        }
    }

    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    let (w_pos, w_neg) = match (pos, neg) {
        (0, 0) => (0.0, 0.0),
        (0, n) => (0.0, 1.0 / n as f64),
        (p, 0) => (1.0 / p as f64, 0.0),
        (p, n) => (0.5 / p as f64, 0.5 / n as f64),
    };

    let mut d_obj = FeatureMap::zeros(k, rpn.objectness.height, rpn.objectness.width);
    let mut d_deltas = FeatureMap::zeros(4 * k, rpn.objectness.height, rpn.objectness.width);
    let mut obj_loss = 0.0;
    let mut box_loss = 0.0;
    for cell in 0..plane {
        for a in 0..k {
            let idx = cell * k + a;
            let o = rpn.objectness.data[a * plane + cell];
            match labels[idx] {
                1 => {
                    obj_loss += w_pos * softplus(-o);
                    d_obj.data[a * plane + cell] = w_pos * (sigmoid(o) - 1.0);
                    let target = anchors[idx].encode(&gts[targets[idx]]);
                    for (j, t) in target.iter().enumerate() {
                        let slot = (4 * a + j) * plane + cell;
                        let (l, g) = smooth_l1(rpn.deltas.data[slot] - t);
                        box_loss += l / pos as f64;
                        d_deltas.data[slot] = g / pos as f64;
                    }
                }
                0 => {
                    obj_loss += w_neg * softplus(o);
                    d_obj.data[a * plane + cell] = w_neg * sigmoid(o);
                }
                _ => {}
            }
        }
    }
    (obj_loss, box_loss, d_obj, d_deltas)
}

/// Boxes the classifier is trained on: current top proposals, ground truth,
/// jittered ground truth and random anchors.
fn classifier_rois<R: Rng>(
    proposals: &[BBox],
    objectness: &[f64],
    anchors: &[Anchor],
    gts: &[BBox],
    size: (usize, usize),
    rng: &mut R,
) -> Vec<BBox> {
    let (h, w) = (size.0 as f64, size.1 as f64);
    let mut rois: Vec<BBox> = top_k(objectness, ROI_FROM_PROPOSALS)
        .into_iter()
        .map(|i| proposals[i])
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for gt in gts {
        rois.push(*gt);
        for _ in 0..ROI_JITTER_PER_BOX {
            let (cx, cy) = gt.center();
            let jx = cx + 0.15 * gt.width() * unit.sample(rng);
            let jy = cy + 0.15 * gt.height() * unit.sample(rng);
            let jw = gt.width() * (0.15 * unit.sample(rng)).exp();
            let jh = gt.height() * (0.15 * unit.sample(rng)).exp();
            rois.push(BBox::from_center(jx, jy, jw, jh).clip(w, h));
        }
    }
    for _ in 0..ROI_RANDOM_ANCHORS {
        let a = anchors[rng.random_range(0..anchors.len())];
        rois.push(a.to_box().clip(w, h));
    }
    rois.retain(|b| b.width() >= 1.0 && b.height() >= 1.0);
    rois
}

fn image_loss_and_grad<R: Rng>(
    weights: &DetectorWeights,
    sample: &Sample,
    flip: bool,
    rng: &mut R,
) -> (LossParts, Vec<f64>) {
    let flipped;
    let (image, gts) = if flip && rng.random_bool(0.5) {
        flipped = flip_sample(sample);
        (&flipped.0, flipped.1.as_slice())
    } else {
        (&sample.image, sample.boxes.as_slice())
    };
    let net = weights.net();
    let params = weights.params();
    let mut grads = vec![0.0; params.len()];

    let backbone = weights.backbone(image);
    let features = backbone.features();
    let rpn = net.rpn_forward(params, features);
    let anchors = weights.anchors(rpn.objectness.height, rpn.objectness.width);
    let (rpn_obj, rpn_box, d_obj, d_deltas) = rpn_loss(&anchors, &rpn, gts);

    let (boxes, logits) = decode_all(&anchors, &rpn, image.height(), image.width());
    let rois = classifier_rois(&boxes, &logits, &anchors, gts, image.shape(), rng);
    let cls = net.classify(params, features, &rois);
    let labels: Vec<usize> = rois
        .iter()
        .map(|r| usize::from(max_iou(r, gts).0 >= ROI_POSITIVE_IOU))
        .collect();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    let mut cls_loss = 0.0;
    let mut d_logits = vec![0.0; cls.logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let z = [cls.logits[2 * i], cls.logits[2 * i + 1]];
        let p = softmax2(&z);
        let count = if label == 1 { pos } else { neg };
        let weight = if pos == 0 || neg == 0 { 1.0 } else { 0.5 } / count as f64;
        cls_loss -= weight * p[label].max(1e-300).ln();
        for c in 0..2 {
            let onehot = if c == label { 1.0 } else { 0.0 };
            d_logits[2 * i + c] = weight * (p[c] - onehot);
        }
    }

    let mut d_features = net.classify_backward(params, features, &cls, &d_logits, Some(&mut grads));
    let d_rpn = net.rpn_backward(params, features, &rpn, &d_obj, &d_deltas, &mut grads);
    d_features.add_assign(&d_rpn);
    net.backbone_backward(params, &backbone, d_features, Some(&mut grads), false);

    let parts = LossParts {
        rpn_objectness: rpn_obj,
        rpn_box,
        classifier: cls_loss,
    };
    (parts, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_is_continuous_at_one() {
        let (a, _) = smooth_l1(0.999_999);
        let (b, _) = smooth_l1(1.000_001);
        assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn softplus_matches_naive() {
        for x in [-5.0f64, -0.3, 0.0, 0.7, 4.0] {
            assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = Sample {
            image: ImageTensor::clamped(16, 16, (0..768).map(|i| (i % 7) as f64 / 7.0 - 0.5).collect()),
            boxes: vec![BBox::new(1.0, 2.0, 6.0, 9.0)],
        };
        let (img, boxes) = flip_sample(&s);
        let again = flip_sample(&Sample { image: img, boxes });
        assert_eq!(again.0, s.image);
        assert_eq!(again.1, s.boxes);
    }
}
