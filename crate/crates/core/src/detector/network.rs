//! Layer layout and traced forward/backward passes of the detector.

use crate::geometry::BBox;
use crate::instrument;
use crate::nn::{softplus_backward, softplus_inplace, Conv2d, FeatureMap, Linear, ParamLayout};
use rand::Rng;

/// Pixel stride of the backbone feature map.
pub const FEATURE_STRIDE: usize = 8;
/// Side of the fixed-size per-proposal crop.
pub const ROI_BINS: usize = 3;

/// `(in, out, stride)` of each 3×3 backbone convolution.
const BACKBONE: [(usize, usize, usize); 5] = [(3, 16, 1), (16, 24, 2), (24, 32, 2), (32, 32, 2), (32, 32, 1)];
const FEATURES: usize = 32;
const HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub(crate) struct DetectorNet {
    backbone: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_objectness: Conv2d,
    rpn_deltas: Conv2d,
    fc_hidden: Linear,
    fc_logits: Linear,
    /// Parameter ranges `[0, backbone_end)`, `[backbone_end, rpn_end)`, `[rpn_end, num_params)`.
    pub backbone_end: usize,
    pub rpn_end: usize,
    pub num_params: usize,
}

pub(crate) struct BackboneTrace {
    input_sizes: Vec<(usize, usize)>,
    cols: Vec<Vec<f64>>,
    outputs: Vec<FeatureMap>,
}

impl BackboneTrace {
    pub fn features(&self) -> &FeatureMap {
        self.outputs.last().expect("backbone has layers")
    }
}

pub(crate) struct RpnTrace {
    hidden: FeatureMap,
    hidden_cols: Vec<f64>,
    objectness_cols: Vec<f64>,
    deltas_cols: Vec<f64>,
    /// `anchors_per_cell × rows × cols` objectness logits.
    pub objectness: FeatureMap,
    /// `4·anchors_per_cell × rows × cols` box deltas.
    pub deltas: FeatureMap,
}

/// One bilinear tap: flat index into a feature plane and its weight.
type Tap = (usize, f64);

pub(crate) struct ClassifierTrace {
    taps: Vec<[Tap; 4]>,
    crops: Vec<f64>,
    hidden: Vec<f64>,
    pub logits: Vec<f64>,
    rows: usize,
}

impl DetectorNet {
    pub fn new(anchors_per_cell: usize) -> Self {
        let mut layout = ParamLayout::default();
        let backbone = BACKBONE
            .iter()
            .map(|&(i, o, s)| Conv2d::new(&mut layout, i, o, 3, s, 1))
            .collect();
        let backbone_end = layout.len();
        let rpn_conv = Conv2d::new(&mut layout, FEATURES, FEATURES, 3, 1, 1);
        let rpn_objectness = Conv2d::new(&mut layout, FEATURES, anchors_per_cell, 1, 1, 0);
        let rpn_deltas = Conv2d::new(&mut layout, FEATURES, 4 * anchors_per_cell, 1, 1, 0);
        let rpn_end = layout.len();
        let fc_hidden = Linear::new(&mut layout, FEATURES * ROI_BINS * ROI_BINS, HIDDEN);
        let fc_logits = Linear::new(&mut layout, HIDDEN, 2);
        Self {
            backbone,
            rpn_conv,
            rpn_objectness,
            rpn_deltas,
            fc_hidden,
            fc_logits,
            backbone_end,
            rpn_end,
            num_params: layout.len(),
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params];
        for conv in &self.backbone {
            conv.init(&mut params, rng, 1.0);
        }
        self.rpn_conv.init(&mut params, rng, 1.0);
        self.rpn_objectness.init(&mut params, rng, 0.1);
        self.rpn_deltas.init(&mut params, rng, 0.1);
        self.fc_hidden.init(&mut params, rng, 1.0);
        self.fc_logits.init(&mut params, rng, 0.1);
        params
    }

    pub fn backbone_forward(&self, params: &[f64], x: &FeatureMap) -> BackboneTrace {
        instrument::record_detector_forward();
        let mut input_sizes = Vec::with_capacity(self.backbone.len());
        let mut cols = Vec::with_capacity(self.backbone.len());
        let mut outputs: Vec<FeatureMap> = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let input = outputs.last().unwrap_or(x);
            input_sizes.push((input.height, input.width));
            let (mut out, c) = conv.forward(params, input);
            softplus_inplace(&mut out.data);
            cols.push(c);
            outputs.push(out);
        }
        BackboneTrace {
            input_sizes,
            cols,
            outputs,
        }
    }

    pub fn backbone_backward(
        &self,
        params: &[f64],
        trace: &BackboneTrace,
        d_features: FeatureMap,
        mut grads: Option<&mut [f64]>,
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        let mut d = d_features;
        for (l, conv) in self.backbone.iter().enumerate().rev() {
            softplus_backward(&trace.outputs[l].data, &mut d.data);
            let need_dx = l > 0 || want_input_grad;
            match conv.backward(
                params,
                trace.input_sizes[l],
                &trace.cols[l],
                &d,
                grads.as_deref_mut(),
                need_dx,
            ) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    pub fn rpn_forward(&self, params: &[f64], features: &FeatureMap) -> RpnTrace {
        let (mut hidden, hidden_cols) = self.rpn_conv.forward(params, features);
        softplus_inplace(&mut hidden.data);
        let (objectness, objectness_cols) = self.rpn_objectness.forward(params, &hidden);
        let (deltas, deltas_cols) = self.rpn_deltas.forward(params, &hidden);
        RpnTrace {
            hidden,
            hidden_cols,
            objectness_cols,
            deltas_cols,
            objectness,
            deltas,
        }
    }

    pub fn rpn_backward(
        &self,
        params: &[f64],
        features: &FeatureMap,
        trace: &RpnTrace,
        d_objectness: &FeatureMap,
        d_deltas: &FeatureMap,
        grads: &mut [f64],
    ) -> FeatureMap {
        let hw = (trace.hidden.height, trace.hidden.width);
        let mut d_hidden = self
            .rpn_objectness
            .backward(params, hw, &trace.objectness_cols, d_objectness, Some(grads), true)
            .expect("input grad requested");
        let d2 = self
            .rpn_deltas
            .backward(params, hw, &trace.deltas_cols, d_deltas, Some(grads), true)
            .expect("input grad requested");
        d_hidden.add_assign(&d2);
        softplus_backward(&trace.hidden.data, &mut d_hidden.data);
        self.rpn_conv
            .backward(
                params,
                (features.height, features.width),
                &trace.hidden_cols,
                &d_hidden,
                Some(grads),
                true,
            )
            .expect("input grad requested")
    }

    fn crop_taps(features: &FeatureMap, boxes: &[BBox]) -> Vec<[Tap; 4]> {
        let (fh, fw) = (features.height, features.width);
        let s = FEATURE_STRIDE as f64;
        let mut taps = Vec::with_capacity(boxes.len() * ROI_BINS * ROI_BINS);
        for b in boxes {
            let bin_w = b.width() / ROI_BINS as f64;
            let bin_h = b.height() / ROI_BINS as f64;
            for by in 0..ROI_BINS {
                let py = b.y_min + (by as f64 + 0.5) * bin_h;
                let fy = (py / s - 0.5).clamp(0.0, (fh - 1) as f64);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(fh - 1);
                let wy = fy - y0 as f64;
                for bx in 0..ROI_BINS {
                    let px = b.x_min + (bx as f64 + 0.5) * bin_w;
                    let fx = (px / s - 0.5).clamp(0.0, (fw - 1) as f64);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(fw - 1);
                    let wx = fx - x0 as f64;
                    taps.push([
                        (y0 * fw + x0, (1.0 - wy) * (1.0 - wx)),
                        (y0 * fw + x1, (1.0 - wy) * wx),
                        (y1 * fw + x0, wy * (1.0 - wx)),
                        (y1 * fw + x1, wy * wx),
                    ]);
                }
            }
        }
        taps
    }

    /// Fixed-size bilinear crop of every box, then the two-layer classifier.
    pub fn classify(&self, params: &[f64], features: &FeatureMap, boxes: &[BBox]) -> ClassifierTrace {
        let bins = ROI_BINS * ROI_BINS;
        let width = features.channels * bins;
        let plane = features.plane();
        let taps = Self::crop_taps(features, boxes);
        let mut crops = vec![0.0; boxes.len() * width];
        for (r, row) in crops.chunks_exact_mut(width).enumerate() {
            for c in 0..features.channels {
                let fplane = &features.data[c * plane..(c + 1) * plane];
                for b in 0..bins {
                    row[c * bins + b] = taps[r * bins + b].iter().map(|&(i, w)| w * fplane[i]).sum();
                }
            }
        }
        let rows = boxes.len();
        let mut hidden = self.fc_hidden.forward(params, &crops, rows);
        softplus_inplace(&mut hidden);
        let logits = self.fc_logits.forward(params, &hidden, rows);
        ClassifierTrace {
            taps,
            crops,
            hidden,
            logits,
            rows,
        }
    }

    /// Backpropagate logit gradients (`rows × 2`) to the feature map.
    pub fn classify_backward(
        &self,
        params: &[f64],
        features: &FeatureMap,
        trace: &ClassifierTrace,
        d_logits: &[f64],
        mut grads: Option<&mut [f64]>,
    ) -> FeatureMap {
        let rows = trace.rows;
        let mut d_hidden = self
            .fc_logits
            .backward(params, &trace.hidden, rows, d_logits, grads.as_deref_mut(), true)
            .expect("input grad requested");
        softplus_backward(&trace.hidden, &mut d_hidden);
        let d_crops = self
            .fc_hidden
            .backward(params, &trace.crops, rows, &d_hidden, grads, true)
            .expect("input grad requested");
        let bins = ROI_BINS * ROI_BINS;
        let width = features.channels * bins;
        let plane = features.plane();
        let mut d_features = FeatureMap::zeros(features.channels, features.height, features.width);
        for (r, row) in d_crops.chunks_exact(width).enumerate() {
            for c in 0..features.channels {
                let dplane = &mut d_features.data[c * plane..(c + 1) * plane];
                for b in 0..bins {
                    let g = row[c * bins + b];
                    if g != 0.0 {
                        for &(i, w) in &trace.taps[r * bins + b] {
                            dplane[i] += w * g;
                        }
                    }
                }
            }
        }
        d_features
    }
}
