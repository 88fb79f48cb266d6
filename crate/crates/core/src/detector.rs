//! The tiny detection network.
//!
//! A two-layer strided conv backbone feeds every head. Proposals are the
//! top-scoring anchors of a 1x1 objectness head; each carries a mean-pooled
//! RoI feature that goes through a shared dense trunk into the class, box
//! and rotation heads. Image-level heads (rotation for the ImgRot ablation,
//! the adversarial domain classifier) read the globally pooled map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{nms_indices, BoundingBox};
use crate::imaging::{ImageBuffer, CHANNELS};
use crate::numerics::{Bound, Float, Gradients, Parameters, Tape, Tensor};
use crate::scenegen::NUM_CLASSES;

/// Background is the last class index.
pub const BACKGROUND: usize = NUM_CLASSES;
pub const NUM_OUTPUTS: usize = NUM_CLASSES + 1;
pub const FEATURE_STRIDE: usize = 4;
pub const FEATURE_DIM: usize = 16;
pub const TRUNK_DIM: usize = 32;
pub const ANCHOR_SIZES: [f64; 3] = [12.0, 20.0, 32.0];
const CONV1_DIM: usize = 8;
const DOMAIN_HIDDEN: usize = 8;
/// `exp` clamp when decoding sizes.
const MAX_LOG_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    obj_w: usize,
    obj_b: usize,
    trunk_w: usize,
    trunk_b: usize,
    cls_w: usize,
    cls_b: usize,
    box_w: usize,
    box_b: usize,
    rot_w: usize,
    rot_b: usize,
    img_rot_w: usize,
    img_rot_b: usize,
    dom1_w: usize,
    dom1_b: usize,
    dom2_w: usize,
    dom2_b: usize,
}

/// Parameter table: `(name, shape, fan_in)`; fan-in 0 marks a bias.
const PARAM_TABLE: [(&str, &[usize], usize); 20] = [
    ("backbone.conv1.weight", &[3, 3, CHANNELS, CONV1_DIM], 9 * CHANNELS),
    ("backbone.conv1.bias", &[CONV1_DIM], 0),
    ("backbone.conv2.weight", &[3, 3, CONV1_DIM, FEATURE_DIM], 9 * CONV1_DIM),
    ("backbone.conv2.bias", &[FEATURE_DIM], 0),
    ("rpn.objectness.weight", &[FEATURE_DIM, 3], FEATURE_DIM),
    ("rpn.objectness.bias", &[3], 0),
    ("roi.trunk.weight", &[FEATURE_DIM, TRUNK_DIM], FEATURE_DIM),
    ("roi.trunk.bias", &[TRUNK_DIM], 0),
    ("roi.cls.weight", &[TRUNK_DIM, NUM_OUTPUTS], TRUNK_DIM),
    ("roi.cls.bias", &[NUM_OUTPUTS], 0),
    ("roi.box.weight", &[TRUNK_DIM, 4], TRUNK_DIM),
    ("roi.box.bias", &[4], 0),
    ("roi.rotation.weight", &[TRUNK_DIM, 4], TRUNK_DIM),
    ("roi.rotation.bias", &[4], 0),
    ("image.rotation.weight", &[FEATURE_DIM, 4], FEATURE_DIM),
    ("image.rotation.bias", &[4], 0),
    ("domain.fc1.weight", &[FEATURE_DIM, DOMAIN_HIDDEN], FEATURE_DIM),
    ("domain.fc1.bias", &[DOMAIN_HIDDEN], 0),
    ("domain.fc2.weight", &[DOMAIN_HIDDEN, 2], DOMAIN_HIDDEN),
    ("domain.fc2.bias", &[2], 0),
];

const LAYOUT: Layout = Layout {
    conv1_w: 0,
    conv1_b: 1,
    conv2_w: 2,
    conv2_b: 3,
    obj_w: 4,
    obj_b: 5,
    trunk_w: 6,
    trunk_b: 7,
    cls_w: 8,
    cls_b: 9,
    box_w: 10,
    box_b: 11,
    rot_w: 12,
    rot_b: 13,
    img_rot_w: 14,
    img_rot_b: 15,
    dom1_w: 16,
    dom1_b: 17,
    dom2_w: 18,
    dom2_b: 19,
};

/// Groups of parameters, used to zero or inspect one head at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Objectness,
    Trunk,
    Classifier,
    BoxRegressor,
    RotationHead,
    ImageRotationHead,
    DomainHead,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone.",
            ParamGroup::Objectness => "rpn.",
            ParamGroup::Trunk => "roi.trunk.",
            ParamGroup::Classifier => "roi.cls.",
            ParamGroup::BoxRegressor => "roi.box.",
            ParamGroup::RotationHead => "roi.rotation.",
            ParamGroup::ImageRotationHead => "image.rotation.",
            ParamGroup::DomainHead => "domain.",
        }
    }
}

/// Learnable state of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    params: Parameters,
}

impl Detector {
    /// He-normal weights, zero biases.
    pub fn init(rng: &mut impl Rng) -> Self {
        let mut params = Parameters::new();
        for (name, shape, fan_in) in PARAM_TABLE {
            let n: usize = shape.iter().product();
            let values = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..n).map(|_| normal.sample(rng) as Float).collect()
            };
            params.add(name, shape, values);
        }
        Self { params }
    }

    pub fn zeroed() -> Self {
        let mut params = Parameters::new();
        for (name, shape, _) in PARAM_TABLE {
            params.add(name, shape, vec![0.0; shape.iter().product()]);
        }
        Self { params }
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_parameters(params: Parameters) -> Option<Self> {
        params.same_layout(&Self::zeroed().params).then_some(Self { params })
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn zero_group(&mut self, group: ParamGroup) {
        for i in 0..self.params.len() {
            if self.params.name(i).starts_with(group.prefix()) {
                self.params.values_mut(i).fill(0.0);
            }
        }
    }

    /// Opens a forward pass whose parameters are differentiable.
    pub fn session(&self) -> Session<'_> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        Session { model: self, tape, bound }
    }

    /// Opens a forward pass with constant parameters.
    pub fn inference_session(&self) -> Session<'_> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        Session { model: self, tape, bound }
    }

    /// Runs the full inference path on one image.
    pub fn detect(&self, img: &ImageBuffer, top_k: usize, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
        self.inference_session().detect(img, top_k, score_threshold, nms_iou)
    }
}

/// Backbone output together with the geometry needed to map cells back to
/// image coordinates.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub rows: usize,
    pub cols: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl FeatureMap {
    /// Center of a feature cell in image coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = FEATURE_STRIDE as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    pub fn anchor_count(&self) -> usize {
        self.rows * self.cols * ANCHOR_SIZES.len()
    }

    /// Unclipped anchor `index`; anchors are ordered cell-major in raster
    /// order, then by size.
    pub fn anchor(&self, index: usize) -> BoundingBox {
        let cell = index / ANCHOR_SIZES.len();
        let size = ANCHOR_SIZES[index % ANCHOR_SIZES.len()];
        let (cx, cy) = self.cell_center(cell / self.cols, cell % self.cols);
        BoundingBox::from_center(cx, cy, size, size)
    }

    pub fn clip(&self, b: &BoundingBox) -> BoundingBox {
        b.clip(self.image_width as f64, self.image_height as f64)
    }

    /// Flat indices (raster order) of cells whose centers fall inside `b`;
    /// falls back to the cell under the box center.
    pub fn cells_in(&self, b: &BoundingBox) -> Vec<usize> {
        let mut cells = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (x, y) = self.cell_center(r, c);
                if b.contains_point(x, y) {
                    cells.push(r * self.cols + c);
                }
            }
        }
        if cells.is_empty() {
            let (cx, cy) = b.center();
            let s = FEATURE_STRIDE as f64;
            let c = ((cx / s).floor().max(0.0) as usize).min(self.cols - 1);
            let r = ((cy / s).floor().max(0.0) as usize).min(self.rows - 1);
            cells.push(r * self.cols + c);
        }
        cells
    }
}

/// Objectness logits of every anchor.
#[derive(Debug, Clone, Copy)]
pub struct AnchorScores {
    /// `[anchor_count]`
    pub logits: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    /// Clipped anchor box in image coordinates.
    pub bbox: BoundingBox,
    /// Unclipped anchor; reference frame of the box deltas.
    pub anchor: BoundingBox,
    pub anchor_index: usize,
    pub objectness: f64,
    /// `[FEATURE_DIM]` mean-pooled RoI feature on the session tape.
    pub roi_feature: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Standard `(dx, dy, dw, dh)` offsets of `gt` relative to `anchor`.
pub fn encode_box(gt: &BoundingBox, anchor: &BoundingBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(gx - ax) / aw, (gy - ay) / ah, (gt.width() / aw).ln(), (gt.height() / ah).ln()]
}

pub fn decode_box(deltas: [f64; 4], anchor: &BoundingBox) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + deltas[0] * aw;
    let cy = ay + deltas[1] * ah;
    let w = aw * deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = ah * deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BoundingBox::from_center(cx, cy, w, h)
}

/// One forward pass: a tape plus the bound parameters of a [`Detector`].
pub struct Session<'m> {
    model: &'m Detector,
    pub tape: Tape,
    bound: Bound,
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m Detector {
        self.model
    }

    fn p(&self, index: usize) -> Tensor {
        self.bound.get(index)
    }

    /// Gradients per parameter (zeros where unreached); clears the tape.
    pub fn backward(&mut self, loss: Tensor) -> Vec<Vec<Float>> {
        let grads: Gradients = self.tape.backward(loss);
        self.model.params.collect_grads(&self.bound, &grads)
    }

    fn dense(&mut self, x: Tensor, w: usize, b: usize) -> Tensor {
        let y = self.tape.matmul(x, self.p(w));
        self.tape.add(y, self.p(b))
    }

    /// `H x W x 3 -> H/4 x W/4 x 16`.
    pub fn extract_features(&mut self, img: &ImageBuffer) -> FeatureMap {
        let (h, w) = (img.height(), img.width());
        assert!(
            h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0,
            "image dimensions {h}x{w} must be divisible by {FEATURE_STRIDE}"
        );
        let x = self.tape.constant(&[h, w, CHANNELS], img.data().iter().map(|&v| v as Float).collect());
        let l = LAYOUT;
        let c1 = self.tape.conv2d(x, self.p(l.conv1_w), self.p(l.conv1_b), 2);
        let a1 = self.tape.relu(c1);
        let c2 = self.tape.conv2d(a1, self.p(l.conv2_w), self.p(l.conv2_b), 2);
        let tensor = self.tape.relu(c2);
        let shape = self.tape.shape(tensor);
        FeatureMap { tensor, rows: shape[0], cols: shape[1], image_width: w, image_height: h }
    }

    pub fn anchor_scores(&mut self, fm: &FeatureMap) -> AnchorScores {
        let cells = fm.rows * fm.cols;
        let flat = self.tape.reshape(fm.tensor, &[cells, FEATURE_DIM]);
        let scores = self.dense(flat, LAYOUT.obj_w, LAYOUT.obj_b);
        AnchorScores { logits: self.tape.reshape(scores, &[fm.anchor_count()]) }
    }

    /// Mean of the feature cells whose centers fall inside `b` (clipped).
    pub fn roi_feature(&mut self, fm: &FeatureMap, b: &BoundingBox) -> Tensor {
        let cells = fm.cells_in(&fm.clip(b));
        self.tape.region_mean(fm.tensor, &cells)
    }

    /// Proposal for one anchor, pooling at the clipped anchor box.
    pub fn proposal_for_anchor(&mut self, fm: &FeatureMap, scores: &AnchorScores, index: usize) -> Proposal {
        let anchor = fm.anchor(index);
        let bbox = fm.clip(&anchor);
        let logit = self.tape.value(scores.logits)[index] as f64;
        let roi_feature = self.roi_feature(fm, &bbox);
        Proposal { bbox, anchor, anchor_index: index, objectness: 1.0 / (1.0 + (-logit).exp()), roi_feature }
    }

    /// Top-`k` anchors by objectness, ties broken by raster order.
    pub fn propose_from(&mut self, fm: &FeatureMap, scores: &AnchorScores, top_k: usize) -> Vec<Proposal> {
        assert!(top_k >= 1, "top_k must be at least 1");
        let logits = self.tape.value(scores.logits);
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        order.truncate(top_k);
        order.into_iter().map(|i| self.proposal_for_anchor(fm, scores, i)).collect()
    }

    pub fn propose(&mut self, fm: &FeatureMap, top_k: usize) -> Vec<Proposal> {
        let scores = self.anchor_scores(fm);
        self.propose_from(fm, &scores, top_k)
    }

    /// Proposals at fixed boxes (e.g. transferred from another image).
    pub fn pool_at(&mut self, fm: &FeatureMap, proposals: &[Proposal]) -> Vec<Tensor> {
        proposals.iter().map(|p| self.roi_feature(fm, &p.bbox)).collect()
    }

    /// Dense trunk over stacked RoI features: `[N, TRUNK_DIM]`.
    pub fn trunk(&mut self, rois: &[Tensor]) -> Tensor {
        let x = self.tape.concat(rois);
        let h = self.dense(x, LAYOUT.trunk_w, LAYOUT.trunk_b);
        self.tape.relu(h)
    }

    /// `[N, C + 1]` logits.
    pub fn class_logits(&mut self, trunk: Tensor) -> Tensor {
        self.dense(trunk, LAYOUT.cls_w, LAYOUT.cls_b)
    }

    /// `[N, 4]` box deltas.
    pub fn box_deltas(&mut self, trunk: Tensor) -> Tensor {
        self.dense(trunk, LAYOUT.box_w, LAYOUT.box_b)
    }

    /// `[N, 4]` per-proposal rotation logits.
    pub fn rotation_logits(&mut self, trunk: Tensor) -> Tensor {
        self.dense(trunk, LAYOUT.rot_w, LAYOUT.rot_b)
    }

    /// `[N, C + 1]` class probabilities per proposal.
    pub fn classify_proposals(&mut self, proposals: &[Proposal]) -> Tensor {
        let rois: Vec<Tensor> = proposals.iter().map(|p| p.roi_feature).collect();
        let t = self.trunk(&rois);
        let logits = self.class_logits(t);
        self.tape.softmax(logits)
    }

    /// `[N, 4]` rotation probabilities per proposal.
    pub fn predict_rotation(&mut self, proposals: &[Proposal]) -> Tensor {
        let rois: Vec<Tensor> = proposals.iter().map(|p| p.roi_feature).collect();
        let t = self.trunk(&rois);
        let logits = self.rotation_logits(t);
        self.tape.softmax(logits)
    }

    /// `[1, 4]` whole-image rotation logits.
    pub fn image_rotation_logits(&mut self, fm: &FeatureMap) -> Tensor {
        let g = self.tape.global_mean(fm.tensor);
        let g = self.tape.reshape(g, &[1, FEATURE_DIM]);
        self.dense(g, LAYOUT.img_rot_w, LAYOUT.img_rot_b)
    }

    pub fn predict_rotation_image(&mut self, fm: &FeatureMap) -> Tensor {
        let logits = self.image_rotation_logits(fm);
        self.tape.softmax(logits)
    }

    /// `[1, 2]` domain logits behind a gradient-reversal node of strength `beta`.
    pub fn domain_logits(&mut self, fm: &FeatureMap, beta: f64) -> Tensor {
        let g = self.tape.global_mean(fm.tensor);
        let g = self.tape.grad_reverse(g, beta as Float);
        let g = self.tape.reshape(g, &[1, FEATURE_DIM]);
        let h = self.dense(g, LAYOUT.dom1_w, LAYOUT.dom1_b);
        let h = self.tape.relu(h);
        self.dense(h, LAYOUT.dom2_w, LAYOUT.dom2_b)
    }

    pub fn classify_domain(&mut self, fm: &FeatureMap, beta: f64) -> Tensor {
        let logits = self.domain_logits(fm, beta);
        self.tape.softmax(logits)
    }

    /// Proposals, classification, box decoding, thresholding and per-class NMS.
    pub fn detect(&mut self, img: &ImageBuffer, top_k: usize, score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
        let fm = self.extract_features(img);
        let proposals = self.propose(&fm, top_k);
        let rois: Vec<Tensor> = proposals.iter().map(|p| p.roi_feature).collect();
        let t = self.trunk(&rois);
        let logits = self.class_logits(t);
        let probs = self.tape.softmax(logits);
        let deltas = self.box_deltas(t);
        let (probs, deltas) = (self.tape.value(probs).to_vec(), self.tape.value(deltas).to_vec());
        let (w, h) = (img.width() as f64, img.height() as f64);

        let mut per_class: Vec<Vec<(BoundingBox, f64)>> = vec![Vec::new(); NUM_CLASSES];
        for (i, p) in proposals.iter().enumerate() {
            let d = [0, 1, 2, 3].map(|j| deltas[i * 4 + j] as f64);
            let bbox = decode_box(d, &p.anchor).clip(w, h);
            for (c, dets) in per_class.iter_mut().enumerate() {
                let conf = probs[i * NUM_OUTPUTS + c] as f64;
                if conf >= score_threshold && conf > 0.0 {
                    dets.push((bbox, conf));
                }
            }
        }
        let mut out = Vec::new();
        for (class_id, dets) in per_class.iter().enumerate() {
            for k in nms_indices(dets, nms_iou) {
                out.push(Detection { bbox: dets[k].0, class_id, confidence: dets[k].1 });
            }
        }
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_model(seed: u64) -> Detector {
        Detector::init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    fn test_image(seed: u64) -> ImageBuffer {
        crate::scenegen::generate_scene(seed, crate::scenegen::Domain::Source).unwrap().image
    }

    #[test]
    fn feature_map_shape() {
        let m = random_model(0);
        let mut s = m.session();
        let fm = s.extract_features(&test_image(0));
        assert_eq!(s.tape.shape(fm.tensor), &[16, 16, 16]);
        assert_eq!(fm.anchor_count(), 768);
    }

    #[test]
    fn identical_images_give_identical_features() {
        let m = random_model(1);
        let img = test_image(3);
        let mut s = m.session();
        let a = s.extract_features(&img);
        let b = s.extract_features(&img);
        assert_eq!(s.tape.value(a.tensor), s.tape.value(b.tensor));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut m = random_model(2);
        for name in ["backbone.conv1.bias", "backbone.conv2.bias"] {
            let i = m.parameters().index_of(name).unwrap();
            m.parameters_mut().values_mut(i).fill(0.0);
        }
        let mut s = m.session();
        let fm = s.extract_features(&ImageBuffer::filled(64, 64, [0.0; 3]));
        assert!(s.tape.value(fm.tensor).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn proposals_sorted_and_counted() {
        let m = random_model(4);
        let mut s = m.session();
        let fm = s.extract_features(&test_image(1));
        let scores = s.anchor_scores(&fm);
        let best = s.tape.value(scores.logits).iter().cloned().fold(Float::MIN, Float::max);
        let one = s.propose_from(&fm, &scores, 1);
        assert_eq!(one.len(), 1);
        assert_eq!(s.tape.value(scores.logits)[one[0].anchor_index], best);
        let props = s.propose_from(&fm, &scores, 32);
        assert_eq!(props.len(), 32);
        assert!(props.windows(2).all(|w| w[0].objectness >= w[1].objectness));
        let all = s.propose_from(&fm, &scores, 5000);
        assert_eq!(all.len(), 768);
        for p in &all {
            assert!(p.bbox.is_within(64.0, 64.0));
            assert!((0.0..=1.0).contains(&p.objectness));
        }
    }

    #[test]
    fn corner_anchor_is_clipped() {
        let m = random_model(5);
        let mut s = m.session();
        let fm = s.extract_features(&test_image(2));
        let scores = s.anchor_scores(&fm);
        // largest anchor of cell (0, 0)
        let p = s.proposal_for_anchor(&fm, &scores, 2);
        assert_eq!(p.anchor.to_array(), [-14.0, -14.0, 18.0, 18.0]);
        assert_eq!(p.bbox.to_array(), [0.0, 0.0, 18.0, 18.0]);
    }

    #[test]
    fn full_image_roi_equals_global_mean() {
        let m = random_model(6);
        let mut s = m.session();
        let fm = s.extract_features(&test_image(4));
        let whole = BoundingBox::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let roi = s.roi_feature(&fm, &whole);
        let g = s.tape.global_mean(fm.tensor);
        assert_eq!(s.tape.value(roi), s.tape.value(g));
    }

    #[test]
    fn box_coding_round_trip() {
        let anchor = BoundingBox::from_center(30.0, 18.0, 20.0, 20.0);
        let gt = BoundingBox::new(21.5, 9.0, 44.0, 27.25).unwrap();
        let back = decode_box(encode_box(&gt, &anchor), &anchor);
        for (a, b) in back.to_array().iter().zip(gt.to_array()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_heads_are_uniform() {
        let mut m = random_model(7);
        for g in [ParamGroup::Classifier, ParamGroup::RotationHead, ParamGroup::ImageRotationHead, ParamGroup::DomainHead] {
            m.zero_group(g);
        }
        let mut s = m.session();
        let fm = s.extract_features(&test_image(5));
        let props = s.propose(&fm, 8);
        let cls = s.classify_proposals(&props);
        assert!(s.tape.value(cls).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let rot = s.predict_rotation(&props);
        assert!(s.tape.value(rot).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let irot = s.predict_rotation_image(&fm);
        assert_eq!(s.tape.value(irot), &[0.25; 4]);
        let dom = s.classify_domain(&fm, 1.0);
        assert_eq!(s.tape.value(dom), &[0.5, 0.5]);
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let m = random_model(8);
        let mut s = m.session();
        let fm = s.extract_features(&test_image(6));
        let props = s.propose(&fm, 16);
        let cls = s.classify_proposals(&props);
        for row in s.tape.value(cls).chunks(NUM_OUTPUTS) {
            assert!((row.iter().sum::<Float>() - 1.0).abs() < 1e3 * Float::EPSILON);
        }
        let rot = s.predict_rotation(&props);
        let again = s.predict_rotation(&props);
        assert_eq!(s.tape.value(rot), s.tape.value(again));
        let a = s.classify_domain(&fm, 0.0);
        let b = s.classify_domain(&fm, 1.0);
        assert_eq!(s.tape.value(a), s.tape.value(b));
    }

    #[test]
    fn identical_roi_features_identical_rows() {
        let m = random_model(9);
        let mut s = m.session();
        let fm = s.extract_features(&test_image(7));
        let props = s.propose(&fm, 1);
        let twice = [props[0], props[0]];
        let cls = s.classify_proposals(&twice);
        let v = s.tape.value(cls);
        assert_eq!(v[..NUM_OUTPUTS], v[NUM_OUTPUTS..]);
    }

    #[test]
    fn detect_contracts() {
        let zero = Detector::zeroed();
        assert!(zero.detect(&test_image(8), 32, 0.9, 0.5).is_empty());
        let m = random_model(10);
        let img = test_image(9);
        let dets = m.detect(&img, 8, 0.0, 1.0);
        assert!(dets.len() <= 8 * NUM_CLASSES);
        for d in m.detect(&img, 32, 0.0, 0.5) {
            assert!(d.bbox.is_within(64.0, 64.0));
            assert!(d.class_id < NUM_CLASSES);
            assert!((0.0..=1.0).contains(&d.confidence));
        }
    }
}
