//! Loss terms of the training objective.
//!
//! `total = l_det + alpha * l_uda + lambda1 * l_rp + lambda2 * l_cl`

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{encode_box, FeatureMap, Proposal, Session, BACKGROUND, NUM_OUTPUTS};
use crate::error::{Error, Result};
use crate::geometry::{iou, rotate_box, QuarterTurn};
use crate::imaging::{augment, AugmentationPolicy, ImageBuffer};
use crate::numerics::{Float, Tensor};
use crate::scenegen::Annotation;

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.3;
pub const NEGATIVES_PER_POSITIVE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, lambda1: 0.1, lambda2: 0.1, sigma: 0.8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("weights.{name} must be a non-negative number")));
            }
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config("weights.sigma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_uda: f64,
    pub l_rp: f64,
    pub l_cl: f64,
    pub total: f64,
    pub cl_accept_fraction: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_det, self.l_uda, self.l_rp, self.l_cl, self.total].iter().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l_det={} l_uda={} l_rp={} l_cl={} total={} accept={}",
            self.l_det, self.l_uda, self.l_rp, self.l_cl, self.total, self.cl_accept_fraction
        )
    }
}

/// Which features the rotation angle is predicted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationMode {
    /// per region proposal
    PropRot,
    /// from the globally pooled image feature
    ImgRot,
}

/// The three parts of the supervised detection loss.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub objectness: Tensor,
    pub classification: Tensor,
    pub regression: Tensor,
    pub total: Tensor,
}

/// Per-anchor training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignored,
}

/// Labels every anchor: positive at IoU >= 0.5 with some GT, negative below
/// 0.3, ignored in between. Each GT's best anchor is forced positive so
/// small objects always get a match.
pub fn match_anchors(fm: &FeatureMap, annotations: &[Annotation]) -> Vec<AnchorLabel> {
    let n = fm.anchor_count();
    let boxes: Vec<_> = (0..n).map(|i| fm.clip(&fm.anchor(i))).collect();
    let mut labels = Vec::with_capacity(n);
    let mut best_for_gt = vec![(0usize, -1.0f64); annotations.len()];
    for (i, b) in boxes.iter().enumerate() {
        let mut best = (0usize, 0.0f64);
        for (g, a) in annotations.iter().enumerate() {
            let v = iou(b, &a.bbox);
            if v > best.1 {
                best = (g, v);
            }
            if v > best_for_gt[g].1 {
                best_for_gt[g] = (i, v);
            }
        }
        labels.push(if best.1 >= POSITIVE_IOU {
            AnchorLabel::Positive { gt: best.0 }
        } else if best.1 < NEGATIVE_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        });
    }
    for (g, &(i, v)) in best_for_gt.iter().enumerate() {
        if v > 0.0 && !matches!(labels[i], AnchorLabel::Positive { .. }) {
            labels[i] = AnchorLabel::Positive { gt: g };
        }
    }
    labels
}

/// Mean cross-entropy of `[N, K]` logits against class indices.
pub fn cross_entropy(session: &mut Session<'_>, logits: Tensor, targets: &[usize]) -> Tensor {
    let k = *session.tape.shape(logits).last().expect("logits need a class axis");
    let logp = session.tape.log_softmax(logits);
    let flat = session.tape.reshape(logp, &[targets.len() * k]);
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * k + t).collect();
    let picked = session.tape.gather(flat, &idx);
    let m = session.tape.mean(picked);
    session.tape.scale(m, -1.0)
}

/// Supervised loss on a labeled source image: objectness BCE over labeled
/// anchors, classification CE over positives plus sampled negatives (at most
/// three per positive), and smooth-L1 box deltas over positives.
pub fn detection_loss(
    session: &mut Session<'_>,
    fm: &FeatureMap,
    annotations: &[Annotation],
    rng: &mut impl Rng,
) -> Result<DetectionLoss> {
    if annotations.is_empty() {
        return Err(Error::Dataset("detection loss needs at least one annotation".into()));
    }
    let labels = match_anchors(fm, annotations);
    let scores = session.anchor_scores(fm);

    let mut labeled = Vec::new();
    let mut targets = Vec::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match *l {
            AnchorLabel::Positive { gt } => {
                labeled.push(i);
                targets.push(1.0);
                positives.push((i, gt));
            }
            AnchorLabel::Negative => {
                labeled.push(i);
                targets.push(0.0);
                negatives.push(i);
            }
            AnchorLabel::Ignored => {}
        }
    }
    if positives.is_empty() {
        return Err(Error::Dataset("no anchor overlaps any annotation".into()));
    }
    let picked = session.tape.gather(scores.logits, &labeled);
    let bce = session.tape.bce_with_logits(picked, &targets);
    let objectness = session.tape.mean(bce);

    let n_neg = negatives.len().min(NEGATIVES_PER_POSITIVE * positives.len());
    let mut sampled: Vec<usize> = sample(rng, negatives.len(), n_neg).into_iter().map(|j| negatives[j]).collect();
    sampled.sort_unstable();

    let mut rois = Vec::new();
    let mut cls_targets = Vec::new();
    for &(i, gt) in &positives {
        rois.push(session.proposal_for_anchor(fm, &scores, i).roi_feature);
        cls_targets.push(annotations[gt].class_id);
    }
    for &i in &sampled {
        rois.push(session.proposal_for_anchor(fm, &scores, i).roi_feature);
        cls_targets.push(BACKGROUND);
    }
    let trunk = session.trunk(&rois);
    let logits = session.class_logits(trunk);
    let classification = cross_entropy(session, logits, &cls_targets);

    let n_pos = positives.len();
    let deltas = session.box_deltas(trunk);
    let len = session.tape.value(deltas).len();
    let flat = session.tape.reshape(deltas, &[len]);
    // positives occupy the first rows
    let pos_deltas = session.tape.gather(flat, &(0..n_pos * 4).collect::<Vec<_>>());
    let mut box_targets = Vec::with_capacity(n_pos * 4);
    for &(i, gt) in &positives {
        box_targets.extend(encode_box(&annotations[gt].bbox, &fm.anchor(i)).map(|v| v as Float));
    }
    let target = session.tape.constant(&[n_pos * 4], box_targets);
    let diff = session.tape.sub(pos_deltas, target);
    let sl1 = session.tape.smooth_l1(diff);
    let sl1_sum = session.tape.sum(sl1);
    let regression = session.tape.scale(sl1_sum, 1.0 / n_pos as Float);

    let partial = session.tape.add(objectness, classification);
    let total = session.tape.add(partial, regression);
    Ok(DetectionLoss { objectness, classification, regression, total })
}

/// Domain-classification cross-entropy (source = 0, target = 1) through
/// gradient reversal, averaged over the two images.
pub fn uda_loss(session: &mut Session<'_>, source: &FeatureMap, target: &FeatureMap, beta: f64) -> Tensor {
    let ls = session.domain_logits(source, beta);
    let lt = session.domain_logits(target, beta);
    let logits = session.tape.concat(&[ls, lt]);
    cross_entropy(session, logits, &[0, 1])
}

/// One rotated image and the turn that produced it.
pub struct RotatedView<'a> {
    pub image: &'a ImageBuffer,
    pub turn: QuarterTurn,
}

/// Rotation cross-entropy of one already-rotated image.
pub fn rotation_term(
    session: &mut Session<'_>,
    view: &RotatedView<'_>,
    mode: RotationMode,
    top_k: usize,
) -> Tensor {
    let fm = session.extract_features(view.image);
    rotation_term_from_features(session, &fm, view.turn, mode, top_k)
}

pub fn rotation_term_from_features(
    session: &mut Session<'_>,
    fm: &FeatureMap,
    turn: QuarterTurn,
    mode: RotationMode,
    top_k: usize,
) -> Tensor {
    match mode {
        RotationMode::PropRot => {
            let props = session.propose(fm, top_k);
            let rois: Vec<Tensor> = props.iter().map(|p| p.roi_feature).collect();
            let trunk = session.trunk(&rois);
            let logits = session.rotation_logits(trunk);
            cross_entropy(session, logits, &vec![turn.index(); props.len()])
        }
        RotationMode::ImgRot => {
            let logits = session.image_rotation_logits(fm);
            cross_entropy(session, logits, &[turn.index()])
        }
    }
}

/// PropRot term with proposals taken from the unrotated image: the boxes
/// are rotated by `turn` and pooled from the rotated image's features.
pub fn rotation_term_transferred(
    session: &mut Session<'_>,
    original: &FeatureMap,
    rotated: &FeatureMap,
    turn: QuarterTurn,
    top_k: usize,
) -> Tensor {
    let (w, h) = (original.image_width as f64, original.image_height as f64);
    let props = session.propose(original, top_k);
    let rois: Vec<Tensor> = props
        .iter()
        .map(|p| {
            let b = rotate_box(&p.bbox, turn, w, h).expect("clipped proposals lie inside the image");
            session.roi_feature(rotated, &b)
        })
        .collect();
    let trunk = session.trunk(&rois);
    let logits = session.rotation_logits(trunk);
    cross_entropy(session, logits, &vec![turn.index(); props.len()])
}

/// Mean of the per-domain rotation terms (one view per domain, proposals
/// extracted from the rotated images).
pub fn rotation_loss(
    session: &mut Session<'_>,
    views: &[RotatedView<'_>],
    mode: RotationMode,
    top_k: usize,
) -> Tensor {
    assert!(!views.is_empty(), "rotation_loss needs at least one view");
    let terms: Vec<Tensor> = views.iter().map(|v| rotation_term(session, v, mode, top_k)).collect();
    mean_of(session, &terms)
}

/// Mean of scalar terms.
pub fn mean_of(session: &mut Session<'_>, terms: &[Tensor]) -> Tensor {
    let rows: Vec<Tensor> = terms.iter().map(|&t| session.tape.reshape(t, &[1])).collect();
    let stacked = session.tape.concat(&rows);
    session.tape.mean(stacked)
}

/// Consistency term of one image plus the fraction of proposals that
/// passed the confidence gate.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyTerm {
    pub loss: Tensor,
    pub accept_fraction: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[Float]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Consistency loss given pseudo-label probabilities `probs` (`[N, C + 1]`,
/// treated as constants) for `proposals` and the augmented image's features.
///
/// `loss = 1/N * sum_i [max p_i >= sigma] * -log p_hat_i[argmax p_i]`
pub fn consistency_from_pseudo_labels(
    session: &mut Session<'_>,
    proposals: &[Proposal],
    probs: &[Float],
    augmented: &FeatureMap,
    sigma: f64,
) -> ConsistencyTerm {
    let n = proposals.len();
    assert_eq!(probs.len(), n * NUM_OUTPUTS);
    let mut gated = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in probs.chunks(NUM_OUTPUTS).enumerate() {
        let c = argmax(row);
        if row[c] as f64 >= sigma {
            gated.push(i);
            labels.push(c);
        }
    }
    let accept_fraction = if n == 0 { 0.0 } else { gated.len() as f64 / n as f64 };
    if gated.is_empty() {
        return ConsistencyTerm { loss: session.tape.scalar_constant(0.0), accept_fraction };
    }
    let kept: Vec<Proposal> = gated.iter().map(|&i| proposals[i]).collect();
    let rois = session.pool_at(augmented, &kept);
    let trunk = session.trunk(&rois);
    let logits = session.class_logits(trunk);
    let logp = session.tape.log_softmax(logits);
    let flat = session.tape.reshape(logp, &[kept.len() * NUM_OUTPUTS]);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(j, &c)| j * NUM_OUTPUTS + c).collect();
    let picked = session.tape.gather(flat, &idx);
    let s = session.tape.sum(picked);
    let loss = session.tape.scale(s, -1.0 / n as Float);
    ConsistencyTerm { loss, accept_fraction }
}

/// Full per-image consistency term: proposals and pseudo-labels from the
/// original image (values only), predictions at the same boxes of
/// `augment(img, policy, seed)`.
pub fn consistency_loss_one_image(
    session: &mut Session<'_>,
    img: &ImageBuffer,
    original: Option<&FeatureMap>,
    policy: &AugmentationPolicy,
    seed: u64,
    sigma: f64,
    top_k: usize,
) -> ConsistencyTerm {
    let fm = match original {
        Some(fm) => *fm,
        None => session.extract_features(img),
    };
    let proposals = session.propose(&fm, top_k);
    let probs_t = session.classify_proposals(&proposals);
    let probs = session.tape.value(probs_t).to_vec();
    let augmented_img = augment(img, policy, seed);
    let augmented = session.extract_features(&augmented_img);
    consistency_from_pseudo_labels(session, &proposals, &probs, &augmented, sigma)
}

/// Mean of per-domain consistency terms.
pub fn consistency_loss(session: &mut Session<'_>, terms: &[ConsistencyTerm]) -> (Tensor, f64) {
    assert!(!terms.is_empty());
    let losses: Vec<Tensor> = terms.iter().map(|t| t.loss).collect();
    let accept = terms.iter().map(|t| t.accept_fraction).sum::<f64>() / terms.len() as f64;
    (mean_of(session, &losses), accept)
}

/// Present terms of the objective; `None` means the task is disabled.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub det: Tensor,
    pub uda: Option<Tensor>,
    pub rp: Option<Tensor>,
    pub cl: Option<(Tensor, f64)>,
}

/// Weighted sum of the present terms and the scalar breakdown.
pub fn total_loss(session: &mut Session<'_>, terms: &LossTerms, weights: &LossWeights) -> (Tensor, LossBreakdown) {
    let mut b = LossBreakdown { l_det: session.tape.item(terms.det) as f64, ..Default::default() };
    let mut total = terms.det;
    if let Some(t) = terms.uda {
        b.l_uda = session.tape.item(t) as f64;
        let w = session.tape.scale(t, weights.alpha as Float);
        total = session.tape.add(total, w);
    }
    if let Some(t) = terms.rp {
        b.l_rp = session.tape.item(t) as f64;
        let w = session.tape.scale(t, weights.lambda1 as Float);
        total = session.tape.add(total, w);
    }
    if let Some((t, accept)) = terms.cl {
        b.l_cl = session.tape.item(t) as f64;
        b.cl_accept_fraction = accept;
        let w = session.tape.scale(t, weights.lambda2 as Float);
        total = session.tape.add(total, w);
    }
    b.total = session.tape.item(total) as f64;
    (total, b)
}
