//! PASCAL-VOC style evaluation: greedy IoU >= 0.5 matching and all-points
//! interpolated average precision per class.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::scenegen::{load_index, CLASS_NAMES, NUM_CLASSES};

pub const MATCH_IOU: f64 = 0.5;

/// One line of a predictions file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// A detection of one class in the ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Ground-truth boxes of one class, per image.
pub type ClassGroundTruth = HashMap<u64, Vec<BoundingBox>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// true-positive flag per detection, in ranked order
    pub true_positive: Vec<bool>,
    pub gt_count: usize,
}

/// Ranks by descending confidence; ties by image id, then input order.
pub fn rank(dets: &[RankedDetection]) -> Vec<RankedDetection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.image_id.cmp(&b.image_id)));
    sorted
}

/// Greedy matching of already-ranked detections: each takes the GT with the
/// highest IoU in its image; a hit at IoU >= 0.5 on an unclaimed GT is a
/// true positive, anything else a false positive.
pub fn match_ranked(ranked: &[RankedDetection], gts: &ClassGroundTruth) -> MatchResult {
    let gt_count = gts.values().map(Vec::len).sum();
    let mut claimed: HashMap<u64, Vec<bool>> =
        gts.iter().map(|(&id, boxes)| (id, vec![false; boxes.len()])).collect();
    let true_positive = ranked
        .iter()
        .map(|d| {
            let Some(boxes) = gts.get(&d.image_id) else { return false };
            let best = boxes
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= MATCH_IOU => {
                    let flags = claimed.get_mut(&d.image_id).unwrap();
                    !std::mem::replace(&mut flags[j], true)
                }
                _ => false,
            }
        })
        .collect();
    MatchResult { true_positive, gt_count }
}

/// Area under the running-max precision envelope. `None` without GT.
pub fn average_precision_from_matches(m: &MatchResult) -> Option<f64> {
    if m.gt_count == 0 {
        return None;
    }
    let n = m.true_positive.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in m.true_positive.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / m.gt_count as f64);
    }
    for k in (0..n.saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if recall[k] > prev_recall {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    Some(ap)
}

/// AP of one class.
pub fn average_precision(dets: &[RankedDetection], gts: &ClassGroundTruth) -> Option<f64> {
    average_precision_from_matches(&match_ranked(&rank(dets), gts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// `None` for classes without ground truth
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,AP\n");
        for (c, ap) in self.per_class.iter().enumerate() {
            match ap {
                Some(v) => writeln!(s, "{},{v}", CLASS_NAMES[c]).unwrap(),
                None => writeln!(s, "{},", CLASS_NAMES[c]).unwrap(),
            }
        }
        writeln!(s, "mAP,{}", self.map).unwrap();
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("VOC all-points AP @ IoU 0.5\n");
        let header: Vec<String> = CLASS_NAMES.iter().map(|n| format!("{n:>9}")).collect();
        writeln!(s, "{} |       mAP", header.join(" ")).unwrap();
        let cells: Vec<String> = self
            .per_class
            .iter()
            .map(|ap| match ap {
                Some(v) => format!("{:>9.1}", v * 100.0),
                None => format!("{:>9}", "n/a"),
            })
            .collect();
        writeln!(s, "{} | {:>9.1}", cells.join(" "), self.map * 100.0).unwrap();
        s
    }
}

/// Per-class AP over all classes and their unweighted mean over classes
/// with ground truth.
pub fn evaluate(
    predictions: &[PredictionRecord],
    ground_truth: &BTreeMap<u64, Vec<(BoundingBox, usize)>>,
) -> Result<EvaluationReport> {
    if let Some(p) = predictions.iter().find(|p| p.class_id >= NUM_CLASSES) {
        return Err(Error::Evaluation(format!("unknown class id {}", p.class_id)));
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let mut gts = ClassGroundTruth::new();
        for (&id, anns) in ground_truth {
            let boxes: Vec<_> = anns.iter().filter(|a| a.1 == class).map(|a| a.0).collect();
            if !boxes.is_empty() {
                gts.insert(id, boxes);
            }
        }
        let dets: Vec<RankedDetection> = predictions
            .iter()
            .filter(|p| p.class_id == class)
            .map(|p| RankedDetection { image_id: p.image_id, bbox: p.bbox, confidence: p.confidence })
            .collect();
        let ap = average_precision(&dets, &gts);
        if ap.is_none() {
            log::info!("class {} has no ground truth; excluded from mAP", CLASS_NAMES[class]);
        }
        per_class.push(ap);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok(EvaluationReport { per_class, map })
}

pub fn write_predictions(path: &Path, predictions: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut out, p).expect("prediction serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Ground truth of a dataset index, keyed by image id.
pub fn ground_truth_from_index(index_path: &Path) -> Result<BTreeMap<u64, Vec<(BoundingBox, usize)>>> {
    let index = load_index(index_path)?;
    Ok(index
        .entries
        .into_iter()
        .map(|e| (e.id, e.annotations.into_iter().map(|a| (a.bbox, a.class_id)).collect()))
        .collect())
}

/// Evaluates a predictions file against a dataset index.
pub fn mean_average_precision(predictions_path: &Path, index_path: &Path) -> Result<EvaluationReport> {
    let preds = read_predictions(predictions_path)?;
    let gt = ground_truth_from_index(index_path)?;
    evaluate(&preds, &gt)
}
