use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RotationProposals, TrainConfig};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_predictions, EvaluationReport, PredictionRecord};
use crate::geometry::QuarterTurn;
use crate::imaging::{rotate_image, ImageBuffer};
use crate::numerics::{Parameters, Sgd};
use crate::objectives::{
    consistency_loss, consistency_loss_one_image, detection_loss, mean_of, rotation_term_from_features,
    rotation_term_transferred, total_loss, uda_loss, LossBreakdown, LossTerms, RotationMode,
};
use crate::scenegen::{load_labeled, load_unlabeled, LabeledImage};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_HEADER: [&str; 8] =
    ["step", "l_det", "l_uda", "l_rp", "l_cl", "total", "cl_accept_fraction", "target_map"];

/// Independent random streams, one per purpose, so that enabling or
/// disabling a task never shifts another stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    SourceOrder = 2,
    TargetOrder = 3,
    Rotation = 4,
    Augmentation = 5,
    Negatives = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Per-step random draws. All four are drawn every step, whatever the
/// enabled tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepDraws {
    pub theta_s: QuarterTurn,
    pub theta_t: QuarterTurn,
    pub augment_seed_s: u64,
    pub augment_seed_t: u64,
}

impl StepDraws {
    pub fn draw(rotation: &mut impl Rng, augmentation: &mut impl Rng) -> Self {
        Self {
            theta_s: QuarterTurn::from_index(rotation.random_range(0..4)),
            theta_t: QuarterTurn::from_index(rotation.random_range(0..4)),
            augment_seed_s: augmentation.random(),
            augment_seed_t: augmentation.random(),
        }
    }
}

/// Endless sequence of indices in `0..len`, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct EpochCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochCycler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        assert!(len > 0, "cannot cycle an empty dataset");
        Self { order: (0..len).collect(), pos: len, rng }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// backbone passes run this step (at most six)
    pub forward_passes: usize,
}

/// One step: forward the source scene, its rotated and augmented views,
/// and the same for the target image when any active term needs it; then
/// a single backward pass and optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Detector,
    sgd: &mut Sgd,
    cfg: &TrainConfig,
    step: usize,
    source: &LabeledImage,
    target: Option<&ImageBuffer>,
    draws: &StepDraws,
    negatives: &mut impl Rng,
) -> Result<StepOutcome> {
    let (uda, rp, cl) = (cfg.uda_active(), cfg.rp_active(), cfg.cl_active());
    let target = match (cfg.needs_target(), target) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(Error::Dataset("the enabled terms need a target image".into())),
        (false, _) => None,
    };
    let transferred = cfg.rotation_mode == RotationMode::PropRot && cfg.rotation_proposals == RotationProposals::Original;

    let mut passes = 0;
    let mut s = model.session();
    let fm_s = s.extract_features(&source.image);
    passes += 1;
    let det = detection_loss(&mut s, &fm_s, &source.annotations, negatives)?;
    let fm_t = match target {
        Some(t) if uda || cl || (rp && transferred) => {
            passes += 1;
            Some(s.extract_features(t))
        }
        _ => None,
    };

    let uda_term = uda.then(|| uda_loss(&mut s, &fm_s, fm_t.as_ref().unwrap(), cfg.grl_beta));

    let rp_term = if rp {
        let t_img = target.unwrap();
        let mut terms = Vec::with_capacity(2);
        for (img, fm, turn) in [(&source.image, Some(fm_s), draws.theta_s), (t_img, fm_t, draws.theta_t)] {
            let rotated = rotate_image(img, turn);
            let fm_r = s.extract_features(&rotated);
            passes += 1;
            terms.push(if transferred {
                rotation_term_transferred(&mut s, fm.as_ref().unwrap(), &fm_r, turn, cfg.top_k)
            } else {
                rotation_term_from_features(&mut s, &fm_r, turn, cfg.rotation_mode, cfg.top_k)
            });
        }
        Some(mean_of(&mut s, &terms))
    } else {
        None
    };

    let cl_term = if cl {
        let sigma = cfg.weights.sigma;
        let policy = &cfg.augmentation;
        let ts = consistency_loss_one_image(&mut s, &source.image, Some(&fm_s), policy, draws.augment_seed_s, sigma, cfg.top_k);
        let tt = consistency_loss_one_image(
            &mut s,
            target.unwrap(),
            fm_t.as_ref(),
            policy,
            draws.augment_seed_t,
            sigma,
            cfg.top_k,
        );
        passes += 2;
        Some(consistency_loss(&mut s, &[ts, tt]))
    } else {
        None
    };

    let terms = LossTerms { det: det.total, uda: uda_term, rp: rp_term, cl: cl_term };
    let (total, breakdown) = total_loss(&mut s, &terms, &cfg.weights);
    if !breakdown.is_finite() {
        return Err(Error::NonFinite { step, breakdown: breakdown.to_string() });
    }
    let mut grads = s.backward(total);
    drop(s);
    sgd.step(model.parameters_mut(), &mut grads);
    Ok(StepOutcome { breakdown, forward_passes: passes })
}

/// One metrics row. `target_map` is present on evaluation steps only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub l_det: f64,
    pub l_uda: f64,
    pub l_rp: f64,
    pub l_cl: f64,
    pub total: f64,
    pub cl_accept_fraction: f64,
    pub target_map: Option<f64>,
}

impl MetricsRecord {
    pub fn new(step: usize, b: &LossBreakdown, target_map: Option<f64>) -> Self {
        Self {
            step,
            l_det: b.l_det,
            l_uda: b.l_uda,
            l_rp: b.l_rp,
            l_cl: b.l_cl,
            total: b.total,
            cl_accept_fraction: b.cl_accept_fraction,
            target_map,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
    let header = reader.headers().map_err(|e| Error::parse(path, e))?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::parse(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    reader.deserialize().map(|r| r.map_err(|e| Error::parse(path, e))).collect()
}

struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvSink {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        // the header is written explicitly, so serde must not add its own
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(header).map_err(|e| Error::parse(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row(&mut self, record: impl Serialize) -> Result<()> {
        self.writer.serialize(record).map_err(|e| Error::parse(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs detection over labeled images.
pub fn predict(model: &Detector, images: &[LabeledImage], cfg: &TrainConfig) -> Vec<PredictionRecord> {
    images
        .iter()
        .flat_map(|img| {
            model.detect(&img.image, cfg.top_k, cfg.score_threshold, cfg.nms_iou).into_iter().map(|d| {
                PredictionRecord { image_id: img.id, class_id: d.class_id, bbox: d.bbox, confidence: d.confidence }
            })
        })
        .collect()
}

pub fn evaluate_model(
    model: &Detector,
    images: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(EvaluationReport, Vec<PredictionRecord>)> {
    let predictions = predict(model, images, cfg);
    let gt = images
        .iter()
        .map(|i| (i.id, i.annotations.iter().map(|a| (a.bbox, a.class_id)).collect()))
        .collect();
    Ok((evaluate(&predictions, &gt)?, predictions))
}

/// Datasets of a run, loaded once.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Vec<LabeledImage>,
    /// `None` when no active term needs target images
    pub target: Option<Vec<ImageBuffer>>,
    pub target_test: Vec<LabeledImage>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let source = load_labeled(&cfg.source_train)?;
        if source.is_empty() {
            return Err(Error::Dataset(format!("{}: no images", cfg.source_train.display())));
        }
        let target = if cfg.needs_target() {
            let t = load_unlabeled(&cfg.target_train)?;
            if t.is_empty() {
                return Err(Error::Dataset(format!("{}: no images", cfg.target_train.display())));
            }
            Some(t)
        } else {
            None
        };
        let target_test = load_labeled(&cfg.target_test)?;
        Ok(Self { source, target, target_test })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model: Detector,
    pub metrics: Vec<MetricsRecord>,
    pub final_report: EvaluationReport,
    pub output_dir: PathBuf,
}

impl TrainSummary {
    pub fn final_map(&self) -> f64 {
        self.final_report.map
    }
}

/// Full training run from a config; loads the datasets named in it.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = TrainData::load(cfg)?;
    train_with_data(cfg, &data)
}

/// Training loop over preloaded data. Writes the checkpoint, metrics,
/// timings, the resolved config and final test-split predictions to
/// `cfg.output_dir`.
pub fn train_with_data(cfg: &TrainConfig, data: &TrainData) -> Result<TrainSummary> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    if cfg.needs_target() && data.target.is_none() {
        return Err(Error::Dataset("config needs target images but none were loaded".into()));
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_json()).map_err(|e| Error::io(&resolved, e))?;

    let mut model = Detector::init(&mut stream_rng(seed, Stream::Init));
    let mut sgd = Sgd::new(model.parameters(), cfg.optimizer.lr as _, cfg.optimizer.momentum as _);
    let mut source_order = EpochCycler::new(data.source.len(), stream_rng(seed, Stream::SourceOrder));
    let mut target_order = data.target.as_ref().map(|t| EpochCycler::new(t.len(), stream_rng(seed, Stream::TargetOrder)));
    let mut rotation = stream_rng(seed, Stream::Rotation);
    let mut augmentation = stream_rng(seed, Stream::Augmentation);
    let mut negatives = stream_rng(seed, Stream::Negatives);

    let mut metrics_sink = CsvSink::create(out.join(METRICS_FILE), &METRICS_HEADER)?;
    let mut timing_sink = CsvSink::create(out.join(TIMING_FILE), &["step", "seconds"])?;
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut last_report = None;
    let started = Instant::now();
    for step in 1..=cfg.steps {
        let source = &data.source[source_order.next_index()];
        let target = match (&data.target, &mut target_order) {
            (Some(t), Some(order)) => Some(&t[order.next_index()]),
            _ => None,
        };
        let draws = StepDraws::draw(&mut rotation, &mut augmentation);
        let outcome = train_step(&mut model, &mut sgd, cfg, step, source, target, &draws, &mut negatives)?;
        let evaluate_now = step == cfg.steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0);
        let target_map = if evaluate_now {
            let (report, _) = evaluate_model(&model, &data.target_test, cfg)?;
            log::info!("step {step}: {} target mAP {:.4}", outcome.breakdown, report.map);
            let m = report.map;
            last_report = Some(report);
            Some(m)
        } else {
            None
        };
        let record = MetricsRecord::new(step, &outcome.breakdown, target_map);
        metrics_sink.row(record)?;
        timing_sink.row((step, started.elapsed().as_secs_f64()))?;
        metrics.push(record);
    }
    metrics_sink.finish()?;
    timing_sink.finish()?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    model.parameters().save(&checkpoint)?;
    let (final_report, predictions) = match last_report {
        Some(r) => (r, predict(&model, &data.target_test, cfg)),
        None => evaluate_model(&model, &data.target_test, cfg)?,
    };
    write_predictions(&out.join(PREDICTIONS_FILE), &predictions)?;
    Ok(TrainSummary { model, metrics, final_report, output_dir: out.clone() })
}

/// Loads a detector checkpoint, checking its layout.
pub fn load_detector(path: &Path) -> Result<Detector> {
    let params = Parameters::load(path)?;
    Detector::from_parameters(params)
        .ok_or_else(|| Error::parse(path, Error::Checkpoint("parameter layout does not match the detector".into())))
}
