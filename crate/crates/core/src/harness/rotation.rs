//! Training and scoring the rotation task on its own.

use super::train::{stream_rng, EpochCycler, Stream};
use crate::detector::Detector;
use crate::geometry::QuarterTurn;
use crate::imaging::{rotate_image, ImageBuffer};
use crate::numerics::{Float, Sgd, Tensor};
use crate::objectives::{mean_of, rotation_term_from_features, RotationMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationTraining {
    pub mode: RotationMode,
    pub top_k: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for RotationTraining {
    fn default() -> Self {
        Self { mode: RotationMode::PropRot, top_k: 32, steps: 500, lr: 0.01, momentum: 0.9, seed: 0 }
    }
}

/// Trains a fresh detector on the rotation loss alone. Each step averages
/// the loss over all four turns of one image, so image content common to
/// every turn cancels out of the gradient. Returns the model and the
/// per-step losses.
pub fn train_rotation_only(images: &[ImageBuffer], opts: &RotationTraining) -> (Detector, Vec<f64>) {
    let mut model = Detector::init(&mut stream_rng(opts.seed, Stream::Init));
    let mut sgd = Sgd::new(model.parameters(), opts.lr as Float, opts.momentum as Float);
    let mut order = EpochCycler::new(images.len(), stream_rng(opts.seed, Stream::SourceOrder));
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let img = &images[order.next_index()];
        let mut s = model.session();
        let terms: Vec<Tensor> = QuarterTurn::ALL
            .iter()
            .map(|&turn| {
                let fm = s.extract_features(&rotate_image(img, turn));
                rotation_term_from_features(&mut s, &fm, turn, opts.mode, opts.top_k)
            })
            .collect();
        let loss = mean_of(&mut s, &terms);
        losses.push(s.tape.item(loss) as f64);
        let mut grads = s.backward(loss);
        drop(s);
        sgd.step(model.parameters_mut(), &mut grads);
    }
    (model, losses)
}

/// Predicted turn of an already-rotated image: ImgRot uses the image head;
/// PropRot takes the argmax of the summed per-proposal log-probabilities.
pub fn predict_turn(model: &Detector, img: &ImageBuffer, mode: RotationMode, top_k: usize) -> QuarterTurn {
    let mut s = model.inference_session();
    let fm = s.extract_features(img);
    let scores = match mode {
        RotationMode::ImgRot => {
            let p = s.predict_rotation_image(&fm);
            s.tape.value(p).to_vec()
        }
        RotationMode::PropRot => {
            let props = s.propose(&fm, top_k);
            let p = s.predict_rotation(&props);
            let mut acc = vec![0.0; 4];
            for row in s.tape.value(p).chunks(4) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.max(Float::MIN_POSITIVE).ln();
                }
            }
            acc
        }
    };
    QuarterTurn::from_index(crate::objectives::argmax(&scores))
}

/// Accuracy over every image under all four turns.
pub fn rotation_accuracy(model: &Detector, images: &[ImageBuffer], mode: RotationMode, top_k: usize) -> f64 {
    let mut correct = 0usize;
    for img in images {
        for turn in QuarterTurn::ALL {
            correct += (predict_turn(model, &rotate_image(img, turn), mode, top_k) == turn) as usize;
        }
    }
    correct as f64 / (4 * images.len()) as f64
}
