//! Finite-difference validation of every loss term on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{Detector, ParamGroup, Session, NUM_OUTPUTS};
use crate::geometry::{BoundingBox, QuarterTurn};
use crate::imaging::{rotate_image, AugmentationPolicy, ImageBuffer};
use crate::numerics::gradcheck::{compare, numeric_gradient, Comparison};
use crate::numerics::{Float, Tensor};
use crate::objectives::{
    argmax, consistency_loss, consistency_loss_one_image, detection_loss, rotation_loss, rotation_term_transferred,
    uda_loss, RotatedView, RotationMode,
};
use crate::scenegen::Annotation;

pub const DEFAULT_EPS: Float = 1e-4;
pub const DEFAULT_TOLERANCE: Float = 1e-4;
const SIZE: usize = 16;
const TOP_K: usize = 8;
const BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TermReport {
    pub term: &'static str,
    pub comparison: Comparison,
    /// consistency only: fraction of proposals passing the gate
    pub accept_fraction: Option<f64>,
}

fn random_image(rng: &mut impl Rng) -> ImageBuffer {
    let mut img = ImageBuffer::filled(SIZE, SIZE, [rng.random(), rng.random(), rng.random()]);
    let (r0, c0) = (rng.random_range(1..6), rng.random_range(1..6));
    let color = [rng.random(), rng.random(), rng.random()];
    for r in r0..r0 + 9 {
        for c in c0..c0 + 9 {
            img.set_pixel(r, c, color);
        }
    }
    img.map_values(|v| v + rng.random_range(-0.05..0.05))
}

/// Analytic gradients of `loss` against central differences. `numeric_sign`
/// maps a parameter name to the factor applied to its numeric gradient,
/// which accounts for gradient reversal.
fn check(
    model: &Detector,
    eps: Float,
    loss: impl Fn(&mut Session<'_>) -> Tensor,
    numeric_sign: impl Fn(&str) -> Float,
) -> Comparison {
    let mut s = model.session();
    let l = loss(&mut s);
    let analytic = s.backward(l);
    let params = model.parameters();
    let mut numeric = numeric_gradient(params, eps, |p| {
        let m = Detector::from_parameters(p.clone()).expect("same layout");
        let mut s = m.inference_session();
        let l = loss(&mut s);
        s.tape.item(l)
    });
    for (i, g) in numeric.iter_mut().enumerate() {
        let f = numeric_sign(params.name(i));
        g.iter_mut().for_each(|v| *v *= f);
    }
    compare(params, &analytic, &numeric)
}

/// Threshold halfway between the two middle max-probabilities of the
/// proposals, so that about half pass the gate with a wide margin.
fn mixed_sigma(model: &Detector, images: &[&ImageBuffer]) -> f64 {
    let mut s = model.inference_session();
    let mut maxima = Vec::new();
    for img in images {
        let fm = s.extract_features(img);
        let props = s.propose(&fm, TOP_K);
        let probs = s.classify_proposals(&props);
        maxima.extend(s.tape.value(probs).chunks(NUM_OUTPUTS).map(|row| row[argmax(row)] as f64));
    }
    maxima.sort_by(f64::total_cmp);
    let mid = maxima.len() / 2;
    0.5 * (maxima[mid - 1] + maxima[mid])
}

/// Runs the suite on a freshly initialized detector.
pub fn run_suite(seed: u64, eps: Float) -> Vec<TermReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Detector::init(&mut rng);
    let src = random_image(&mut rng);
    let tgt = random_image(&mut rng).map_values(|v| 0.6 * v + 0.3);
    let annotations = vec![
        Annotation { bbox: BoundingBox::new(2.0, 3.0, 11.0, 12.0).unwrap(), class_id: 1 },
        Annotation { bbox: BoundingBox::new(8.0, 1.0, 15.0, 7.5).unwrap(), class_id: 2 },
    ];
    let (turn_s, turn_t) = (QuarterTurn::Deg90, QuarterTurn::Deg270);
    let (src_r, tgt_r) = (rotate_image(&src, turn_s), rotate_image(&tgt, turn_t));
    let policy = AugmentationPolicy::default();
    let sigma = mixed_sigma(&model, &[&src, &tgt]);
    let backbone = ParamGroup::Backbone.prefix();

    let mut reports = Vec::new();
    let mut push = |term, comparison, accept_fraction| reports.push(TermReport { term, comparison, accept_fraction });

    let c = check(
        &model,
        eps,
        |s| {
            let fm = s.extract_features(&src);
            let mut neg = ChaCha8Rng::seed_from_u64(seed ^ 0xD1);
            detection_loss(s, &fm, &annotations, &mut neg).expect("annotated").total
        },
        |_| 1.0,
    );
    push("detection", c, None);

    let c = check(
        &model,
        eps,
        |s| {
            let fs = s.extract_features(&src);
            let ft = s.extract_features(&tgt);
            uda_loss(s, &fs, &ft, BETA)
        },
        |name| if name.starts_with(backbone) { -(BETA as Float) } else { 1.0 },
    );
    push("uda", c, None);

    for (term, mode) in [("rotation_proprot", RotationMode::PropRot), ("rotation_imgrot", RotationMode::ImgRot)] {
        let c = check(
            &model,
            eps,
            |s| {
                let views = [RotatedView { image: &src_r, turn: turn_s }, RotatedView { image: &tgt_r, turn: turn_t }];
                rotation_loss(s, &views, mode, TOP_K)
            },
            |_| 1.0,
        );
        push(term, c, None);
    }

    let c = check(
        &model,
        eps,
        |s| {
            let fo = s.extract_features(&src);
            let fr = s.extract_features(&src_r);
            rotation_term_transferred(s, &fo, &fr, turn_s, TOP_K)
        },
        |_| 1.0,
    );
    push("rotation_proprot_transferred", c, None);

    let accept = std::cell::Cell::new(0.0);
    let c = check(
        &model,
        eps,
        |s| {
            let ts = consistency_loss_one_image(s, &src, None, &policy, 11, sigma, TOP_K);
            let tt = consistency_loss_one_image(s, &tgt, None, &policy, 12, sigma, TOP_K);
            let (loss, a) = consistency_loss(s, &[ts, tt]);
            accept.set(a);
            loss
        },
        |_| 1.0,
    );
    push("consistency", c, Some(accept.get()));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_sigma_splits_proposals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Detector::init(&mut rng);
        let img = random_image(&mut rng);
        let sigma = mixed_sigma(&model, &[&img]);
        let mut s = model.session();
        let t = consistency_loss_one_image(&mut s, &img, None, &AugmentationPolicy::default(), 1, sigma, TOP_K);
        assert!(t.accept_fraction > 0.0 && t.accept_fraction < 1.0);
    }
}
