//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full desk-scale experiment (about four minutes on one core).
//! Set `RPCL_ACCEPTANCE_QUICK=1` to skip criteria 7 to 9. Failures are
//! reported without failing the process unless `RPCL_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcl::detector::{Detector, ParamGroup, NUM_OUTPUTS};
use rpcl::evaluation::{average_precision, ClassGroundTruth, RankedDetection};
use rpcl::geometry::{iou, rotate_box, BoundingBox, QuarterTurn};
use rpcl::harness::ablate::run_dir;
use rpcl::harness::cli::gen_data;
use rpcl::harness::gradcheck::{run_suite, DEFAULT_EPS};
use rpcl::harness::rotation::{rotation_accuracy, train_rotation_only, RotationTraining};
use rpcl::harness::train::{CHECKPOINT_FILE, METRICS_FILE};
use rpcl::harness::{ablate, train, GenDataConfig, TrainConfig, VARIANTS};
use rpcl::imaging::{augment, rotate_image, AugmentKind, AugmentationPolicy, ImageBuffer};
use rpcl::numerics::Float;
use rpcl::objectives::{consistency_from_pseudo_labels, rotation_loss, RotatedView, RotationMode};
use rpcl::scenegen::{generate_scene, load_labeled, Domain};

const GRAD_TOLERANCE: Float = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const BOXES_PER_ANGLE: usize = 1000;
const LOCALITY_TRIALS: usize = 100;
const SIGMA: f64 = 0.8;
const LN4_TOLERANCE: Float = 1e-12;
const ROTATION_STEPS: usize = 500;
const ROTATION_ACCURACY: f64 = 0.9;
const AP_INSTANCES: usize = 50;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(15 * 60);
const MIN_GAIN: f64 = 0.05;
const SEEDS: [u64; 3] = [1, 2, 3];
const DATA_SEED: u64 = 2024;

type Verdict = Result<String, String>;

fn report(n: usize, name: &str, v: &Verdict) -> bool {
    let (tag, detail) = match v {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {name}: {tag} ({detail})");
    v.is_ok()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = run_suite(0, DEFAULT_EPS);
    let elapsed = start.elapsed();
    let mut detail = String::new();
    let mut ok = elapsed < GRADCHECK_BUDGET;
    for r in &reports {
        let e = r.comparison.max_relative_error;
        ok &= e < GRAD_TOLERANCE && r.comparison.nonzero > 0;
        write!(detail, "{} {:.1e}, ", r.term, e).unwrap();
        if let Some(a) = r.accept_fraction {
            // the gate must split the proposals for the check to cover both branches
            ok &= a > 0.0 && a < 1.0;
            write!(detail, "gate accept {a:.2}, ").unwrap();
        }
    }
    write!(detail, "{:.1}s", elapsed.as_secs_f64()).unwrap();
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Rotates a boolean mask by explicit index arithmetic: pixel (row r, col c)
/// of a `w x h` image lands at (w-1-c, r) for a counter-clockwise turn.
fn rotate_mask_ccw(mask: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let (h, w) = (mask.len(), mask[0].len());
    let mut out = vec![vec![false; h]; w];
    for (r, row) in mask.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[w - 1 - c][r] = v;
        }
    }
    out
}

fn mask_bounds(mask: &[Vec<bool>]) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (r, row) in mask.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v {
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c + 1);
                y1 = y1.max(r + 1);
            }
        }
    }
    [x0 as f64, y0 as f64, x1 as f64, y1 as f64]
}

fn geometry_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for turn in QuarterTurn::ALL {
        for _ in 0..BOXES_PER_ANGLE {
            let (w, h) = (rng.random_range(2..48usize), rng.random_range(2..48usize));
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            let x1 = rng.random_range(x0 + 1..=w);
            let y1 = rng.random_range(y0 + 1..=h);
            let b = BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
            let mut mask: Vec<Vec<bool>> = (0..h).map(|r| (0..w).map(|c| r >= y0 && r < y1 && c >= x0 && c < x1).collect()).collect();
            for _ in 0..turn.index() {
                mask = rotate_mask_ccw(&mask);
            }
            let rotated = rotate_box(&b, turn, w as f64, h as f64).unwrap();
            if rotated.to_array() != mask_bounds(&mask) {
                mismatches += 1;
            }
            let mut back = b;
            let (mut bw, mut bh) = (w as f64, h as f64);
            for _ in 0..4 {
                back = rotate_box(&back, QuarterTurn::Deg90, bw, bh).unwrap();
                (bw, bh) = (bh, bw);
            }
            if back != b {
                mismatches += 1;
            }
        }
    }
    let mut image_failures = 0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..30), rng.random_range(1..30));
        let data = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        let img = ImageBuffer::from_vec(h, w, data);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate_image(&r, QuarterTurn::Deg90);
        }
        let bit_exact = r.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        image_failures += (!bit_exact || (r.height(), r.width()) != (h, w)) as usize;
    }
    let detail = format!(
        "{} boxes per angle, {mismatches} box mismatches, {image_failures} image round-trip failures",
        BOXES_PER_ANGLE
    );
    if mismatches == 0 && image_failures == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn augmentation_locality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut policies: Vec<(String, AugmentationPolicy)> = AugmentKind::POOL
        .iter()
        .map(|&k| (format!("{k:?}"), AugmentationPolicy { op_count: 1, pool: vec![k], ..AugmentationPolicy::default() }))
        .collect();
    policies.push(("two-op".into(), AugmentationPolicy::default()));
    let mut violations = Vec::new();
    for (name, policy) in &policies {
        for _ in 0..LOCALITY_TRIALS {
            let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
            let data: Vec<f64> = (0..h * w * 3).map(|_| rng.random()).collect();
            let img = ImageBuffer::from_vec(h, w, data);
            let (pr, pc) = (rng.random_range(0..h), rng.random_range(0..w));
            let mut poked = img.clone();
            poked.set_pixel(pr, pc, [rng.random(), rng.random(), rng.random()]);
            let seed = rng.random();
            let (a, b) = (augment(&img, policy, seed), augment(&poked, policy, seed));
            let leaked = (0..h).any(|r| (0..w).any(|c| (r, c) != (pr, pc) && a.pixel(r, c) != b.pixel(r, c)));
            if leaked || (a.height(), a.width()) != (h, w) {
                violations.push(name.clone());
            }
        }
    }
    let detail = format!("{} policies x {LOCALITY_TRIALS} trials, {} violations", policies.len(), violations.len());
    if violations.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail} in {violations:?}"))
    }
}

fn consistency_gate() -> Verdict {
    let model = Detector::init(&mut ChaCha8Rng::seed_from_u64(13));
    let img = generate_scene(13, Domain::Source).unwrap().image;
    let aug_img = augment(&img, &AugmentationPolicy::default(), 1);

    let mut s = model.session();
    let fm = s.extract_features(&img);
    let proposals = s.propose(&fm, 32);
    let below: Vec<Float> = proposals.iter().flat_map(|_| [0.79, 0.1, 0.06, 0.05]).collect();
    let aug = s.extract_features(&aug_img);
    let term = consistency_from_pseudo_labels(&mut s, &proposals, &below, &aug, SIGMA);
    let loss = s.tape.item(term.loss);
    let grads = s.backward(term.loss);
    let zero_grad = grads.iter().flatten().all(|&g| g == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut monotone = true;
    let mut fractions = Vec::new();
    for trial in 0..20 {
        let mut s = model.inference_session();
        let fm = s.extract_features(&generate_scene(100 + trial, Domain::Source).unwrap().image);
        let proposals = s.propose(&fm, 32);
        let probs: Vec<Float> = (0..proposals.len())
            .flat_map(|_| {
                let z: Vec<Float> = (0..NUM_OUTPUTS).map(|_| rng.random_range(-4.0..4.0)).collect();
                let total: Float = z.iter().map(|v| v.exp()).sum();
                z.into_iter().map(move |v| v.exp() / total)
            })
            .collect();
        let f: Vec<f64> = [0.5, 0.8, 0.95]
            .iter()
            .map(|&sigma| consistency_from_pseudo_labels(&mut s, &proposals, &probs, &fm, sigma).accept_fraction)
            .collect();
        monotone &= f[0] >= f[1] && f[1] >= f[2];
        if trial == 0 {
            fractions = f;
        }
    }
    let detail = format!(
        "p_max 0.79 at sigma 0.8: loss {loss}, accept {}, zero gradient {zero_grad}; accept at sigma 0.5/0.8/0.95 e.g. {:.2}/{:.2}/{:.2}, monotone over 20 images {monotone}",
        term.accept_fraction, fractions[0], fractions[1], fractions[2]
    );
    if loss == 0.0 && term.accept_fraction == 0.0 && zero_grad && monotone {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rotation_calibration(data: &Path) -> Verdict {
    let mut model = Detector::init(&mut ChaCha8Rng::seed_from_u64(15));
    model.zero_group(ParamGroup::RotationHead);
    model.zero_group(ParamGroup::ImageRotationHead);
    let img = generate_scene(15, Domain::Source).unwrap().image;
    let ln4 = 4f64.ln() as Float;
    let mut initial = Vec::new();
    for mode in [RotationMode::PropRot, RotationMode::ImgRot] {
        let rotated = rotate_image(&img, QuarterTurn::Deg90);
        let mut s = model.inference_session();
        let l = rotation_loss(&mut s, &[RotatedView { image: &rotated, turn: QuarterTurn::Deg90 }], mode, 32);
        initial.push(s.tape.item(l));
    }
    let calibrated = initial.iter().all(|&l| (l - ln4).abs() < LN4_TOLERANCE);

    let train_images: Vec<ImageBuffer> =
        load_labeled(&data.join("source/train.json")).unwrap().into_iter().map(|l| l.image).collect();
    let held_out: Vec<ImageBuffer> =
        load_labeled(&data.join("source/test.json")).unwrap().into_iter().map(|l| l.image).collect();
    let mut accuracies = Vec::new();
    for mode in [RotationMode::PropRot, RotationMode::ImgRot] {
        let opts = RotationTraining { mode, steps: ROTATION_STEPS, ..RotationTraining::default() };
        let (m, _) = train_rotation_only(&train_images, &opts);
        accuracies.push(rotation_accuracy(&m, &held_out, mode, opts.top_k));
    }
    let detail = format!(
        "zero-head loss PropRot {} ImgRot {} (ln 4 = {ln4}); held-out accuracy after {ROTATION_STEPS} steps PropRot {:.3} ImgRot {:.3}",
        initial[0], initial[1], accuracies[0], accuracies[1]
    );
    if calibrated && accuracies.iter().all(|&a| a > ROTATION_ACCURACY) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// All-points AP by enumerating every confidence threshold and redoing the
/// greedy matching on the detections kept at that threshold.
fn threshold_enumeration_ap(dets: &[RankedDetection], gts: &ClassGroundTruth) -> f64 {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut curve = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<&RankedDetection> = dets.iter().filter(|d| d.confidence >= t).collect();
        kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.image_id.cmp(&b.image_id)));
        let mut claimed: Vec<(u64, usize)> = Vec::new();
        let mut tp = 0usize;
        for d in &kept {
            let Some(boxes) = gts.get(&d.image_id) else { continue };
            let best = boxes
                .iter()
                .enumerate()
                .map(|(j, g)| (j, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            if let Some((j, v)) = best {
                if v >= 0.5 && !claimed.contains(&(d.image_id, j)) {
                    claimed.push((d.image_id, j));
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / kept.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    let mut levels: Vec<f64> = curve.iter().map(|p| p.0).collect();
    levels.dedup();
    for r in levels {
        if r > prev {
            let p = curve.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

fn evaluator_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let bb = |x: f64, y: f64, s: f64| BoundingBox::new(x, y, x + s, y + s).unwrap();
    let mut mismatches = 0;
    for _ in 0..AP_INSTANCES {
        let mut gts = ClassGroundTruth::new();
        for id in 0..3u64 {
            let boxes = (0..rng.random_range(0..3)).map(|_| bb(rng.random_range(0..40) as f64, rng.random_range(0..40) as f64, 10.0)).collect();
            gts.insert(id, boxes);
        }
        gts.entry(0).or_default().push(bb(45.0, 45.0, 10.0));
        let dets: Vec<RankedDetection> = (0..rng.random_range(0..=10))
            .map(|_| {
                let image_id = rng.random_range(0..3u64);
                let boxes = &gts[&image_id];
                let bbox = if !boxes.is_empty() && rng.random_bool(0.6) {
                    let g = boxes[rng.random_range(0..boxes.len())];
                    bb(g.x_min() + rng.random_range(0..4) as f64, g.y_min(), 10.0)
                } else {
                    bb(rng.random_range(0..40) as f64, rng.random_range(0..40) as f64, 10.0)
                };
                RankedDetection { image_id, bbox, confidence: rng.random() }
            })
            .collect();
        if average_precision(&dets, &gts) != Some(threshold_enumeration_ap(&dets, &gts)) {
            mismatches += 1;
        }
    }
    let g = bb(0.0, 0.0, 10.0);
    let single = average_precision(
        &[RankedDetection { image_id: 0, bbox: g, confidence: 0.7 }],
        &ClassGroundTruth::from([(0, vec![g])]),
    );
    let detail = format!("{mismatches} of {AP_INSTANCES} instances differ; singleton perfect detection AP {single:?}");
    if mismatches == 0 && single == Some(1.0) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Experiment {
    medians: BTreeMap<&'static str, f64>,
    elapsed: Duration,
}

fn run_experiment(base: &TrainConfig) -> Result<Experiment, String> {
    let start = Instant::now();
    let table = ablate(base, &VARIANTS, &SEEDS).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut medians = BTreeMap::new();
    for v in VARIANTS {
        let m = table.median(v.name).ok_or_else(|| format!("{} has no successful run", v.name))?;
        medians.insert(v.name, m);
    }
    Ok(Experiment { medians, elapsed })
}

fn adaptation_ordering(exp: &Experiment) -> Verdict {
    let m = |k: &str| exp.medians[k];
    let (so, uda, rp, cl, both) = (m("source_only"), m("uda"), m("uda_rp"), m("uda_cl"), m("uda_rp_cl"));
    let ordered = so < uda && uda <= rp.max(cl) && rp.max(cl) < both;
    let gain = both - so;
    let in_budget = exp.elapsed < EXPERIMENT_BUDGET;
    let detail = format!(
        "median target mAP source_only {so:.4} uda {uda:.4} uda_rp {rp:.4} uda_cl {cl:.4} uda_rp_cl {both:.4}; ordering {ordered}, gain {:.1} points (need {:.0}), {:.0}s for {} runs",
        100.0 * gain,
        100.0 * MIN_GAIN,
        exp.elapsed.as_secs_f64(),
        VARIANTS.len() * SEEDS.len()
    );
    if ordered && gain >= MIN_GAIN && in_budget {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn proprot_vs_imgrot(exp: &Experiment) -> Verdict {
    let (prop, img) = (exp.medians["uda_rp"], exp.medians["uda_imgrot"]);
    let detail = format!("median target mAP PropRot {prop:.4} ImgRot {img:.4}");
    if prop >= img {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(base: &TrainConfig, scratch: &Path) -> Verdict {
    let variant = VARIANTS.iter().find(|v| v.name == "uda_rp_cl").unwrap();
    let seed = SEEDS[0];
    let first = run_dir(&base.output_dir, variant.name, seed);
    let second = scratch.join("rerun");
    let cfg = TrainConfig { seed: Some(seed), output_dir: second.clone(), ..variant.apply(base) };
    train(&cfg).map_err(|e| e.to_string())?;
    let same = |f: &str| std::fs::read(first.join(f)).ok() == std::fs::read(second.join(f)).ok();
    let (metrics, checkpoint) = (same(METRICS_FILE), same(CHECKPOINT_FILE));
    let detail = format!("{} seed {seed} rerun: metrics identical {metrics}, checkpoint identical {checkpoint}", variant.name);
    if metrics && checkpoint {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    // `cargo test` passes harness flags; listing must not run the suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let quick = std::env::var_os("RPCL_ACCEPTANCE_QUICK").is_some_and(|v| v != "0");
    let scratch = tempfile::tempdir().expect("temp dir");
    let data = scratch.path().join("data");
    gen_data(&GenDataConfig { seed: Some(DATA_SEED), output_dir: data.clone(), ..GenDataConfig::default() })
        .expect("benchmark data");

    let mut results = vec![
        report(1, "gradient suite", &gradient_suite()),
        report(2, "geometry oracle", &geometry_oracle()),
        report(3, "augmentation locality", &augmentation_locality()),
        report(4, "consistency gate", &consistency_gate()),
        report(5, "rotation calibration", &rotation_calibration(&data)),
        report(6, "evaluator oracle", &evaluator_oracle()),
    ];

    if quick {
        for (n, name) in [(7, "adaptation experiment"), (8, "PropRot vs ImgRot"), (9, "determinism")] {
            println!("criterion {n} {name}: SKIP (RPCL_ACCEPTANCE_QUICK set)");
        }
    } else {
        let base = TrainConfig {
            source_train: data.join("source/train.json"),
            target_train: data.join("target/train.json"),
            target_test: data.join("target/test.json"),
            output_dir: scratch.path().join("ablation"),
            ..TrainConfig::default()
        };
        match run_experiment(&base) {
            Ok(exp) => {
                results.push(report(7, "adaptation experiment", &adaptation_ordering(&exp)));
                results.push(report(8, "PropRot vs ImgRot", &proprot_vs_imgrot(&exp)));
            }
            Err(e) => {
                results.push(report(7, "adaptation experiment", &Err(e.clone())));
                results.push(report(8, "PropRot vs ImgRot", &Err(e)));
            }
        }
        results.push(report(9, "determinism", &determinism(&base, scratch.path())));
    }
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    let strict = std::env::var_os("RPCL_ACCEPTANCE_STRICT").is_some_and(|v| v != "0");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
