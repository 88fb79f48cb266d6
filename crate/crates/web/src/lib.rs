//! Browser demo: render a scene, rotate it with its boxes, and explore the
//! augmentation policy. Every export is a pure function of its arguments,
//! so the page can re-render on each input event.

use rpcl::geometry::{rotate_box, QuarterTurn};
use rpcl::imaging::{augment, rotate_image, AugmentOp, AugmentationPolicy, ImageBuffer};
use rpcl::scenegen::{generate_scene, Domain, Scene, CLASS_NAMES};
use wasm_bindgen::prelude::*;

/// A rendered image with its boxes, ready for a canvas.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    /// `[x_min, y_min, x_max, y_max]` per box, flattened
    boxes: Vec<f64>,
    classes: Vec<String>,
    caption: String,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes, the layout `ImageData` expects.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn boxes(&self) -> Vec<f64> {
        self.boxes.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn classes(&self) -> Vec<String> {
        self.classes.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.caption.clone()
    }
}

impl SceneView {
    fn new(image: &ImageBuffer, scene: &Scene, boxes: Vec<f64>, caption: String) -> Self {
        let rgba = image.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Self {
            width: image.width(),
            height: image.height(),
            rgba,
            boxes,
            classes: scene.annotations.iter().map(|a| CLASS_NAMES[a.class_id].to_owned()).collect(),
            caption,
        }
    }
}

fn domain(fogged: bool) -> Domain {
    if fogged {
        Domain::Target
    } else {
        Domain::Source
    }
}

fn load(seed: u32, fogged: bool) -> Result<Scene, String> {
    generate_scene(seed.into(), domain(fogged)).map_err(|e| e.to_string())
}

fn flat_boxes(scene: &Scene) -> Vec<f64> {
    scene.annotations.iter().flat_map(|a| a.bbox.to_array()).collect()
}

/// The scene for `seed`, clean or fogged. Both share the same geometry.
#[wasm_bindgen]
pub fn scene(seed: u32, fogged: bool) -> Result<SceneView, String> {
    let s = load(seed, fogged)?;
    let caption = format!("{} objects", s.annotations.len());
    Ok(SceneView::new(&s.image, &s, flat_boxes(&s), caption))
}

/// The scene turned counterclockwise by `degrees` (a multiple of 90), with
/// its boxes mapped into the turned frame.
#[wasm_bindgen]
pub fn rotated_scene(seed: u32, fogged: bool, degrees: u32) -> Result<SceneView, String> {
    let turn = QuarterTurn::from_degrees(degrees).ok_or_else(|| format!("{degrees} is not a quarter turn"))?;
    let s = load(seed, fogged)?;
    let (w, h) = (s.image.width() as f64, s.image.height() as f64);
    let mut boxes = Vec::with_capacity(4 * s.annotations.len());
    for a in &s.annotations {
        boxes.extend(rotate_box(&a.bbox, turn, w, h).map_err(|e| e.to_string())?.to_array());
    }
    let caption = format!("turned {degrees} degrees, rotation label {}", turn.index());
    Ok(SceneView::new(&rotate_image(&s.image, turn), &s, boxes, caption))
}

fn describe(op: &AugmentOp) -> String {
    match *op {
        AugmentOp::Brightness { shift } => format!("brightness {shift:+.3}"),
        AugmentOp::Contrast { factor } => format!("contrast x{factor:.3}"),
        AugmentOp::Color { factors: [r, g, b] } => format!("color x({r:.2}, {g:.2}, {b:.2})"),
        AugmentOp::Solarize { threshold } => format!("solarize above {threshold:.3}"),
        AugmentOp::Posterize { bits } => format!("posterize {bits} bits"),
        AugmentOp::Gamma { gamma } => format!("gamma {gamma:.3}"),
        AugmentOp::Noise { std, .. } => format!("noise std {std:.3}"),
    }
}

/// The scene under `op_count` ops drawn from the default pool by
/// `aug_seed`. Ops are pointwise, so the boxes are unchanged.
#[wasm_bindgen]
pub fn augmented_scene(seed: u32, fogged: bool, aug_seed: u32, op_count: usize) -> Result<SceneView, String> {
    let s = load(seed, fogged)?;
    let policy = AugmentationPolicy { op_count, ..AugmentationPolicy::default() };
    let ops: Vec<String> = policy.sample_ops(aug_seed.into()).iter().map(describe).collect();
    let caption = if ops.is_empty() { "no ops".to_owned() } else { ops.join(", then ") };
    Ok(SceneView::new(&augment(&s.image, &policy, aug_seed.into()), &s, flat_boxes(&s), caption))
}
