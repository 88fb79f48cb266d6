//! Axis-aligned boxes in continuous pixel-edge coordinates.
//!
//! A box `(x_min, y_min, x_max, y_max)` covers the half-open pixel range
//! `[x_min, x_max) x [y_min, y_max)` when the corners are integers, so a
//! quarter turn maps edges to edges without any `±1` adjustment.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Axis-aligned bounding box. Corners are always ordered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvalidBox(coords));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Builds a box from a center and a size. Negative sizes are treated as zero.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        let hw = width.max(0.0) / 2.0;
        let hh = height.max(0.0) / 2.0;
        Self { x_min: cx - hw, y_min: cy - hh, x_max: cx + hw, y_max: cy + hh }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Clips the box to `[0, width] x [0, height]`. A box entirely outside
    /// collapses onto the nearest image edge.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x_min = self.x_min.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        Self {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, width),
            y_max: self.y_max.clamp(y_min, height),
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Counterclockwise rotation by a multiple of 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuarterTurn {
    Deg0,
    Deg90,
    Deg180,
    Deg270,
}

impl QuarterTurn {
    pub const ALL: [QuarterTurn; 4] =
        [QuarterTurn::Deg0, QuarterTurn::Deg90, QuarterTurn::Deg180, QuarterTurn::Deg270];

    /// Class index used by the rotation heads: 0..4.
    pub fn index(self) -> usize {
        match self {
            QuarterTurn::Deg0 => 0,
            QuarterTurn::Deg90 => 1,
            QuarterTurn::Deg180 => 2,
            QuarterTurn::Deg270 => 3,
        }
    }

    pub fn from_index(index: usize) -> Self {
        Self::ALL[index % 4]
    }

    pub fn degrees(self) -> u32 {
        self.index() as u32 * 90
    }

    pub fn from_degrees(degrees: u32) -> Option<Self> {
        (degrees % 90 == 0).then(|| Self::from_index((degrees / 90) as usize))
    }

    /// Addition modulo 360.
    pub fn compose(self, other: QuarterTurn) -> QuarterTurn {
        Self::from_index(self.index() + other.index())
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, QuarterTurn::Deg90 | QuarterTurn::Deg270)
    }

    /// Size `(width, height)` of a `width x height` image after this turn.
    pub fn rotated_dims<T>(self, width: T, height: T) -> (T, T) {
        if self.swaps_axes() {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Maps a point of a `width x height` image into the rotated frame.
    pub fn map_point(self, x: f64, y: f64, width: f64, height: f64) -> (f64, f64) {
        match self {
            QuarterTurn::Deg0 => (x, y),
            QuarterTurn::Deg90 => (y, width - x),
            QuarterTurn::Deg180 => (width - x, height - y),
            QuarterTurn::Deg270 => (height - y, x),
        }
    }
}

/// Rotates a box that lives inside a `image_width x image_height` image.
///
/// The result is expressed in the rotated image's frame, which is
/// `image_height x image_width` for 90 and 270 degrees.
pub fn rotate_box(
    b: &BoundingBox,
    turn: QuarterTurn,
    image_width: f64,
    image_height: f64,
) -> Result<BoundingBox, GeometryError> {
    if !b.is_within(image_width, image_height) {
        return Err(GeometryError::OutsideImage {
            coords: b.to_array(),
            width: image_width,
            height: image_height,
        });
    }
    let (w, h) = (image_width, image_height);
    let (x0, y0, x1, y1) = (b.x_min, b.y_min, b.x_max, b.y_max);
    let rotated = match turn {
        QuarterTurn::Deg0 => *b,
        QuarterTurn::Deg90 => BoundingBox { x_min: y0, y_min: w - x1, x_max: y1, y_max: w - x0 },
        QuarterTurn::Deg180 => {
            BoundingBox { x_min: w - x1, y_min: h - y1, x_max: w - x0, y_max: h - y0 }
        }
        QuarterTurn::Deg270 => BoundingBox { x_min: h - y1, y_min: x0, x_max: h - y0, y_max: x1 },
    };
    Ok(rotated)
}

/// Intersection over union. Zero when the union has zero area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy non-maximum suppression.
///
/// Keeps the highest-scoring box, drops every remaining box whose IoU with
/// it exceeds `iou_threshold`, and repeats. Equal scores keep input order.
pub fn nms(dets: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<(BoundingBox, f64)> {
    nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

/// Same as [`nms`] but returns indices into `dets`.
pub fn nms_indices(dets: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort: ties stay in input order
    order.sort_by(|&i, &j| dets[j].1.total_cmp(&dets[i].1));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].0, &dets[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
