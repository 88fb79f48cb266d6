//! RGB image container, quarter-turn rotation and the pointwise
//! augmentation policy used by consistency learning.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::QuarterTurn;

pub const CHANNELS: usize = 3;

/// `height x width x 3` intensities in `[0, 1]`, row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    /// Panics on zero dimensions.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let data = (0..height * width).flat_map(|_| rgb.map(|v| v.clamp(0.0, 1.0))).collect();
        Self { height, width, data }
    }

    /// Wraps raw values, clamping them into `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        assert_eq!(data.len(), height * width * CHANNELS, "buffer length mismatch");
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * CHANNELS
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let o = self.offset(row, col);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let o = self.offset(row, col);
        for c in 0..CHANNELS {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every value and clamps the result.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect();
        Self { data, ..*self }
    }

    /// 8-bit RGB bytes, each value quantized with `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_vec(height, width, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_rgb8(h as usize, w as usize, img.as_raw()))
    }
}

/// Counterclockwise quarter-turn by index permutation, consistent with
/// [`QuarterTurn::map_point`]: the pixel with center `(x, y)` lands on the
/// pixel whose center is the mapped point.
pub fn rotate_image(img: &ImageBuffer, turn: QuarterTurn) -> ImageBuffer {
    let (w, h) = (img.width, img.height);
    let (rw, rh) = turn.rotated_dims(w, h);
    let mut data = vec![0.0; img.data.len()];
    for r in 0..h {
        for c in 0..w {
            let (nc, nr) = match turn {
                QuarterTurn::Deg0 => (c, r),
                QuarterTurn::Deg90 => (r, w - 1 - c),
                QuarterTurn::Deg180 => (w - 1 - c, h - 1 - r),
                QuarterTurn::Deg270 => (h - 1 - r, c),
            };
            let src = img.offset(r, c);
            let dst = (nr * rw + nc) * CHANNELS;
            data[dst..dst + CHANNELS].copy_from_slice(&img.data[src..src + CHANNELS]);
        }
    }
    ImageBuffer { height: rh, width: rw, data }
}

/// The op families in the augmentation pool. All of them are pointwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Brightness,
    Contrast,
    Color,
    Solarize,
    Posterize,
    Gamma,
    Noise,
}

impl AugmentKind {
    pub const POOL: [AugmentKind; 7] = [
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Color,
        AugmentKind::Solarize,
        AugmentKind::Posterize,
        AugmentKind::Gamma,
        AugmentKind::Noise,
    ];
}

/// A concrete, fully parameterized augmentation op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    /// `v + shift`
    Brightness { shift: f64 },
    /// `0.5 + factor * (v - 0.5)`
    Contrast { factor: f64 },
    /// `v_c * factor_c`
    Color { factors: [f64; 3] },
    /// `1 - v` where `v > threshold`
    Solarize { threshold: f64 },
    /// drops `bits` low-order bits of the 8-bit value
    Posterize { bits: u32 },
    /// `v ^ gamma`
    Gamma { gamma: f64 },
    /// `v + std * n(i, j, c)` with standard-normal `n` drawn from `seed`
    Noise { std: f64, seed: u64 },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::Brightness { .. } => AugmentKind::Brightness,
            AugmentOp::Contrast { .. } => AugmentKind::Contrast,
            AugmentOp::Color { .. } => AugmentKind::Color,
            AugmentOp::Solarize { .. } => AugmentKind::Solarize,
            AugmentOp::Posterize { .. } => AugmentKind::Posterize,
            AugmentOp::Gamma { .. } => AugmentKind::Gamma,
            AugmentOp::Noise { .. } => AugmentKind::Noise,
        }
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        match *self {
            AugmentOp::Brightness { shift } => img.map_values(|v| v + shift),
            AugmentOp::Contrast { factor } => img.map_values(|v| 0.5 + factor * (v - 0.5)),
            AugmentOp::Color { factors } => {
                let mut i = 0;
                img.map_values(|v| {
                    let out = v * factors[i % CHANNELS];
                    i += 1;
                    out
                })
            }
            AugmentOp::Solarize { threshold } => {
                img.map_values(|v| if v > threshold { 1.0 - v } else { v })
            }
            AugmentOp::Posterize { bits } => {
                if bits == 0 {
                    return img.clone();
                }
                let levels = (1u32 << (8 - bits.min(7))) as f64;
                img.map_values(|v| (v * levels).floor().min(levels - 1.0) / (levels - 1.0))
            }
            AugmentOp::Gamma { gamma } => img.map_values(|v| v.powf(gamma)),
            AugmentOp::Noise { std, seed } => {
                if std == 0.0 {
                    return img.clone();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                img.map_values(|v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v + std * n
                })
            }
        }
    }
}

/// Magnitude range `[lo, hi]` sampled uniformly for one op family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRange {
    pub lo: f64,
    pub hi: f64,
}

impl MagnitudeRange {
    pub const ZERO: MagnitudeRange = MagnitudeRange { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi <= self.lo {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

/// Magnitude ranges per op family. Each magnitude is "distance from the
/// identity": zero magnitude always yields the unchanged image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Magnitudes {
    /// absolute brightness shift
    pub brightness: MagnitudeRange,
    /// `|factor - 1|` of the contrast scale
    pub contrast: MagnitudeRange,
    /// max `|factor_c - 1|` of the per-channel scales
    pub color: MagnitudeRange,
    /// `1 - threshold`
    pub solarize: MagnitudeRange,
    /// fraction of the 6 droppable low-order bits
    pub posterize: MagnitudeRange,
    /// `|ln gamma|`
    pub gamma: MagnitudeRange,
    /// noise standard deviation
    pub noise: MagnitudeRange,
}

impl Magnitudes {
    pub const ZERO: Magnitudes = Magnitudes {
        brightness: MagnitudeRange::ZERO,
        contrast: MagnitudeRange::ZERO,
        color: MagnitudeRange::ZERO,
        solarize: MagnitudeRange::ZERO,
        posterize: MagnitudeRange::ZERO,
        gamma: MagnitudeRange::ZERO,
        noise: MagnitudeRange::ZERO,
    };

    pub fn range(&self, kind: AugmentKind) -> MagnitudeRange {
        match kind {
            AugmentKind::Brightness => self.brightness,
            AugmentKind::Contrast => self.contrast,
            AugmentKind::Color => self.color,
            AugmentKind::Solarize => self.solarize,
            AugmentKind::Posterize => self.posterize,
            AugmentKind::Gamma => self.gamma,
            AugmentKind::Noise => self.noise,
        }
    }
}

impl Default for Magnitudes {
    fn default() -> Self {
        Self {
            brightness: MagnitudeRange::new(0.0, 0.25),
            contrast: MagnitudeRange::new(0.0, 0.6),
            color: MagnitudeRange::new(0.0, 0.4),
            solarize: MagnitudeRange::new(0.0, 0.3),
            posterize: MagnitudeRange::new(0.0, 1.0),
            gamma: MagnitudeRange::new(0.0, 0.6),
            noise: MagnitudeRange::new(0.0, 0.06),
        }
    }
}

/// RandAugment-style policy restricted to position-preserving ops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub op_count: usize,
    pub pool: Vec<AugmentKind>,
    pub magnitudes: Magnitudes,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { op_count: 2, pool: AugmentKind::POOL.to_vec(), magnitudes: Magnitudes::default() }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self { magnitudes: Magnitudes::ZERO, ..Self::default() }
    }

    /// Draws `op_count` ops uniformly with replacement, each with a uniform
    /// magnitude, fully determined by `seed`.
    pub fn sample_ops(&self, seed: u64) -> Vec<AugmentOp> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if self.pool.is_empty() {
            return Vec::new();
        }
        (0..self.op_count)
            .map(|_| {
                let kind = self.pool[rng.random_range(0..self.pool.len())];
                let m = self.magnitudes.range(kind).sample(&mut rng);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                match kind {
                    AugmentKind::Brightness => AugmentOp::Brightness { shift: sign * m },
                    AugmentKind::Contrast => AugmentOp::Contrast { factor: (1.0 + sign * m).max(0.0) },
                    AugmentKind::Color => {
                        let factors =
                            [(); 3].map(|_| (1.0 + m * rng.random_range(-1.0..=1.0)).max(0.0));
                        AugmentOp::Color { factors }
                    }
                    AugmentKind::Solarize => AugmentOp::Solarize { threshold: 1.0 - m },
                    AugmentKind::Posterize => AugmentOp::Posterize { bits: (m * 6.0).round() as u32 },
                    AugmentKind::Gamma => AugmentOp::Gamma { gamma: (sign * m).exp() },
                    AugmentKind::Noise => AugmentOp::Noise { std: m, seed: rng.random() },
                }
            })
            .collect()
    }
}

/// Applies the sampled ops of `policy` in order, clamping after each.
pub fn augment(img: &ImageBuffer, policy: &AugmentationPolicy, seed: u64) -> ImageBuffer {
    policy.sample_ops(seed).iter().fold(img.clone(), |acc, op| op.apply(&acc))
}
