use proptest::prelude::*;
use rpcl::geometry::{rotate_box, BoundingBox, QuarterTurn};
use rpcl::imaging::{augment, rotate_image, AugmentKind, AugmentationPolicy, ImageBuffer};

fn image_from(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut z = seed;
    let data = (0..h * w * 3)
        .map(|_| {
            z = z.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (z >> 40) as f64 / (1u64 << 24) as f64
        })
        .collect();
    ImageBuffer::from_vec(h, w, data)
}

/// Bounding box of the nonzero pixels of a mask image.
fn mask_bbox(img: &ImageBuffer) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..img.height() {
        for c in 0..img.width() {
            if img.pixel(r, c)[0] > 0.5 {
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c + 1);
                y1 = y1.max(r + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap())
}

fn arb_policy() -> impl Strategy<Value = AugmentationPolicy> {
    (1usize..4, prop::sample::subsequence(AugmentKind::POOL.to_vec(), 1..=AugmentKind::POOL.len()))
        .prop_map(|(op_count, pool)| AugmentationPolicy { op_count, pool, ..AugmentationPolicy::default() })
}

proptest! {
    #[test]
    fn augmentation_is_pixelwise(
        policy in arb_policy(),
        seed in any::<u64>(),
        img_seed in any::<u64>(),
        row in 0usize..9,
        col in 0usize..7,
        delta in prop::array::uniform3(-0.5..0.5f64),
    ) {
        let img = image_from(9, 7, img_seed);
        let mut poked = img.clone();
        let p = img.pixel(row, col);
        poked.set_pixel(row, col, [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]]);
        let (a, b) = (augment(&img, &policy, seed), augment(&poked, &policy, seed));
        for r in 0..9 {
            for c in 0..7 {
                if (r, c) != (row, col) {
                    prop_assert_eq!(a.pixel(r, c), b.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn augmentation_preserves_shape_and_range(policy in arb_policy(), seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let out = augment(&image_from(h, w, seed ^ 7), &policy, seed);
        prop_assert_eq!((out.height(), out.width()), (h, w));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rotated_mask_bbox_is_rotated_box(
        w in 2u32..20, h in 2u32..20,
        a in (0u32..100, 0u32..100, 1u32..100, 1u32..100),
        turn in 0usize..4,
    ) {
        let x0 = a.0 % (w - 1);
        let y0 = a.1 % (h - 1);
        let x1 = x0 + 1 + a.2 % (w - x0);
        let y1 = y0 + 1 + a.3 % (h - y0);
        let x1 = x1.min(w);
        let y1 = y1.min(h);
        let b = BoundingBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap();
        let mut mask = ImageBuffer::filled(h as usize, w as usize, [0.0; 3]);
        for r in y0..y1 {
            for c in x0..x1 {
                mask.set_pixel(r as usize, c as usize, [1.0; 3]);
            }
        }
        let turn = QuarterTurn::from_index(turn);
        let rotated = rotate_image(&mask, turn);
        prop_assert_eq!(mask_bbox(&rotated).unwrap(), rotate_box(&b, turn, w as f64, h as f64).unwrap());
    }

    #[test]
    fn four_turns_restore_any_image(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let img = image_from(h, w, seed);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate_image(&r, QuarterTurn::Deg90);
        }
        prop_assert_eq!(r, img);
    }
}
