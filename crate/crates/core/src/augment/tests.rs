use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::testutil::rng;

const W: usize = 32;
const H: usize = 32;

fn movable() -> MovableClassSet {
    MovableClassSet::new(vec![3, 4], 5).unwrap()
}

/// Flat scene at depth `d` with rectangles `(x0, x1, y0, y1, class, depth)`
/// painted in order; each class gets its own color.
fn scene(d: f32, rects: &[(usize, usize, usize, usize, u8, f32)]) -> Sample {
    let hw = H * W;
    let mut s = Sample {
        height: H,
        width: W,
        image: vec![0.2; 3 * hw],
        depth: vec![d; hw],
        labels: vec![0; hw],
        softmax: None,
    };
    for &(x0, x1, y0, y1, class, depth) in rects {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = y * W + x;
                s.labels[p] = class;
                s.depth[p] = depth;
                s.image[p] = 0.1 * class as f32;
                s.image[hw + p] = 0.9;
                s.image[2 * hw + p] = 0.05 * class as f32;
            }
        }
    }
    s
}

fn with_softmax(mut s: Sample, classes: usize) -> Sample {
    let hw = s.pixels();
    let mut soft = vec![0.0; classes * hw];
    for p in 0..hw {
        let l = s.labels[p] as usize;
        for k in 0..classes {
            soft[k * hw + p] = if k == l { 0.6 } else { 0.4 / (classes - 1) as f32 };
        }
    }
    s.softmax = Some(soft);
    s
}

#[test]
fn select_single_blob_and_centroid() {
    let s = scene(10.0, &[(4, 7, 10, 11, 3, 10.0)]);
    let obj = select_movable_object(&s.labels, H, W, &movable(), &mut rng(0)).unwrap();
    assert_eq!(obj.class, 3);
    assert_eq!(obj.mask.iter().filter(|m| **m).count(), 8);
    assert!((obj.anchor.0 - 6.0 / 32.0).abs() < 1e-12);
    assert!((obj.anchor.1 - 11.0 / 32.0).abs() < 1e-12);
}

#[test]
fn no_movable_pixels_is_an_error() {
    let s = scene(10.0, &[(4, 7, 10, 11, 2, 10.0)]);
    assert_eq!(select_movable_object(&s.labels, H, W, &movable(), &mut rng(0)), Err(Error::NoMovableObject));
    let params = AffineMixParams { scale: 1.0, class: 3, component: 0, anchor: (0.5, 0.5), seed: 0 };
    assert!(matches!(affinemix(&s, &movable(), &params), Err(Error::NoMovableObject)));
}

#[test]
fn components_use_four_connectivity() {
    let mut labels = vec![0u8; 9];
    labels[0] = 3;
    labels[4] = 3; // diagonal neighbour only
    labels[5] = 4;
    let comps = movable_components(&labels, 3, 3, &movable());
    assert_eq!(comps.len(), 3);
    assert_eq!(comps[0].pixels, vec![0]);
}

#[test]
fn equal_blobs_are_picked_equally_often() {
    let s = scene(10.0, &[(2, 5, 2, 5, 3, 10.0), (20, 23, 20, 23, 3, 10.0)]);
    let a = select_movable_object(&s.labels, H, W, &movable(), &mut rng(42)).unwrap();
    let b = select_movable_object(&s.labels, H, W, &movable(), &mut rng(42)).unwrap();
    assert_eq!(a, b);
    let draws = 10_000;
    let mut r = rng(7);
    let first = (0..draws)
        .filter(|_| select_movable_object(&s.labels, H, W, &movable(), &mut r).unwrap().component == 0)
        .count();
    let freq = first as f64 / draws as f64;
    assert!((freq - 0.5).abs() < 0.02, "{freq}");
}

#[test]
fn offset_examples() {
    assert_eq!(compute_offsets(1.0, (0.3, 0.7)).unwrap(), (0.0, 0.0));
    assert!((compute_offsets(2.0, (0.6, 0.0)).unwrap().0 - 0.3).abs() < 1e-15);
    assert!((compute_offsets(0.5, (0.4, 0.0)).unwrap().0 + 0.4).abs() < 1e-15);
    assert!(compute_offsets(0.0, (0.4, 0.4)).is_err());
    assert!(compute_offsets(-1.0, (0.4, 0.4)).is_err());
}

#[test]
fn unit_scale_warp_is_bit_identical() {
    let s = with_softmax(scene(7.5, &[(3, 9, 4, 12, 3, 4.25), (15, 20, 2, 6, 2, 3.0)]), 5);
    assert_eq!(affine_warp_image(&s.image, H, W, 1.0, (0.0, 0.0)), s.image);
    assert_eq!(affine_warp_depth(&s.depth, H, W, 1.0, (0.0, 0.0)), s.depth);
    assert_eq!(affine_warp_labels(&s.labels, H, W, 1.0, (0.0, 0.0)), s.labels);
    assert_eq!(affine_warp_softmax(s.softmax.as_ref().unwrap(), H, W, 1.0, (0.0, 0.0)), *s.softmax.as_ref().unwrap());
}

#[test]
fn nearest_warp_never_invents_classes() {
    let s = scene(7.5, &[(3, 9, 4, 12, 3, 4.0), (15, 20, 2, 6, 2, 3.0), (10, 30, 20, 30, 4, 2.0)]);
    let warped = affine_warp_labels(&s.labels, H, W, 0.5, (0.25, -0.1));
    assert!(warped.iter().all(|l| *l == IGNORE_INDEX || s.labels.contains(l)));
    assert!(warped.contains(&IGNORE_INDEX));
}

#[test]
fn checkerboard_round_trip() {
    let (h, w) = (64, 64);
    let board: Vec<f32> = (0..h * w).map(|p| if ((p % w) / 8 + (p / w) / 8) % 2 == 0 { 2.0 } else { 6.0 }).collect();
    let s = 0.8;
    let anchor = (0.5, 0.5);
    let t = compute_offsets(s, anchor).unwrap();
    let back_t = compute_offsets(1.0 / s, anchor).unwrap();
    let there = affine_warp_depth(&board, h, w, 1.0 / s, t);
    let back = affine_warp_depth(&there, h, w, s, back_t);
    let mut checked = 0;
    for y in 12..52 {
        for x in 12..52 {
            // skip pixels within two pixels of a square edge
            let near_edge = [x % 8, y % 8].iter().any(|&r| r < 2 || r > 5);
            if near_edge {
                continue;
            }
            let p = y * w + x;
            assert!((back[p] - board[p]).abs() < 1e-4, "({x},{y}): {} vs {}", back[p], board[p]);
            checked += 1;
        }
    }
    assert!(checked > 300);
}

#[test]
fn affinemix_unit_scale_is_identity() {
    let s = with_softmax(scene(9.0, &[(3, 9, 4, 12, 3, 4.0), (15, 20, 2, 6, 4, 3.0)]), 5);
    s.validate(5).unwrap();
    for comp in 0..2 {
        let c = &movable_components(&s.labels, H, W, &movable())[comp];
        let params = AffineMixParams { scale: 1.0, class: c.class, component: comp, anchor: c.anchor(H, W), seed: 0 };
        let out = affinemix(&s, &movable(), &params).unwrap();
        assert_eq!(out.sample, s);
        assert_eq!(out.mask, c.mask(H * W));
    }
}

fn bilinear_oracle(plane: &[f32], sx: f64, sy: f64) -> f32 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let at = |x: f64, y: f64| {
        let xi = x.clamp(0.0, (W - 1) as f64) as usize;
        let yi = y.clamp(0.0, (H - 1) as f64) as usize;
        plane[yi * W + xi] as f64
    };
    let (fx, fy) = (sx - x0, sy - y0);
    let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1.0, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1.0) + fx * at(x0 + 1.0, y0 + 1.0));
    v as f32
}

#[test]
fn flat_scene_object_is_pasted_at_twice_the_size() {
    let s = scene(10.0, &[(12, 19, 12, 19, 3, 10.0)]);
    let params = sample_for(&s, 0.5);
    assert_eq!(params.anchor, (0.5, 0.5));
    let out = affinemix(&s, &movable(), &params).unwrap();
    let hw = H * W;
    let mut pasted = 0;
    for y in 0..H {
        for x in 0..W {
            let p = y * W + x;
            // u = s(u' − t), t = −0.5 at anchor 0.5, s = 0.5
            let sx = 0.5 * (x as f64 + 0.5) + 8.0 - 0.5;
            let sy = 0.5 * (y as f64 + 0.5) + 8.0 - 0.5;
            let inside = (12..=19).contains(&(sx.round() as i64)) && (12..=19).contains(&(sy.round() as i64));
            assert_eq!(out.mask[p], inside, "({x},{y})");
            if inside {
                pasted += 1;
                assert_eq!(out.sample.labels[p], 3);
                assert!((out.sample.depth[p] - 5.0).abs() < 1e-6);
                for c in 0..3 {
                    let want = bilinear_oracle(&s.image[c * hw..(c + 1) * hw], sx, sy);
                    assert!((out.sample.image[c * hw + p] - want).abs() < 1e-6);
                }
            } else {
                assert_eq!(out.sample.labels[p], s.labels[p]);
                assert_eq!(out.sample.depth[p], s.depth[p]);
            }
        }
    }
    assert_eq!(pasted, 256);
}

fn sample_for(s: &Sample, scale: f64) -> AffineMixParams {
    let c = &movable_components(&s.labels, H, W, &movable())[0];
    AffineMixParams { scale, class: c.class, component: 0, anchor: c.anchor(H, W), seed: 0 }
}

#[test]
fn nearer_surfaces_occlude_the_pasted_object() {
    // static block at depth 3 just left of the object, inside its enlarged footprint
    let s = scene(10.0, &[(12, 19, 12, 19, 3, 10.0), (9, 10, 12, 19, 2, 3.0)]);
    let out = affinemix(&s, &movable(), &sample_for(&s, 0.5)).unwrap();
    for y in 12..=19 {
        for x in 9..=10 {
            let p = y * W + x;
            assert!(!out.mask[p]);
            assert_eq!(out.sample.depth[p], 3.0);
            assert_eq!(out.sample.labels[p], 2);
        }
    }
    assert!(out.mask.iter().filter(|m| **m).count() > 200);
}

#[test]
fn farther_scale_leaves_object_behind_its_own_copy() {
    let s = scene(10.0, &[(12, 19, 12, 19, 3, 10.0)]);
    let out = affinemix(&s, &movable(), &sample_for(&s, 1.4)).unwrap();
    // D_a = 14 > 10 everywhere, nothing is pasted
    assert!(out.mask.iter().all(|m| !m));
    assert_eq!(out.sample, s);
}

#[test]
fn coloraug_gate_and_identity() {
    let s = scene(10.0, &[(12, 19, 12, 19, 3, 10.0)]);
    let img = coloraug(&s.image, &s.labels, &movable(), &mut rng(0), 0.30).unwrap();
    assert_eq!(img, s.image);
    let mask: Vec<bool> = s.labels.iter().map(|l| *l == 3).collect();
    assert_eq!(apply_color_aug(&s.image, &mask, ColorFactors::IDENTITY, ColorFactors::IDENTITY).unwrap(), s.image);
    let open = coloraug(&s.image, &s.labels, &movable(), &mut rng(0), 0.75).unwrap();
    assert_ne!(open, s.image);
    assert!(open.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn coloraug_brightness_ratio_on_gray_image() {
    let hw = 16;
    let image = vec![0.5f32; 3 * hw];
    let mask: Vec<bool> = (0..hw).map(|p| p % 3 == 0).collect();
    let bright = ColorFactors { brightness: 1.2, ..ColorFactors::IDENTITY };
    let dark = ColorFactors { brightness: 0.8, ..ColorFactors::IDENTITY };
    let out = apply_color_aug(&image, &mask, bright, dark).unwrap();
    for p in 0..hw {
        for c in 0..3 {
            let want = if mask[p] { 0.6 } else { 0.4 };
            assert!((out[c * hw + p] - want).abs() < 1e-6);
        }
    }
    let mean = |sel: bool| -> f32 {
        let v: Vec<f32> = (0..hw).filter(|&p| mask[p] == sel).map(|p| out[p]).collect();
        v.iter().sum::<f32>() / v.len() as f32
    };
    assert!((mean(true) / mean(false) - 1.5).abs() < 1e-5);
}

#[test]
fn coloraug_contrast_and_saturation_oracle() {
    let hw = 4;
    let image = vec![0.2, 0.4, 0.6, 0.8, 0.3, 0.3, 0.3, 0.3, 0.1, 0.5, 0.1, 0.5];
    let mask = vec![true; hw];
    let f = ColorFactors { brightness: 1.0, contrast: 1.1, saturation: 0.9 };
    let out = apply_color_aug(&image, &mask, f, ColorFactors::IDENTITY).unwrap();
    let mean = image.iter().map(|v| *v as f64).sum::<f64>() / 12.0;
    for p in 0..hw {
        let c: Vec<f64> = (0..3).map(|k| (image[k * hw + p] as f64 - mean) * 1.1 + mean).collect();
        let g = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        for k in 0..3 {
            let want = (g + (c[k] - g) * 0.9).clamp(0.0, 1.0);
            assert!((out[k * hw + p] as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn validation_catches_bad_samples() {
    let mut s = scene(10.0, &[]);
    s.validate(5).unwrap();
    s.depth[3] = 0.0;
    assert!(s.validate(5).is_err());
    let mut s = scene(10.0, &[]);
    s.labels[0] = 9;
    assert!(s.validate(5).is_err());
    s.labels[0] = IGNORE_INDEX;
    s.validate(5).unwrap();
    s.softmax = Some(vec![0.5; H * W]);
    assert!(s.validate(5).is_err());
    assert!(MovableClassSet::new(vec![], 5).is_err());
    assert!(MovableClassSet::new(vec![7], 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixing_keeps_nearer_wins_and_label_closure(seed in 0u64..10_000) {
        use rand::Rng as _;
        let mut r = rng(seed);
        let mut rects = Vec::new();
        for _ in 0..4 {
            let x0 = r.gen_range(0..W - 6);
            let y0 = r.gen_range(0..H - 6);
            let class = r.gen_range(1..5u8);
            rects.push((x0, x0 + r.gen_range(1..6), y0, y0 + r.gen_range(1..6), class, r.gen_range(2.0f32..15.0)));
        }
        rects.push((10, 14, 10, 14, 3, 6.0));
        let s = with_softmax(scene(18.0, &rects), 5);
        let params = sample_affinemix_params(&s, &movable(), seed).unwrap();
        prop_assert!(params.scale > 0.5 && params.scale < 1.5);
        let out = affinemix(&s, &movable(), &params).unwrap();
        out.sample.validate(5).unwrap();
        for p in 0..H * W {
            prop_assert!(out.sample.depth[p] <= s.depth[p]);
            prop_assert!(s.labels.contains(&out.sample.labels[p]));
            if !out.mask[p] {
                prop_assert_eq!(out.sample.labels[p], s.labels[p]);
                prop_assert_eq!(out.sample.depth[p], s.depth[p]);
            }
        }
    }

    #[test]
    fn pasted_area_scales_with_inverse_square(scale in 0.55f64..1.0, side in 4usize..8) {
        let lo = 16 - side / 2;
        let s = scene(18.0, &[(lo, lo + side - 1, lo, lo + side - 1, 4, 9.0)]);
        let out = affinemix(&s, &movable(), &sample_for(&s, scale)).unwrap();
        let pasted = out.mask.iter().filter(|m| **m).count() as f64;
        let want = (side * side) as f64 / (scale * scale);
        prop_assert!((pasted / want - 1.0).abs() <= 0.15 + 4.0 * side as f64 / scale / want, "{} vs {}", pasted, want);
    }

    #[test]
    fn coloraug_never_leaves_unit_range(seed in 0u64..10_000) {
        let s = scene(10.0, &[(2, 9, 3, 8, 3, 5.0), (12, 20, 12, 25, 2, 5.0)]);
        let img = coloraug(&s.image, &s.labels, &movable(), &mut rng(seed), 0.9).unwrap();
        prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
