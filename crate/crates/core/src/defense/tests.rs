use super::*;
use crate::attack::random_patch;
use crate::dataset::generate_dataset;
use crate::rng::CounterRng;
use crate::scene::{CollectionConfig, SimulationConfig, Task};

fn constant(w: usize, h: usize, v: f64) -> Vec<f64> {
    vec![v; w * h * 3]
}

/// Mid-gray image with a black/white checkerboard in `[x0, x1) x [y0, y1)`.
fn checker(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<f64> {
    let mut img = constant(w, h, 0.4);
    for y in y0..y1 {
        for x in x0..x1 {
            let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
            img[3 * (y * w + x)..3 * (y * w + x) + 3].fill(v);
        }
    }
    img
}

#[test]
fn lgs_leaves_constant_images_alone() {
    let img = constant(40, 30, 0.3);
    assert_eq!(lgs_defend(&img, 40, 30, &LgsParams::default()).unwrap(), img);
}

#[test]
fn lgs_darkens_texture_and_keeps_smooth_regions() {
    let (w, h) = (60, 40);
    let img = checker(w, h, 20, 40, 10, 30);
    let out = lgs_defend(&img, w, h, &LgsParams::default()).unwrap();
    // Direct oracle: zero forward differences mean an untouched pixel.
    let gray: Vec<f64> = img.chunks(3).map(|p| p[0]).collect();
    let mut darkened = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x + 1 < w { gray[i + 1] - gray[i] } else { 0.0 };
            let dy = if y + 1 < h { gray[i + w] - gray[i] } else { 0.0 };
            if dx == 0.0 && dy == 0.0 {
                assert!((out[3 * i] - img[3 * i]).abs() <= 1e-9, "({x},{y}) changed");
            } else if (21..39).contains(&x) && (11..29).contains(&y) {
                // Inside the checkerboard every pixel hits the block maximum.
                assert_eq!(out[3 * i], 0.0, "({x},{y})");
                darkened += 1;
            }
        }
    }
    assert!(darkened > 300);
}

#[test]
fn lgs_output_is_bounded() {
    let mut rng = CounterRng::new(3, "lgs-fuzz", 0);
    for _ in 0..10 {
        let (w, h) = (rng.range_inclusive(1, 40) as usize, rng.range_inclusive(1, 40) as usize);
        let img: Vec<f64> = (0..w * h * 3).map(|_| rng.next_f64()).collect();
        let out = lgs_defend(&img, w, h, &LgsParams::default()).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let bad = LgsParams {
        overlap: 15,
        ..LgsParams::default()
    };
    assert!(lgs_defend(&constant(4, 4, 0.0), 4, 4, &bad).is_err());
}

#[test]
fn mask_defense_cases() {
    let img: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    assert_eq!(mask_defend(&img, &[false; 4]).unwrap(), img);
    assert_eq!(mask_defend(&img, &[true; 4]).unwrap(), vec![MASK_GRAY; 12]);
    assert!(mask_defend(&img, &[true; 3]).is_err());
}

#[test]
fn reference_detector_properties() {
    let (w, h) = (64, 48);
    assert_eq!(reference_detector(&constant(w, h, 0.7), w, h).unwrap().score, 0.0);
    let img = checker(w, h, 10, 30, 5, 25);
    let s = reference_detector(&img, w, h).unwrap().score;
    assert!(s > 0.0);
    let scaled: Vec<f64> = img.iter().map(|v| 0.5 * v).collect();
    let s2 = reference_detector(&scaled, w, h).unwrap().score;
    assert!((s2 - 0.5 * s).abs() <= 1e-12 * s);
}

#[test]
fn detector_mask_properties() {
    let (w, h) = (160, 96);
    let empty = detector_mask(&constant(w, h, 0.2), w, h, &ReferenceDetector, DEFAULT_MASK_QUANTILE).unwrap();
    assert!(empty.iter().all(|&m| !m));
    let img = checker(w, h, 64, 96, 32, 64);
    let mask = detector_mask(&img, w, h, &ReferenceDetector, 0.9).unwrap();
    let area = mask.iter().filter(|&&m| m).count();
    let blocks = (w / DETECTOR_BLOCK) * (h / DETECTOR_BLOCK);
    // Hot blocks are at most (1 - q) of all blocks; dilation grows each by 3x3.
    let bound = ((1.0 - 0.9) * blocks as f64).ceil() as usize * 9 * DETECTOR_BLOCK * DETECTOR_BLOCK;
    assert!(area > 0 && area <= bound);
    assert!(mask[40 * w + 70]);
    assert!(!mask[5 * w + 5]);
    assert!(detector_mask(&img, w, h, &ConstantDetector, 0.9).is_err());
}

fn twin_pair(n: usize) -> (Dataset, Dataset) {
    let mut cfg = CollectionConfig::new(Task::Detection2D, "billboard02");
    cfg.num_samples = n;
    cfg.seed = Some(4);
    cfg.resolution = Some((128, 96));
    let sim = SimulationConfig::default();
    let clean = generate_dataset(&cfg, &sim, &cfg.profile(), &[]).unwrap();
    let adv = generate_dataset(&cfg, &sim, &cfg.profile(), &[random_patch(1, (30, 60))]).unwrap();
    (adv, clean)
}

#[test]
fn detection_eval_reference_values() {
    let (adv, clean) = twin_pair(6);
    assert_eq!(detection_eval(&OracleDetector, &adv, &clean).unwrap().auroc, 1.0);
    assert_eq!(detection_eval(&ConstantDetector, &adv, &clean).unwrap().auroc, 0.5);
    let r = detection_eval(&ReferenceDetector, &adv, &clean).unwrap();
    assert_eq!(r.scores.len(), 12);
    let mut wins = 0.0;
    for p in r.scores.iter().filter(|s| s.is_patched) {
        for q in r.scores.iter().filter(|s| !s.is_patched) {
            wins += if p.score > q.score {
                1.0
            } else if p.score == q.score {
                0.5
            } else {
                0.0
            };
        }
    }
    assert_eq!(r.auroc, wins / 36.0);
}

#[test]
fn detection_eval_requires_twins() {
    let (adv, clean) = twin_pair(2);
    assert!(matches!(detection_eval(&OracleDetector, &clean, &clean), Err(Error::NotTwins(_))));
    let mut other = clean.clone();
    other.manifest.seed += 1;
    assert!(matches!(detection_eval(&OracleDetector, &adv, &other), Err(Error::NotTwins(_))));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..24, 1usize..24).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(0.0..=1.0f64, w * h * 3)))
    }

    proptest! {
        #[test]
        fn lgs_output_stays_in_range_and_never_brightens((w, h, img) in arb_image()) {
            let out = lgs_defend(&img, w, h, &LgsParams::default()).unwrap();
            for (a, b) in img.iter().zip(&out) {
                prop_assert!((0.0..=1.0).contains(b));
                prop_assert!(*b <= *a + 1e-12);
            }
        }

        #[test]
        fn mask_defense_touches_only_masked_pixels((w, h, img) in arb_image(), seed in any::<u64>()) {
            let mut rng = CounterRng::new(seed, "mask-prop", 0);
            let mask: Vec<bool> = (0..w * h).map(|_| rng.below(2) == 1).collect();
            let out = mask_defend(&img, &mask).unwrap();
            for (i, &m) in mask.iter().enumerate() {
                let want = if m { [MASK_GRAY; 3] } else { [img[3 * i], img[3 * i + 1], img[3 * i + 2]] };
                prop_assert_eq!(&out[3 * i..3 * i + 3], &want[..]);
            }
        }

        #[test]
        fn reference_score_scales_with_contrast((w, h, img) in arb_image(), alpha in 0.0..1.0f64) {
            let s = reference_detector(&img, w, h).unwrap().score;
            let scaled: Vec<f64> = img.iter().map(|v| alpha * v).collect();
            let t = reference_detector(&scaled, w, h).unwrap().score;
            prop_assert!((t - alpha * s).abs() <= 1e-12 * s.max(1.0));
        }
    }
}
