mod common;

use std::collections::{BTreeMap, HashSet};

use aerovis::vision::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BG: [u8; 3] = [20, 20, 20];
const FG: [u8; 3] = [200, 30, 30];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Blob {
    area: usize,
    min_col: usize,
    max_col: usize,
    min_row: usize,
    max_row: usize,
}

/// Flood-fill reference for 4-connected components of exact-match pixels.
fn oracle_blobs(frame: &Frame, color: [u8; 3]) -> Vec<Blob> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let hit = |c: usize, r: usize| frame.pixel(c as u32, r as u32) == color;
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if seen[r0 * w + c0] || !hit(c0, r0) {
                continue;
            }
            let mut blob = Blob { area: 0, min_col: c0, max_col: c0, min_row: r0, max_row: r0 };
            let mut stack = vec![(c0, r0)];
            seen[r0 * w + c0] = true;
            while let Some((c, r)) = stack.pop() {
                blob.area += 1;
                blob.min_col = blob.min_col.min(c);
                blob.max_col = blob.max_col.max(c);
                blob.min_row = blob.min_row.min(r);
                blob.max_row = blob.max_row.max(r);
                let mut push = |c: usize, r: usize| {
                    if !seen[r * w + c] && hit(c, r) {
                        seen[r * w + c] = true;
                        stack.push((c, r));
                    }
                };
                if c > 0 {
                    push(c - 1, r);
                }
                if c + 1 < w {
                    push(c + 1, r);
                }
                if r > 0 {
                    push(c, r - 1);
                }
                if r + 1 < h {
                    push(c, r + 1);
                }
            }
            out.push(blob);
        }
    }
    out
}

fn blob_to_box(b: &Blob, w: u32, h: u32) -> NormalizedBox {
    let (w, h) = (f64::from(w), f64::from(h));
    NormalizedBox {
        x: (b.min_col + b.max_col + 1) as f64 / (2.0 * w),
        y: (b.min_row + b.max_row + 1) as f64 / (2.0 * h),
        w: (b.max_col - b.min_col + 1) as f64 / w,
        h: (b.max_row - b.min_row + 1) as f64 / h,
    }
}

fn scene() -> impl Strategy<Value = Frame> {
    (4u32..48, 4u32..48)
        .prop_flat_map(|(w, h)| {
            let rect = (0..w, 0..h, 1..=w, 1..=h);
            (Just(w), Just(h), proptest::collection::vec(rect, 0..5), proptest::collection::vec((0..w, 0..h), 0..20))
        })
        .prop_map(|(w, h, rects, dots)| {
            let mut f = Frame::filled(w, h, BG);
            for (c0, r0, cw, rh) in rects {
                f.fill_rect(c0, r0, c0 + cw, r0 + rh, FG);
            }
            for (c, r) in dots {
                f.fill_rect(c, r, c + 1, r + 1, FG);
            }
            f
        })
}

fn upscale(f: &Frame, k: u32) -> Frame {
    let mut out = Frame::filled(f.width() * k, f.height() * k, BG);
    for r in 0..f.height() {
        for c in 0..f.width() {
            out.fill_rect(c * k, r * k, (c + 1) * k, (r + 1) * k, f.pixel(c, r));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn blob_matches_flood_fill(frame in scene(), min_area in 1usize..12) {
        let want: Vec<Blob> =
            oracle_blobs(&frame, FG).into_iter().filter(|b| b.area >= min_area).collect();
        let got = detect_blob(&frame, FG, 0, min_area);
        prop_assert_eq!(got.len(), want.len());
        // Sorted by area, largest first.
        prop_assert!(got.windows(2).all(|p| p[0].bbox.w * p[0].bbox.h * p[0].confidence
            >= p[1].bbox.w * p[1].bbox.h * p[1].confidence - 1e-12));
        let mut got_boxes: Vec<String> = got.iter().map(|d| format!("{:?}", d.bbox)).collect();
        let mut want_boxes: Vec<String> = want
            .iter()
            .map(|b| format!("{:?}", blob_to_box(b, frame.width(), frame.height())))
            .collect();
        got_boxes.sort();
        want_boxes.sort();
        prop_assert_eq!(got_boxes, want_boxes);
        for d in &got {
            prop_assert!((0.0..=1.0).contains(&d.confidence) && d.confidence > 0.0);
            for v in [d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn blob_boxes_contain_their_pixels(frame in scene()) {
        let (w, h) = (f64::from(frame.width()), f64::from(frame.height()));
        let dets = detect_blob(&frame, FG, 0, 1);
        let covered = |c: u32, r: u32| dets.iter().any(|d| {
            let b = d.bbox;
            let (cx, cy) = ((f64::from(c) + 0.5) / w, (f64::from(r) + 0.5) / h);
            (cx - b.x).abs() <= b.w / 2.0 && (cy - b.y).abs() <= b.h / 2.0
        });
        for r in 0..frame.height() {
            for c in 0..frame.width() {
                if frame.pixel(c, r) == FG {
                    prop_assert!(covered(c, r), "pixel ({c}, {r}) outside every box");
                }
            }
        }
    }

    #[test]
    fn blob_invariant_under_upscaling(frame in scene(), k in 2u32..4) {
        let a = detect_blob(&frame, FG, 0, 1);
        let b = detect_blob(&upscale(&frame, k), FG, 0, 1);
        prop_assert_eq!(a.len(), b.len());
        let (pw, ph) = (1.0 / f64::from(frame.width()), 1.0 / f64::from(frame.height()));
        let key = |d: &Detection| (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h);
        let mut ka: Vec<_> = a.iter().map(key).collect();
        let mut kb: Vec<_> = b.iter().map(key).collect();
        ka.sort_by(|p, q| p.partial_cmp(q).unwrap());
        kb.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for (p, q) in ka.iter().zip(&kb) {
            prop_assert!((p.0 - q.0).abs() <= pw && (p.2 - q.2).abs() <= pw);
            prop_assert!((p.1 - q.1).abs() <= ph && (p.3 - q.3).abs() <= ph);
        }
    }

    #[test]
    fn tolerance_is_per_channel(delta in 0u8..40, tol in 0u8..40) {
        let shade = [FG[0] - delta, FG[1] + delta, FG[2]];
        let mut f = Frame::filled(10, 10, BG);
        f.fill_rect(2, 2, 8, 8, shade);
        let found = !detect_blob(&f, FG, tol, 1).is_empty();
        prop_assert_eq!(found, delta <= tol);
    }

    #[test]
    fn split_is_a_stratified_partition(n in 6usize..200, seed in any::<u64>()) {
        let data = synth_gesture_dataset(n, seed).unwrap();
        let ratios = [0.8, 0.1, 0.1];
        let split = stratified_split(&data, ratios, seed).unwrap();
        prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), n);
        let key = |s: &GestureSample| format!("{:?}", s);
        let all: HashSet<String> = data.iter().map(key).collect();
        let mut union = HashSet::new();
        for part in [&split.train, &split.val, &split.test] {
            for s in part.iter() {
                prop_assert!(union.insert(key(s)), "sample in two parts");
            }
        }
        prop_assert_eq!(union, all);
        let count = |part: &[GestureSample]| {
            let mut m = BTreeMap::new();
            part.iter().for_each(|(_, l)| *m.entry(l.index()).or_insert(0usize) += 1);
            m
        };
        let total = count(&data);
        for (part, ratio) in [(&split.train, ratios[0]), (&split.val, ratios[1]), (&split.test, ratios[2])] {
            let c = count(part);
            for (label, &n_class) in &total {
                let got = *c.get(label).unwrap_or(&0) as f64;
                prop_assert!((got - ratio * n_class as f64).abs() <= 1.0);
            }
        }
    }
}

#[test]
fn softmax_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let mut params = MlpParams::glorot(&mut rng);
        params.iter_mut().for_each(|v| *v *= rng.random_range(0.5..8.0));
        let mut k = [0.0; KEYPOINT_DIM];
        k.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let p = mlp_forward(&params, &HandKeypoints(k)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(p.iter().all(|&v| v > 0.0 || v == 0.0 && p.iter().any(|&u| u > 0.99)));
        let (_, conf) = predict_gesture(&params, &HandKeypoints(k)).unwrap();
        assert!((1.0 / 6.0 - 1e-12..=1.0).contains(&conf));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let worst = common::fd_max_rel_error(20, 1e-5, 3);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn duplicated_batch_leaves_loss_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = MlpParams::glorot(&mut rng);
    let data = synth_gesture_dataset(12, 5).unwrap();
    let batch: Vec<_> = data.iter().map(|(k, l)| (*k, l.index())).collect();
    let doubled: Vec<_> = batch.iter().chain(&batch).copied().collect();
    let (l1, g1) = mlp_loss_and_grad(&params, &batch).unwrap();
    let (l2, g2) = mlp_loss_and_grad(&params, &doubled).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    assert!(g1.iter().zip(g2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn loss_non_increasing_at_small_rate() {
    let data = synth_gesture_dataset(328, 0).unwrap();
    let cfg = TrainConfig { learning_rate: 0.005, epochs: 40, ..TrainConfig::default() };
    let (_, m) = train_gestures(&data, &cfg).unwrap();
    assert_eq!(m.loss_curve.len(), 41);
    for (i, w) in m.loss_curve.windows(2).enumerate() {
        assert!(w[1] <= w[0], "loss rose at epoch {}: {} -> {}", i + 1, w[0], w[1]);
    }
}

#[test]
fn zero_epochs_return_initialization() {
    let data = synth_gesture_dataset(60, 2).unwrap();
    let cfg = TrainConfig { epochs: 0, seed: 2, ..TrainConfig::default() };
    let (params, m) = train_gestures(&data, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(params, MlpParams::glorot(&mut rng));
    assert_eq!(m.best_epoch, 0);
    assert_eq!(m.loss_curve.len(), 1);
}

#[test]
fn trained_model_classifies_clean_templates() {
    let data = synth_gesture_dataset(328, 0).unwrap();
    let (params, m) = train_gestures(&data, &TrainConfig::default()).unwrap();
    assert!(m.test_accuracy >= 0.95, "{m:?}");
    for label in GestureLabel::all() {
        let (got, _) = predict_gesture(&params, &gesture_template(label)).unwrap();
        assert_eq!(got, label, "template {}", label.name());
    }
}

#[test]
fn model_file_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = MlpParams::glorot(&mut rng);
    let mut bytes = Vec::new();
    params.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..6], MODEL_MAGIC);
    assert_eq!(bytes.len(), 6 + 12 + 8 * params.len());
    assert_eq!(MlpParams::read_from(&bytes[..]).unwrap(), params);
    assert!(MlpParams::read_from(&bytes[..bytes.len() - 1]).is_err());
    let mut wrong = bytes.clone();
    wrong[6] = 64;
    assert!(MlpParams::read_from(&wrong[..]).is_err());
}

#[test]
fn dataset_csv_roundtrip() {
    let data = synth_gesture_dataset(30, 4).unwrap();
    let mut bytes = Vec::new();
    write_dataset_csv(&data, &mut bytes).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with("f0,f1,"));
    assert!(text.lines().next().unwrap().ends_with(",f62,label"));
    assert_eq!(read_dataset_csv(&bytes[..]).unwrap(), data);
}
