//! mIoU against a confusion-matrix oracle, plus metric symmetries.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segpool::evalmod::{iou_class, miou_dataset, miou_frame, EvalReport};
use segpool::IdMap;

const CLASSES: usize = 5;

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, classes: usize) -> IdMap {
    // Skew toward background so some frames lack a few classes.
    let ids = (0..w * h)
        .map(|_| {
            if rng.random::<f64>() < 0.4 {
                0
            } else {
                rng.random_range(0..classes as u8)
            }
        })
        .collect();
    IdMap::new(w, h, ids).unwrap()
}

fn confusion_miou(pred: &IdMap, gt: &IdMap, classes: usize) -> Option<f64> {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        m[usize::from(g)][usize::from(p)] += 1;
    }
    let mut ious = Vec::new();
    for c in 1..classes {
        let gt_total: usize = m[c].iter().sum();
        if gt_total == 0 {
            continue;
        }
        let pred_total: usize = (0..classes).map(|g| m[g][c]).sum();
        let inter = m[c][c];
        ious.push(inter as f64 / (gt_total + pred_total - inter) as f64);
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

#[test]
fn miou_matches_the_confusion_matrix_on_random_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let pred = random_map(&mut rng, 8, 8, CLASSES);
        let gt = random_map(&mut rng, 8, 8, CLASSES);
        let ours = miou_frame(&pred, &gt, CLASSES).unwrap();
        let oracle = confusion_miou(&pred, &gt, CLASSES);
        match (ours, oracle) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn report_dataset_miou_is_the_mean_of_frame_mious() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds: Vec<IdMap> = (0..12).map(|_| random_map(&mut rng, 6, 6, CLASSES)).collect();
    let gts: Vec<IdMap> = (0..12).map(|_| random_map(&mut rng, 6, 6, CLASSES)).collect();
    let report = EvalReport::from_pairs(preds.iter().zip(&gts), CLASSES).unwrap();
    let per_frame: Vec<f64> = report.frames.iter().filter_map(|f| f.miou).collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    assert!((report.dataset_miou.unwrap() - mean).abs() < 1e-12);
    assert_eq!(report.frame_count, 12);
    for f in &report.frames {
        assert!(f.class_iou.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric(seed in any::<u64>(), class in 0u8..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, 7, 5, CLASSES);
        let b = random_map(&mut rng, 7, 5, CLASSES);
        prop_assert_eq!(iou_class(&a, &b, class).unwrap(), iou_class(&b, &a, class).unwrap());
    }

    #[test]
    fn frame_order_does_not_change_dataset_miou(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scores: Vec<Option<f64>> = (0..20)
            .map(|_| (rng.random::<f64>() < 0.8).then(|| rng.random::<f64>()))
            .collect();
        let before = miou_dataset(&scores);
        scores.shuffle(&mut rng);
        let after = miou_dataset(&scores);
        match (before, after) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}
