//! Segmentation metrics and feature visualization.
//!
//! Per-frame mIoU averages IoU over the classes present in the ground truth,
//! background excluded. Frames without any such class are left out of the
//! dataset mean. The convention is recorded in every [`EvalReport`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::idmap::IdMap;
use crate::model::{forward, predict_labels, ModelParams};
use crate::numerics::Tensor;
use crate::pnm;

/// Identifier of the class-presence rule used by [`miou_frame`].
pub const CLASS_PRESENCE_CONVENTION: &str = "gt-present-non-background";

/// Mean taken relative to the first entry, so a constant list averages to
/// exactly that constant.
fn mean(xs: &[f64]) -> f64 {
    let first = xs[0];
    first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64
}

fn check_pair(pred: &IdMap, gt: &IdMap) -> Result<()> {
    if !pred.same_dims(gt) {
        return Err(shape_err!(
            "prediction is {}×{} but ground truth is {}×{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    Ok(())
}

/// |P_c ∩ G_c| / |P_c ∪ G_c|, or 1 when both sets are empty.
pub fn iou_class(pred: &IdMap, gt: &IdMap, class: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        let (a, b) = (p == class, g == class);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-class IoU of one frame; `None` for classes outside C_I.
pub fn frame_class_iou(pred: &IdMap, gt: &IdMap, classes: usize) -> Result<Vec<Option<f64>>> {
    check_pair(pred, gt)?;
    let mut present = vec![false; classes];
    for &g in gt.ids() {
        let g = usize::from(g);
        if g >= classes {
            return Err(contract_err!("ground-truth class {g} outside [0, {}]", classes - 1));
        }
        present[g] = true;
    }
    (0..classes)
        .map(|c| {
            if c == 0 || !present[c] {
                Ok(None)
            } else {
                iou_class(pred, gt, c as u8).map(Some)
            }
        })
        .collect()
}

/// Mean IoU over C_I; `None` when C_I is empty.
pub fn miou_frame(pred: &IdMap, gt: &IdMap, classes: usize) -> Result<Option<f64>> {
    let ious: Vec<f64> = frame_class_iou(pred, gt, classes)?.into_iter().flatten().collect();
    Ok((!ious.is_empty()).then(|| mean(&ious)))
}

/// Mean of the scored frames; `None` if no frame was scored.
pub fn miou_dataset(frame_miou: &[Option<f64>]) -> Option<f64> {
    let scored: Vec<f64> = frame_miou.iter().flatten().copied().collect();
    (!scored.is_empty()).then(|| mean(&scored))
}

/// Mean of the last `k` entries of a metric log.
pub fn last_k_average(log: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(contract_err!("last-k average needs k ≥ 1"));
    }
    if log.len() < k {
        return Err(contract_err!("metric log has {} entries, fewer than k = {k}", log.len()));
    }
    Ok(mean(&log[log.len() - k..]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    /// One entry per class; null for classes outside C_I.
    pub class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub convention: String,
    pub classes: usize,
    pub frame_count: usize,
    pub scored_frames: usize,
    pub dataset_miou: Option<f64>,
    pub frames: Vec<FrameEval>,
}

impl EvalReport {
    /// Scores `(prediction, ground truth)` pairs in order.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a IdMap, &'a IdMap)>, classes: usize) -> Result<Self> {
        let mut frames = Vec::new();
        for (k, (pred, gt)) in pairs.into_iter().enumerate() {
            let class_iou = frame_class_iou(pred, gt, classes)?;
            let ious: Vec<f64> = class_iou.iter().flatten().copied().collect();
            let miou = (!ious.is_empty()).then(|| mean(&ious));
            frames.push(FrameEval {
                frame: k,
                class_iou,
                miou,
            });
        }
        let per_frame: Vec<Option<f64>> = frames.iter().map(|f| f.miou).collect();
        Ok(EvalReport {
            convention: CLASS_PRESENCE_CONVENTION.to_string(),
            classes,
            frame_count: frames.len(),
            scored_frames: per_frame.iter().flatten().count(),
            dataset_miou: miou_dataset(&per_frame),
            frames,
        })
    }
}

/// Predicts every image with `params` and scores it against its labels.
pub fn evaluate_model(params: &ModelParams, images: &[Tensor], labels: &[IdMap]) -> Result<EvalReport> {
    if images.len() != labels.len() {
        return Err(contract_err!("{} images but {} label maps", images.len(), labels.len()));
    }
    let preds = images
        .iter()
        .map(|img| predict_labels(&forward(params, img)?.logits))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pairs(preds.iter().zip(labels), params.config().classes)
}

/// Byte image of a 3-channel feature map plus the channels that were constant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub rgb: Vec<u8>,
    pub constant_channels: Vec<usize>,
}

/// Per-channel min–max normalization to 0..=255 with round-half-up.
/// A constant channel maps to 0.
pub fn normalize_features(dense: &Tensor) -> Result<FeatureImage> {
    let (d, h, w) = dense.shape().chw()?;
    if d != 3 {
        return Err(shape_err!(
            "feature visualization needs exactly 3 channels, got {d}; train with a dense dimension of 3"
        ));
    }
    let n = h * w;
    let mut rgb = vec![0u8; 3 * n];
    let mut constant_channels = Vec::new();
    for c in 0..3 {
        let plane = &dense.data()[c * n..(c + 1) * n];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            constant_channels.push(c);
            continue;
        }
        for (p, &z) in plane.iter().enumerate() {
            let v = (z - lo) / (hi - lo) * 255.0;
            rgb[p * 3 + c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(FeatureImage {
        width: w,
        height: h,
        rgb,
        constant_channels,
    })
}

/// Writes the normalized feature map as a binary PPM.
pub fn viz_features(dense: &Tensor, out: &Path) -> Result<FeatureImage> {
    let img = normalize_features(dense)?;
    pnm::write(out, &pnm::encode_ppm(img.width, img.height, &img.rgb))?;
    Ok(img)
}
