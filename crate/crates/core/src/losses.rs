//! Training objectives.
//!
//! * supervised per-pixel cross-entropy on annotated frames;
//! * segment pooling of dense features over a [`MaskSet`], giving each
//!   segment's mean `μᵢ` and unnormalized variance `vᵢ = Σ_{p∈Sᵢ}(z_p − μᵢ)²`;
//! * the invariance term `(1/D · Σᵢ ‖vᵢ‖₁) / Σᵢ |Sᵢ|`, which weights every
//!   pixel of every segment equally;
//! * the variance term, the mean over unordered segment pairs of the hinge
//!   `max(0, β − ‖μᵢ − μⱼ‖₂)`;
//! * the unannotated-frame objective `α · (invariance + variance)`.
//!
//! Overlapping masks are pooled independently: a pixel inside k masks
//! contributes to all k segments.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::idmap::IdMap;
use crate::numerics::{Backward, Tape, Tensor, Var};
use crate::segmask::MaskSet;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.5;

struct CrossEntropyOp {
    logits: Var,
    /// Softmax probabilities, C×N planar.
    probs: Vec<f64>,
    labels: Vec<u8>,
}

impl Backward for CrossEntropyOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, _tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.labels.len();
        let scale = dy[0] / n as f64;
        let mut g: Vec<f64> = self.probs.iter().map(|p| p * scale).collect();
        for (p, &y) in self.labels.iter().enumerate() {
            g[usize::from(y) * n + p] -= scale;
        }
        vec![Some(g)]
    }
}

/// Mean over all pixels of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &IdMap) -> Result<Var> {
    let (c, h, w) = tape.value(logits).shape().chw()?;
    if (labels.height(), labels.width()) != (h, w) {
        return Err(shape_err!(
            "labels are {}×{} but logits are {h}×{w}",
            labels.height(),
            labels.width()
        ));
    }
    if let Some(&bad) = labels.ids().iter().find(|&&y| usize::from(y) >= c) {
        return Err(contract_err!("label {bad} outside [0, {}]", c - 1));
    }
    let n = h * w;
    let x = tape.value(logits).data();
    let mut probs = vec![0.0; c * n];
    let mut total = 0.0;
    for (p, &y) in labels.ids().iter().enumerate() {
        let max = (0..c).map(|k| x[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in 0..c {
            let e = (x[k * n + p] - max).exp();
            probs[k * n + p] = e;
            denom += e;
        }
        for k in 0..c {
            probs[k * n + p] /= denom;
        }
        total += denom.ln() + max - x[usize::from(y) * n + p];
    }
    let value = Tensor::scalar(total / n as f64);
    Ok(tape.record(
        value,
        Box::new(CrossEntropyOp {
            logits,
            probs,
            labels: labels.ids().to_vec(),
        }),
    ))
}

/// Per-segment statistics as plain values (row `i` belongs to mask `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub dim: usize,
    /// N×D means.
    pub means: Vec<f64>,
    /// N×D unnormalized variances.
    pub sq_dev: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SegmentStats {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn variance(&self, i: usize) -> &[f64] {
        &self.sq_dev[i * self.dim..(i + 1) * self.dim]
    }

    /// Invariance term evaluated on plain values.
    pub fn invariance(&self) -> f64 {
        let pixels: usize = self.counts.iter().sum();
        if pixels == 0 {
            return 0.0;
        }
        self.sq_dev.iter().sum::<f64>() / self.dim as f64 / pixels as f64
    }

    /// Variance (margin) term evaluated on plain values.
    pub fn margin(&self, beta: f64) -> f64 {
        pairwise_hinge(&self.means, self.dim, beta)
    }
}

fn check_dense(dense: &Tensor, masks: &MaskSet) -> Result<(usize, usize)> {
    let (d, h, w) = dense.shape().chw()?;
    if (masks.height(), masks.width()) != (h, w) {
        return Err(shape_err!(
            "masks are {}×{} but dense features are {h}×{w}",
            masks.height(),
            masks.width()
        ));
    }
    Ok((d, h * w))
}

fn pooled_means(dense: &[f64], dim: usize, n: usize, masks: &MaskSet) -> Vec<f64> {
    let mut means = Vec::with_capacity(masks.len() * dim);
    for m in masks.masks() {
        let count = m.pixel_count() as f64;
        for d in 0..dim {
            let plane = &dense[d * n..(d + 1) * n];
            let sum: f64 = m.runs().iter().map(|&(s, l)| plane[s..s + l].iter().sum::<f64>()).sum();
            means.push(sum / count);
        }
    }
    means
}

fn pooled_sq_dev(dense: &[f64], dim: usize, n: usize, masks: &MaskSet, means: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(masks.len() * dim);
    for (i, m) in masks.masks().iter().enumerate() {
        for d in 0..dim {
            let plane = &dense[d * n..(d + 1) * n];
            let mu = means[i * dim + d];
            let v: f64 = m
                .runs()
                .iter()
                .map(|&(s, l)| plane[s..s + l].iter().map(|z| (z - mu) * (z - mu)).sum::<f64>())
                .sum();
            out.push(v);
        }
    }
    out
}

/// Segment statistics of a D×H×W feature map, walking mask runs directly.
pub fn segment_stats(dense: &Tensor, masks: &MaskSet) -> Result<SegmentStats> {
    let (dim, n) = check_dense(dense, masks)?;
    let means = pooled_means(dense.data(), dim, n, masks);
    let sq_dev = pooled_sq_dev(dense.data(), dim, n, masks, &means);
    Ok(SegmentStats {
        dim,
        means,
        sq_dev,
        counts: masks.masks().iter().map(|m| m.pixel_count()).collect(),
    })
}

struct SegmentMeanOp {
    dense: Var,
    masks: MaskSet,
    dim: usize,
}

impl Backward for SegmentMeanOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.dense]
    }

    fn backward(&self, _tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.masks.width() * self.masks.height();
        let mut g = vec![0.0; self.dim * n];
        for (i, m) in self.masks.masks().iter().enumerate() {
            let inv = 1.0 / m.pixel_count() as f64;
            for d in 0..self.dim {
                let share = dy[i * self.dim + d] * inv;
                let plane = &mut g[d * n..(d + 1) * n];
                for &(s, l) in m.runs() {
                    plane[s..s + l].iter_mut().for_each(|v| *v += share);
                }
            }
        }
        vec![Some(g)]
    }
}

struct SegmentSqDevOp {
    dense: Var,
    masks: MaskSet,
    dim: usize,
    means: Vec<f64>,
}

impl Backward for SegmentSqDevOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.dense]
    }

    // ∂vᵢ/∂z_p = 2(z_p − μᵢ); the path through μᵢ vanishes because the
    // deviations of a segment sum to zero.
    fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let z = tape.value(self.dense).data();
        let n = self.masks.width() * self.masks.height();
        let mut g = vec![0.0; self.dim * n];
        for (i, m) in self.masks.masks().iter().enumerate() {
            for d in 0..self.dim {
                let k = 2.0 * dy[i * self.dim + d];
                let mu = self.means[i * self.dim + d];
                let (src, dst) = (&z[d * n..(d + 1) * n], &mut g[d * n..(d + 1) * n]);
                for &(s, l) in m.runs() {
                    for p in s..s + l {
                        dst[p] += k * (src[p] - mu);
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Pooled segment statistics recorded on a tape.
#[derive(Debug, Clone)]
pub struct PooledSegments {
    /// N×D means and unnormalized variances; `None` when there are no masks.
    pub nodes: Option<(Var, Var)>,
    pub counts: Vec<usize>,
    pub dim: usize,
}

impl PooledSegments {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn stats(&self, tape: &Tape) -> SegmentStats {
        let (means, sq_dev) = match self.nodes {
            Some((m, v)) => (tape.value(m).data().to_vec(), tape.value(v).data().to_vec()),
            None => (Vec::new(), Vec::new()),
        };
        SegmentStats {
            dim: self.dim,
            means,
            sq_dev,
            counts: self.counts.clone(),
        }
    }
}

/// Differentiable segment pooling of a D×H×W feature node.
pub fn segment_pool(tape: &mut Tape, dense: Var, masks: &MaskSet) -> Result<PooledSegments> {
    let (dim, n) = check_dense(tape.value(dense), masks)?;
    let counts: Vec<usize> = masks.masks().iter().map(|m| m.pixel_count()).collect();
    if masks.is_empty() {
        return Ok(PooledSegments {
            nodes: None,
            counts,
            dim,
        });
    }
    let z = tape.value(dense).data();
    let means = pooled_means(z, dim, n, masks);
    let sq_dev = pooled_sq_dev(z, dim, n, masks, &means);
    let mean_node = tape.record(
        Tensor::from_vec([masks.len(), dim], means.clone())?,
        Box::new(SegmentMeanOp {
            dense,
            masks: masks.clone(),
            dim,
        }),
    );
    let var_node = tape.record(
        Tensor::from_vec([masks.len(), dim], sq_dev)?,
        Box::new(SegmentSqDevOp {
            dense,
            masks: masks.clone(),
            dim,
            means,
        }),
    );
    Ok(PooledSegments {
        nodes: Some((mean_node, var_node)),
        counts,
        dim,
    })
}

/// `(1/D · Σᵢ ‖vᵢ‖₁) / Σᵢ |Sᵢ|`; zero without segments.
pub fn invariance_loss(tape: &mut Tape, pooled: &PooledSegments) -> Var {
    match pooled.nodes {
        // vᵢ ≥ 0, so the L1 norm is a plain sum.
        Some((_, sq_dev)) => {
            let pixels: usize = pooled.counts.iter().sum();
            tape.sum_scaled(sq_dev, 1.0 / (pooled.dim as f64 * pixels as f64))
        }
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

fn pairwise_hinge(means: &[f64], dim: usize, beta: f64) -> f64 {
    let count = if dim == 0 { 0 } else { means.len() / dim };
    if count < 2 {
        return 0.0;
    }
    let pairs = (count * (count - 1) / 2) as f64;
    let mut total = 0.0;
    for i in 0..count {
        for j in i + 1..count {
            let dist = distance(&means[i * dim..(i + 1) * dim], &means[j * dim..(j + 1) * dim]);
            if dist < beta {
                total += beta - dist;
            }
        }
    }
    total / pairs
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct PairwiseHingeOp {
    means: Var,
    dim: usize,
    beta: f64,
}

impl Backward for PairwiseHingeOp {
    fn inputs(&self) -> Vec<Var> {
        vec![self.means]
    }

    fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mu = tape.value(self.means).data();
        let dim = self.dim;
        let count = mu.len() / dim;
        let pairs = (count * (count - 1) / 2) as f64;
        let mut g = vec![0.0; mu.len()];
        for i in 0..count {
            for j in i + 1..count {
                let (a, b) = (&mu[i * dim..(i + 1) * dim], &mu[j * dim..(j + 1) * dim]);
                let dist = distance(a, b);
                // Closed hinge; coincident means take the zero subgradient.
                if dist >= self.beta || dist == 0.0 {
                    continue;
                }
                let k = dy[0] / (pairs * dist);
                for d in 0..dim {
                    let diff = a[d] - b[d];
                    g[i * dim + d] -= k * diff;
                    g[j * dim + d] += k * diff;
                }
            }
        }
        vec![Some(g)]
    }
}

/// Mean over unordered pairs of `max(0, β − ‖μᵢ − μⱼ‖₂)`; zero for N ≤ 1.
pub fn variance_loss(tape: &mut Tape, pooled: &PooledSegments, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(contract_err!("margin β must be positive, got {beta}"));
    }
    match pooled.nodes {
        Some((means, _)) if pooled.len() >= 2 => {
            let value = pairwise_hinge(tape.value(means).data(), pooled.dim, beta);
            Ok(tape.record(
                Tensor::scalar(value),
                Box::new(PairwiseHingeOp {
                    means,
                    dim: pooled.dim,
                    beta,
                }),
            ))
        }
        _ => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Tape nodes of the unannotated-frame objective.
#[derive(Debug, Clone, Copy)]
pub struct RealLoss {
    pub total: Var,
    pub invariance: Var,
    pub variance: Var,
}

/// `α · (invariance + variance)` over the segments in `masks`.
pub fn real_loss(tape: &mut Tape, dense: Var, masks: &MaskSet, alpha: f64, beta: f64) -> Result<RealLoss> {
    let pooled = segment_pool(tape, dense, masks)?;
    let invariance = invariance_loss(tape, &pooled);
    let variance = variance_loss(tape, &pooled, beta)?;
    let sum = tape.add(invariance, variance)?;
    let total = tape.scale(sum, alpha);
    Ok(RealLoss {
        total,
        invariance,
        variance,
    })
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub frame: usize,
    pub supervised: Option<f64>,
    pub invariance: Option<f64>,
    pub variance: Option<f64>,
    pub combined_real: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmask::SegmentMask;

    fn dense(dim: usize, h: usize, w: usize, pixels: &[&[f64]]) -> Tensor {
        let n = h * w;
        let mut data = vec![0.0; dim * n];
        for (p, z) in pixels.iter().enumerate() {
            for d in 0..dim {
                data[d * n + p] = z[d];
            }
        }
        Tensor::from_vec([dim, h, w], data).unwrap()
    }

    fn mask(w: usize, h: usize, pixels: &[usize]) -> SegmentMask {
        SegmentMask::from_sorted_pixels(w, h, pixels).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(crate::numerics::Shape::new([3, 4, 5]).unwrap()));
        let labels = IdMap::new(5, 4, (0..20).map(|i| (i % 3) as u8).collect()).unwrap();
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        assert!((scalar(&tape, loss) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec([2, 1, 2], vec![60.0, -60.0, -60.0, 60.0]).unwrap());
        let labels = IdMap::new(2, 1, vec![0, 1]).unwrap();
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        assert!(scalar(&tape, loss) < 1e-40);
    }

    #[test]
    fn single_pixel_two_class_value() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec([2, 1, 1], vec![1.0, 0.0]).unwrap());
        let labels = IdMap::new(1, 1, vec![0]).unwrap();
        let loss = cross_entropy(&mut tape, logits, &labels).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((scalar(&tape, loss) - expect).abs() < 1e-15);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label_is_a_contract_violation() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(crate::numerics::Shape::new([2, 1, 2]).unwrap()));
        let labels = IdMap::new(2, 1, vec![0, 2]).unwrap();
        assert!(matches!(cross_entropy(&mut tape, logits, &labels), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn constant_segment_has_zero_variance() {
        let z = dense(3, 2, 2, &[&[0.3, -1.0, 2.0][..]; 4]);
        let ms = MaskSet::new(2, 2, vec![mask(2, 2, &[0, 1, 3])]).unwrap();
        let s = segment_stats(&z, &ms).unwrap();
        assert_eq!(s.mean(0), &[0.3, -1.0, 2.0]);
        assert_eq!(s.variance(0), &[0.0; 3]);
        assert_eq!(s.invariance(), 0.0);
    }

    #[test]
    fn two_pixel_segment_stats_and_invariance() {
        let z = dense(3, 1, 2, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let ms = MaskSet::new(2, 1, vec![mask(2, 1, &[0, 1])]).unwrap();
        let s = segment_stats(&z, &ms).unwrap();
        assert_eq!(s.mean(0), &[0.5, 0.5, 0.0]);
        assert_eq!(s.variance(0), &[0.5, 0.5, 0.0]);

        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let pooled = segment_pool(&mut tape, zv, &ms).unwrap();
        let inv = invariance_loss(&mut tape, &pooled);
        assert!((scalar(&tape, inv) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn extra_singleton_segment_dilutes_invariance() {
        let z = dense(3, 1, 3, &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[7.0, 7.0, 7.0]]);
        let ms = MaskSet::new(3, 1, vec![mask(3, 1, &[0, 1]), mask(3, 1, &[2])]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let pooled = segment_pool(&mut tape, zv, &ms).unwrap();
        let inv = invariance_loss(&mut tape, &pooled);
        assert!((scalar(&tape, inv) - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn duplicated_mask_gives_identical_stats() {
        let z = dense(2, 2, 2, &[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.5], &[2.0, 2.0]]);
        let m = mask(2, 2, &[0, 2, 3]);
        let ms = MaskSet::new(2, 2, vec![m.clone(), m]).unwrap();
        let s = segment_stats(&z, &ms).unwrap();
        assert_eq!(s.mean(0), s.mean(1));
        assert_eq!(s.variance(0), s.variance(1));
    }

    #[test]
    fn hinge_values() {
        let single = dense(3, 1, 2, &[&[0.0; 3], &[0.0; 3]]);
        let ms = MaskSet::new(2, 1, vec![mask(2, 1, &[0, 1])]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(single.clone());
        let pooled = segment_pool(&mut tape, zv, &ms).unwrap();
        let v = variance_loss(&mut tape, &pooled, 0.5).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);

        // Two segments whose means coincide.
        let ms = MaskSet::new(2, 1, vec![mask(2, 1, &[0]), mask(2, 1, &[1])]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(single);
        let pooled = segment_pool(&mut tape, zv, &ms).unwrap();
        let v = variance_loss(&mut tape, &pooled, 0.5).unwrap();
        assert_eq!(scalar(&tape, v), 0.5);
        let g = tape.backward(v).unwrap().get(zv);
        assert!(g.data().iter().all(|v| v.is_finite() && *v == 0.0));

        // Three collinear means at spacing β.
        let z = dense(3, 1, 3, &[&[0.0, 0.0, 0.0], &[0.5, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let ms = MaskSet::new(3, 1, vec![mask(3, 1, &[0]), mask(3, 1, &[1]), mask(3, 1, &[2])]).unwrap();
        let s = segment_stats(&z, &ms).unwrap();
        assert_eq!(s.margin(0.5), 0.0);
    }

    #[test]
    fn combined_loss_composes() {
        let z = dense(3, 1, 4, &[&[0.2, 0.1, 0.0][..]; 4]);
        let ms = MaskSet::new(4, 1, vec![mask(4, 1, &[0, 1]), mask(4, 1, &[2, 3])]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        let loss = real_loss(&mut tape, zv, &ms, 0.05, 0.5).unwrap();
        assert!((scalar(&tape, loss.total) - 0.025).abs() < 1e-15);
        assert_eq!(scalar(&tape, loss.invariance), 0.0);
        assert_eq!(scalar(&tape, loss.variance), 0.5);

        let empty = MaskSet::empty(4, 1).unwrap();
        let loss = real_loss(&mut tape, zv, &empty, 0.05, 0.5).unwrap();
        assert_eq!(scalar(&tape, loss.total), 0.0);
    }

    #[test]
    fn pooling_rejects_mismatched_masks() {
        let z = dense(3, 2, 2, &[&[0.0; 3][..]; 4]);
        let ms = MaskSet::empty(3, 2).unwrap();
        assert!(segment_stats(&z, &ms).is_err());
        let mut tape = Tape::new();
        let zv = tape.leaf(z);
        assert!(segment_pool(&mut tape, zv, &ms).is_err());
    }

    #[test]
    fn non_positive_margin_is_rejected() {
        let mut tape = Tape::new();
        let zv = tape.leaf(dense(1, 1, 2, &[&[0.0], &[1.0]]));
        let ms = MaskSet::new(2, 1, vec![mask(2, 1, &[0]), mask(2, 1, &[1])]).unwrap();
        let pooled = segment_pool(&mut tape, zv, &ms).unwrap();
        assert!(variance_loss(&mut tape, &pooled, 0.0).is_err());
    }
}
