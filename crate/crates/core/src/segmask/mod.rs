//! Run-length encoded segment masks.
//!
//! A [`MaskSet`] holds the class-agnostic segments detected on one image.
//! Segments may overlap each other and may split a single object into
//! several parts; nothing here assumes a partition of the image. Each mask
//! is a sorted list of `(start, length)` runs over row-major pixel indices.
//!
//! On disk a mask set is a compact JSON document
//! `{"width":W,"height":H,"masks":[{"runs":[s0,l0,s1,l1,...]},...]}` with
//! masks ordered by (first run start, pixel count) and runs by start.

mod oracle;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use oracle::{oversegment_oracle, simulate_dataset, OracleParams};

/// File extension of serialized mask sets.
pub const MASKS_EXTENSION: &str = "masks.json";

/// One binary segment over a `width`×`height` image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegmentMask {
    width: usize,
    height: usize,
    runs: Vec<(usize, usize)>,
}

impl SegmentMask {
    /// Encodes a row-major bitmap into maximal runs.
    pub fn encode(width: usize, height: usize, bitmap: &[bool]) -> Result<Self> {
        if bitmap.len() != width * height {
            return Err(shape_err!(
                "bitmap of {} pixels does not match {width}×{height}",
                bitmap.len()
            ));
        }
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &on) in bitmap.iter().enumerate() {
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, bitmap.len() - s));
        }
        if runs.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(SegmentMask { width, height, runs })
    }

    /// Builds a mask from a sorted pixel index list.
    pub fn from_sorted_pixels(width: usize, height: usize, pixels: &[usize]) -> Result<Self> {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &p in pixels {
            if p >= width * height {
                return Err(shape_err!("pixel {p} outside a {width}×{height} image"));
            }
            match runs.last_mut() {
                Some((s, l)) if *s + *l == p => *l += 1,
                Some((s, l)) if *s + *l > p => {
                    return Err(shape_err!("pixel list is not strictly increasing at {p}"))
                }
                _ => runs.push((p, 1)),
            }
        }
        if runs.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(SegmentMask { width, height, runs })
    }

    /// Validates externally supplied runs. Touching runs are merged so the
    /// stored form is always maximal.
    pub fn from_runs(width: usize, height: usize, runs: &[(usize, usize)]) -> Result<Self> {
        let total = width * height;
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
        for &(start, len) in runs {
            if len == 0 {
                return Err(shape_err!("zero-length run at offset {start}"));
            }
            if start.checked_add(len).is_none_or(|end| end > total) {
                return Err(shape_err!(
                    "run ({start}, {len}) exceeds the {total}-pixel image"
                ));
            }
            match merged.last_mut() {
                Some((s, l)) if *s + *l == start => *l += len,
                Some((s, l)) if *s + *l > start => {
                    return Err(shape_err!(
                        "run at offset {start} overlaps or precedes the run ending at {}",
                        *s + *l
                    ))
                }
                _ => merged.push((start, len)),
            }
        }
        if merged.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(SegmentMask {
            width,
            height,
            runs: merged,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn runs(&self) -> &[(usize, usize)] {
        &self.runs
    }

    pub fn pixel_count(&self) -> usize {
        self.runs.iter().map(|&(_, l)| l).sum()
    }

    pub fn first_pixel(&self) -> usize {
        self.runs[0].0
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut bitmap = vec![false; self.width * self.height];
        for &(s, l) in &self.runs {
            bitmap[s..s + l].fill(true);
        }
        bitmap
    }

    /// Row-major indices of the pixels in the mask, ascending.
    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    fn sort_key(&self) -> (usize, usize, &[(usize, usize)]) {
        (self.first_pixel(), self.pixel_count(), &self.runs)
    }
}

/// All segments detected on one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    width: usize,
    height: usize,
    masks: Vec<SegmentMask>,
}

#[derive(Serialize, Deserialize)]
struct MaskSetFile {
    width: usize,
    height: usize,
    masks: Vec<MaskFile>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    runs: Vec<usize>,
}

impl MaskSet {
    /// Collects masks into canonical order.
    pub fn new(width: usize, height: usize, mut masks: Vec<SegmentMask>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape_err!("mask set needs a non-empty image, got {width}×{height}"));
        }
        if let Some(m) = masks.iter().find(|m| m.width != width || m.height != height) {
            return Err(shape_err!(
                "mask of {}×{} in a {width}×{height} mask set",
                m.width,
                m.height
            ));
        }
        masks.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        Ok(MaskSet { width, height, masks })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        MaskSet::new(width, height, Vec::new())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn masks(&self) -> &[SegmentMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = MaskSetFile {
            width: self.width,
            height: self.height,
            masks: self
                .masks
                .iter()
                .map(|m| MaskFile {
                    runs: m.runs.iter().flat_map(|&(s, l)| [s, l]).collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("mask sets always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<memory>"))
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let file: MaskSetFile =
            serde_json::from_str(text).map_err(|e| Error::format("mask set", path, e.to_string()))?;
        let mut masks = Vec::with_capacity(file.masks.len());
        for (i, m) in file.masks.iter().enumerate() {
            if m.runs.len() % 2 != 0 {
                return Err(Error::format(
                    "mask set",
                    path,
                    format!("mask {i} has an odd number of run entries"),
                ));
            }
            let runs: Vec<(usize, usize)> = m.runs.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            let mask = SegmentMask::from_runs(file.width, file.height, &runs)
                .map_err(|e| Error::format("mask set", path, format!("mask {i}: {e}")))?;
            masks.push(mask);
        }
        MaskSet::new(file.width, file.height, masks).map_err(|e| Error::format("mask set", path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn stats(&self) -> MaskStats {
        mask_stats(self)
    }
}

/// Summary counts of a [`MaskSet`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    pub count: usize,
    pub pixel_counts: Vec<usize>,
    /// Pixels covered by at least two masks.
    pub overlap_pixels: usize,
    /// Fraction of pixels covered by at least one mask.
    pub coverage: f64,
}

pub fn mask_stats(ms: &MaskSet) -> MaskStats {
    let mut hits = vec![0u32; ms.width * ms.height];
    for m in &ms.masks {
        for p in m.pixels() {
            hits[p] += 1;
        }
    }
    let covered = hits.iter().filter(|&&h| h >= 1).count();
    MaskStats {
        count: ms.masks.len(),
        pixel_counts: ms.masks.iter().map(SegmentMask::pixel_count).collect(),
        overlap_pixels: hits.iter().filter(|&&h| h >= 2).count(),
        coverage: covered as f64 / hits.len() as f64,
    }
}
