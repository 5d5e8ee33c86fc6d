//! Simulated "segment everything" output.
//!
//! Stands in for a promptable segmentation model run over a point grid: it
//! turns ground-truth instances into an oversegmenting, overlapping and
//! boundary-noisy mask set, plus a few blobs on the background.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::{Path, PathBuf};

use crate::error::{contract_err, Error, Result};
use crate::idmap::IdMap;
use crate::scenegen::{frame_path, load_id_map, DatasetManifest};
use crate::segmask::{MaskSet, SegmentMask};

/// Probability that a pixel inside the jitter band flips membership.
const JITTER_FLIP_PROB: f64 = 0.25;
const BLOB_RADIUS: std::ops::RangeInclusive<usize> = 2..=6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub split_prob: f64,
    pub max_parts: usize,
    pub keep_whole_prob: f64,
    pub jitter_radius: usize,
    pub spurious_masks: usize,
    pub min_mask_pixels: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            split_prob: 0.7,
            max_parts: 3,
            keep_whole_prob: 0.8,
            jitter_radius: 1,
            spurious_masks: 2,
            min_mask_pixels: 8,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split_prob) {
            return Err(contract_err!("split probability {} outside [0, 1]", self.split_prob));
        }
        if !(0.0..=1.0).contains(&self.keep_whole_prob) {
            return Err(contract_err!(
                "keep-whole probability {} outside [0, 1]",
                self.keep_whole_prob
            ));
        }
        if self.max_parts < 1 {
            return Err(contract_err!("max parts per instance must be at least 1"));
        }
        if self.min_mask_pixels < 1 {
            return Err(contract_err!("min mask pixels must be at least 1"));
        }
        Ok(())
    }
}

/// Derives a mask set from an instance map (0 = background).
///
/// Per instance, in ascending id order: the whole instance is kept with
/// `keep_whole_prob`; with `split_prob` it is additionally partitioned into
/// 2..=`max_parts` parts by nearest random seed pixel. Every candidate is
/// jittered within `jitter_radius` of its border and dropped if it ends up
/// with fewer than `min_mask_pixels` pixels. Background blobs follow.
pub fn oversegment_oracle(instances: &IdMap, params: &OracleParams, seed: u64) -> Result<MaskSet> {
    params.validate()?;
    let (w, h) = (instances.width(), instances.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_instance: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    let mut background = Vec::new();
    for (p, &id) in instances.ids().iter().enumerate() {
        if id == 0 {
            background.push(p);
        } else {
            by_instance.entry(id).or_default().push(p);
        }
    }

    let mut candidates: Vec<Vec<bool>> = Vec::new();
    for pixels in by_instance.values() {
        let whole = to_bitmap(w * h, pixels);
        if rng.random::<f64>() < params.keep_whole_prob {
            candidates.push(whole);
        }
        if rng.random::<f64>() < params.split_prob && params.max_parts >= 2 && pixels.len() >= 2 {
            let parts = rng.random_range(2..=params.max_parts).min(pixels.len());
            candidates.extend(split_by_nearest_seed(w, h, pixels, parts, &mut rng));
        }
    }

    for _ in 0..params.spurious_masks {
        if background.is_empty() {
            break;
        }
        let centre = background[rng.random_range(0..background.len())];
        let radius = rng.random_range(BLOB_RADIUS);
        candidates.push(background_blob(instances, centre, radius));
    }

    let mut masks = Vec::new();
    for mut bitmap in candidates {
        if params.jitter_radius > 0 {
            jitter(&mut bitmap, w, h, params.jitter_radius, &mut rng);
        }
        let count = bitmap.iter().filter(|&&b| b).count();
        if count >= params.min_mask_pixels {
            masks.push(SegmentMask::encode(w, h, &bitmap)?);
        }
    }
    MaskSet::new(w, h, masks)
}

/// Runs the oracle on every frame of a generated dataset and writes one mask
/// file per frame into `out`, named as in the manifest. Frame `k` uses seed
/// `seed ^ k`.
pub fn simulate_dataset(data_dir: &Path, out: &Path, params: &OracleParams, seed: u64) -> Result<Vec<PathBuf>> {
    params.validate()?;
    let manifest = DatasetManifest::load(data_dir)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(manifest.frames.len());
    for (k, files) in manifest.frames.iter().enumerate() {
        let instances = load_id_map(&frame_path(data_dir, &files.instances))?;
        let masks = oversegment_oracle(&instances, params, seed ^ k as u64)?;
        let path = out.join(&files.masks);
        masks.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn to_bitmap(len: usize, pixels: &[usize]) -> Vec<bool> {
    let mut bitmap = vec![false; len];
    for &p in pixels {
        bitmap[p] = true;
    }
    bitmap
}

fn split_by_nearest_seed(w: usize, h: usize, pixels: &[usize], parts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let mut seeds: Vec<usize> = sample(rng, pixels.len(), parts).into_iter().map(|i| pixels[i]).collect();
    seeds.sort_unstable();
    let mut out = vec![vec![false; w * h]; parts];
    for &p in pixels {
        let (py, px) = ((p / w) as i64, (p % w) as i64);
        let nearest = seeds
            .iter()
            .enumerate()
            .min_by_key(|&(i, &s)| {
                let (sy, sx) = ((s / w) as i64, (s % w) as i64);
                ((py - sy).pow(2) + (px - sx).pow(2), i)
            })
            .map(|(i, _)| i)
            .expect("at least two seeds");
        out[nearest][p] = true;
    }
    out
}

fn background_blob(instances: &IdMap, centre: usize, radius: usize) -> Vec<bool> {
    let w = instances.width();
    let (cy, cx) = ((centre / w) as i64, (centre % w) as i64);
    let r2 = (radius * radius) as i64;
    instances
        .ids()
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            id == 0 && (y - cy).pow(2) + (x - cx).pow(2) <= r2
        })
        .collect()
}

/// Flips pixels that lie within `radius` (Chebyshev) of a pixel with the
/// opposite membership.
fn jitter(bitmap: &mut [bool], w: usize, h: usize, radius: usize, rng: &mut ChaCha8Rng) {
    let original = bitmap.to_vec();
    let r = radius as i64;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let here = original[(y as usize) * w + x as usize];
            let mut on_band = false;
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if original[(ny as usize) * w + nx as usize] != here {
                        on_band = true;
                        break 'search;
                    }
                }
            }
            if on_band && rng.random::<f64>() < JITTER_FLIP_PROB {
                bitmap[(y as usize) * w + x as usize] = !here;
            }
        }
    }
}
